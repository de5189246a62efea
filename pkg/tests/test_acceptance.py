"""Acceptance gate: one test per release criterion, named and ordered.

Each test prints a single PASS line on success (visible with -rA or -s);
pytest -v itself shows one pass/fail line per criterion. Criterion 10 needs
externally supplied full-scale weights plus a benchmark corpus and is
skipped when they are absent.
"""

import io
import itertools
import math
import os
from pathlib import Path

import numpy as np
import pytest
import torch
from fastapi.testclient import TestClient
from PIL import Image as PILImage

from boundaryseg import checkpoints, core
from boundaryseg.data import train_transform
from boundaryseg.losses import (LossConfig, SSIMParams, bce_loss, iou_loss,
                                ssim_loss, total_loss)
from boundaryseg.metrics import (e_measure_mean, evaluate_pair, mae,
                                 relaxed_boundary_fbeta, s_measure,
                                 weighted_fbeta)
from boundaryseg.model import Architecture, SegmentationModel
from boundaryseg.refinement import (RRMVariant, build_refinement_module,
                                    forward_refine, zero_residual)
from boundaryseg.service import ServiceConfig, create_app
from boundaryseg.training import (TrainConfig, overfit_single_pair,
                                  sample_batch, smoothed, train)

import oracles
from conftest import TINY_CONFIG, blob_pair, blob_sample

# An 8x8 map cannot hold the production 11x11 SSIM window, so the gradient
# and oracle checks shrink it to 5 (every other constant unchanged).
SSIM_8 = SSIMParams(window=5)


def _report(criterion: str):
    print(f"PASS {criterion}")


def t64(a):
    if torch.is_tensor(a):
        return a.to(torch.float64)
    return torch.as_tensor(np.asarray(a), dtype=torch.float64)


def test_criterion_01_gradient_correctness():
    """Analytic loss gradients match central finite differences (< 1e-3)."""
    rng = np.random.default_rng(101)
    g = rng.integers(0, 2, (8, 8)).astype(float)
    fns = {
        "pixel term": lambda s: bce_loss(t64(s), t64(g)),
        "patch term": lambda s: ssim_loss(t64(s), t64(g), SSIM_8),
        "map term": lambda s: iou_loss(t64(s), t64(g)),
    }
    others = [t64(rng.uniform(0.1, 0.9, (8, 8))) for _ in range(7)]
    config = LossConfig(ssim=SSIM_8)
    fns["total"] = lambda s: total_loss([s if torch.is_tensor(s) else t64(s)]
                                        + others, t64(g), config)[0]
    for name, fn in fns.items():
        s = rng.uniform(0.1, 0.9, (8, 8))
        s_t = t64(s).requires_grad_(True)
        fn(s_t).backward()
        analytic = s_t.grad.numpy()
        numeric = oracles.central_difference_grad(lambda a: float(fn(t64(a))), s, 1e-5)
        rel = np.abs(analytic - numeric) / np.maximum(np.abs(numeric), 1e-6)
        assert rel.max() < 1e-3, f"{name}: max rel err {rel.max():.2e}"
    _report("criterion 1: gradient correctness")


def test_criterion_02_loss_value_oracles():
    """Three hand-computed examples per loss term match to 1e-9."""
    half = t64(np.full((11, 11), 0.5))
    ones = t64(np.ones((11, 11)))
    zeros = t64(np.zeros((11, 11)))
    quarter = t64(np.full((11, 11), 0.25))

    # pixel (cross-entropy) term
    assert abs(bce_loss(half, ones).item() - math.log(2)) < 1e-9
    assert abs(bce_loss(quarter, ones).item() - math.log(4)) < 1e-9
    two = t64([[0.9, 0.1], [0.2, 0.8]])
    gt2 = t64([[1.0, 0.0], [0.0, 1.0]])
    expected = (-math.log(0.9) * 2 - math.log(0.8) * 2) / 4
    assert abs(bce_loss(two, gt2).item() - expected) < 1e-9

    # patch (structural) term; constant patches have closed-form values
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    assert abs(ssim_loss(ones, ones).item()) < 1e-9
    v_half = 1.0 - ((2 * 0.5 + c1) * c2) / ((0.25 + 1.0 + c1) * c2)
    assert abs(ssim_loss(half, ones).item() - v_half) < 1e-9
    v_quarter = 1.0 - ((2 * 0.25 * 0.75 + c1) * c2) / ((0.0625 + 0.5625 + c1) * c2)
    assert abs(ssim_loss(quarter, t64(np.full((11, 11), 0.75))).item() - v_quarter) < 1e-9

    # map (overlap) term
    sq = t64([[1.0, 0.0], [0.0, 0.0]])
    gq = t64([[1.0, 1.0], [0.0, 0.0]])
    assert abs(iou_loss(gq, gq).item()) < 1e-9
    assert abs(iou_loss(sq, gq).item() - 0.5) < 1e-9
    disjoint = t64([[0.0, 1.0], [1.0, 0.0]])
    assert abs(iou_loss(disjoint, gt2).item() - 1.0) < 1e-9
    _report("criterion 2: loss value oracles")


def test_criterion_03_background_patch_approximation():
    """On all-background patches the full patch loss equals its closed-form
    background approximation within 1e-12; the exact-zero case gives 0."""
    from boundaryseg.losses import gaussian_window
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    rng = np.random.default_rng(103)
    win = gaussian_window(11, 1.5).numpy()
    zeros = t64(np.zeros((11, 11)))
    assert ssim_loss(zeros, zeros).item() == pytest.approx(0.0, abs=1e-15)
    for _ in range(20):
        x = rng.uniform(0, 1, (11, 11))
        full = ssim_loss(t64(x), zeros).item()
        mu = (win * x).sum()
        var = (win * x * x).sum() - mu ** 2
        approx = 1.0 - c1 * c2 / ((mu ** 2 + c1) * (var + c2))
        assert abs(full - approx) < 1e-12
    _report("criterion 3: background-patch approximation")


def test_criterion_04_output_shape_invariants():
    """Full model: 8 maps at 288x288, values in (0,1); ED 1 map, EDS 7."""
    torch.manual_seed(104)
    x = torch.randn(1, 3, 288, 288)
    expected = {Architecture.EDS_RRM_OURS: 8, Architecture.EDS: 7,
                Architecture.ED: 1}
    for arch, n in expected.items():
        model = SegmentationModel(arch).eval()
        with torch.no_grad():
            outs = model(x)
        assert len(outs) == n, arch
        for o in outs:
            assert tuple(o.shape) == (1, 1, 288, 288)
            assert o.min().item() > 0.0 and o.max().item() < 1.0
        del model, outs
    _report("criterion 4: output shape invariants")


def test_criterion_05_zero_residual_identity():
    """Zeroed refinement branch reproduces sigmoid(coarse) bit-exactly."""
    torch.manual_seed(105)
    coarse = torch.randn(1, 1, 64, 64) * 4
    for variant in RRMVariant:
        module = build_refinement_module(variant).eval()
        zero_residual(module)
        with torch.no_grad():
            refined = forward_refine(module, coarse)
        assert torch.equal(refined, torch.sigmoid(coarse)), variant
    _report("criterion 5: zero-residual identity")


def test_criterion_06_metric_oracle_equivalence():
    """All five measures match brute-force oracles on every 3x3 binary GT
    (both classes present) x a 20-map pseudo-random prediction suite, and
    hit their ideal values on S = G."""
    rng = np.random.default_rng(106)
    preds = [rng.uniform(0, 1, (3, 3)) for _ in range(20)]
    checked = 0
    for bits in itertools.product((0.0, 1.0), repeat=9):
        g = np.array(bits).reshape(3, 3)
        if g.sum() in (0, 9):
            continue  # both classes must be present
        for s in preds:
            assert abs(mae(s, g) - oracles.oracle_mae(s, g)) < 1e-9
            assert abs(weighted_fbeta(s, g)
                       - oracles.oracle_weighted_fbeta(s, g)) < 1e-9
            assert abs(relaxed_boundary_fbeta(s, g)
                       - oracles.oracle_boundary_fbeta(s, g)) < 1e-9
            assert abs(s_measure(s, g) - oracles.oracle_s_measure(s, g)) < 1e-9
            assert abs(e_measure_mean(s, g) - oracles.oracle_e_measure(s, g)) < 1e-9
        ideal = evaluate_pair(g, g)
        assert ideal.fw_beta == 1.0 and ideal.fb_beta == 1.0 and ideal.mae == 0.0
        assert abs(ideal.s_alpha - 1.0) < 1e-12 and abs(ideal.e_phi - 1.0) < 1e-12
        checked += 1
    assert checked == 510
    _report("criterion 6: metric oracle equivalence")


@pytest.mark.slow
def test_criterion_07_single_pair_overfit():
    """From-scratch 128x128 fit with the three-term loss reaches MAE < 0.02
    and weighted F > 0.95 within 2000 iterations; smoothed loss trend is
    non-increasing."""
    image, mask = blob_pair(256, 256, seed=0)
    msk_t = torch.from_numpy(mask.astype(np.float32))[None, None]
    gt_small = torch.nn.functional.interpolate(
        msk_t, size=(128, 128), mode="bilinear", align_corners=False)[0, 0].numpy()
    gt_bin = (gt_small >= 0.5).astype(float)

    def reached(current):
        return (mae(current, gt_bin) < 0.02
                and weighted_fbeta(current, gt_bin) > 0.95)

    result = overfit_single_pair(image, mask, "bsi", iterations=2000,
                                 resolution=128, check_every=25,
                                 stop_check=reached, seed=0)
    assert result.iterations_run <= 2000
    assert result.final_report.mae < 0.02, result.final_report
    assert result.final_report.fw_beta > 0.95, result.final_report
    trend = smoothed(result.loss_trace, window=50)
    increases = np.diff(trend)
    assert increases.max(initial=0.0) <= 1e-3, increases.max()
    _report(f"criterion 7: single-pair overfit ({result.iterations_run} iterations)")


def test_criterion_08_seed_determinism(tmp_path):
    """Fixed seed gives identical first-step loss and identical crop offsets."""
    corpus = [blob_sample(seed=i, identifier=f"b{i}") for i in range(3)]
    cfg = TrainConfig(architecture=Architecture.EDS_RRM_OURS, loss="bsi",
                      batch_size=2, max_iterations=1, seed=11,
                      resize=72, crop=64)
    r1 = train(cfg, corpus, tmp_path / "a", model_config=TINY_CONFIG)
    r2 = train(cfg, corpus, tmp_path / "b", model_config=TINY_CONFIG)
    assert r1.final_total == r2.final_total

    a = sample_batch(corpus, cfg, step=0)
    b = sample_batch(corpus, cfg, step=0)
    assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1]) and a[2] == b[2]
    _report("criterion 8: seed determinism")


def test_criterion_09_service_round_trip(tmp_path):
    """PNG in, RGBA PNG out with matching dimensions; oversized payloads are
    rejected before any inference; duplicate requests are byte-identical."""
    torch.manual_seed(109)
    model = SegmentationModel(Architecture.EDS_RRM_OURS, TINY_CONFIG)
    ckpt = tmp_path / "model.pt"
    checkpoints.save_checkpoint(ckpt, model, step=0)

    image, _ = blob_pair(52, 44, seed=9)
    buf = io.BytesIO()
    PILImage.fromarray(np.rint(image * 255).astype(np.uint8)).save(buf, format="PNG")
    data = buf.getvalue()

    client = TestClient(create_app(ServiceConfig(
        model_path=ckpt, storage_root=tmp_path / "storage", resize=64)))
    resp = client.post("/v1/remove", files={"image": ("in.png", data, "image/png")})
    assert resp.status_code == 200
    with PILImage.open(io.BytesIO(resp.content)) as out:
        assert out.mode == "RGBA" and out.size == (44, 52)

    # oversized payload: the replica pool is instrumented to fail loudly if
    # any inference runs, so a clean 413 proves validation happened first
    from boundaryseg.service import ModelPool
    original_run = ModelPool.run

    def _explode(self, fn):
        raise AssertionError("inference ran for an oversized payload")

    ModelPool.run = _explode
    try:
        limited = TestClient(create_app(ServiceConfig(
            model_path=ckpt, storage_root=tmp_path / "s2",
            byte_limit=256, resize=64)))
        resp = limited.post("/v1/remove",
                            files={"image": ("in.png", data, "image/png")})
    finally:
        ModelPool.run = original_run
    assert resp.status_code == 413
    assert resp.json()["error"]["code"] == "payload_too_large"

    import concurrent.futures
    with concurrent.futures.ThreadPoolExecutor(4) as pool:
        responses = list(pool.map(
            lambda _: client.post("/v1/remove",
                                  files={"image": ("in.png", data, "image/png")}),
            range(4)))
    assert all(r.status_code == 200 for r in responses)
    assert len({r.content for r in responses}) == 1
    _report("criterion 9: service round trip")


def test_criterion_10_external_weights_benchmark():
    """Full-scale external weights on the 1000-image benchmark reproduce the
    published weighted F and MAE within 0.01. Requires BOUNDARYSEG_WEIGHTS,
    BOUNDARYSEG_BENCH_IMAGES, and BOUNDARYSEG_BENCH_MASKS."""
    weights = os.environ.get("BOUNDARYSEG_WEIGHTS")
    images = os.environ.get("BOUNDARYSEG_BENCH_IMAGES")
    masks = os.environ.get("BOUNDARYSEG_BENCH_MASKS")
    if not (weights and Path(weights).exists() and images and masks):
        pytest.skip("full-scale weights/benchmark not supplied")

    from boundaryseg.data import DatasetSpec, eval_transform, scan_pairs

    model, _ = checkpoints.restore_model(Path(weights))
    model.eval()
    spec = DatasetSpec(image_dir=Path(images), mask_dir=Path(masks), split="test")
    fw_vals, mae_vals = [], []
    for stem, img_path, msk_path in scan_pairs(spec):
        image = core.load_image(img_path)
        gt = core.load_mask(msk_path)
        inp, restore = eval_transform(image)
        with torch.no_grad():
            prob = restore(model.predict(inp.unsqueeze(0)))
        gt_bin = (gt >= 0.5).astype(float)
        fw_vals.append(weighted_fbeta(prob, gt_bin))
        mae_vals.append(mae(prob, gt))
    fw = float(np.nanmean(fw_vals))
    err = float(np.mean(mae_vals))
    assert abs(fw - 0.912) <= 0.01, fw
    assert abs(err - 0.034) <= 0.01, err
    _report("criterion 10: external weights benchmark")
