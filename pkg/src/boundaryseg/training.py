"""Training loop, ablation grid, and the single-pair overfit experiment.

Sampling is stateless: batch indices and crop offsets for step k are drawn
from a generator seeded by (seed, k), so a fixed seed gives bit-identical
batches, resuming from a checkpoint replays the exact schedule, and two
runs share their first-step loss.
"""

from __future__ import annotations

import dataclasses
import math
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .checkpoints import restore_model, save_checkpoint
from .core import Sample
from .data import (DatasetSpec, TRAIN_CROP, TRAIN_RESIZE, augment_hflip,
                   eval_transform, load_sample, scan_pairs, train_transform)
from .losses import LOSS_VARIANTS, LossConfig, total_loss
from .metrics import evaluate_pair
from .model import Architecture, SegmentationModel
from .prednet import PredNetConfig

ADAM_LR = 1e-4
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
ADAM_WEIGHT_DECAY = 0.0


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    architecture: Architecture = Architecture.EDS_RRM_OURS
    loss: str = "bsi"
    batch_size: int = 8
    max_iterations: int = 400_000
    seed: int = 0
    checkpoint_every: int = 1000
    resize: int = TRAIN_RESIZE
    crop: int = TRAIN_CROP
    augment: bool = True
    lr: float = ADAM_LR

    def __post_init__(self):
        if not isinstance(self.architecture, Architecture):
            object.__setattr__(self, "architecture", Architecture(self.architecture))
        if self.loss not in LOSS_VARIANTS:
            raise ValueError(f"unknown loss variant {self.loss!r}")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")

    @classmethod
    def from_file(cls, path: Path) -> tuple["TrainConfig", dict[str, str]]:
        """Parse a flat key=value run config. Returns the config and the raw
        key map (which also carries dataset paths and the output directory)."""
        raw: dict[str, str] = {}
        for line in Path(path).read_text().splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"malformed config line: {line!r}")
            raw[key.strip()] = value.strip()
        kwargs = {}
        for field in dataclasses.fields(cls):
            if field.name not in raw:
                continue
            value = raw[field.name]
            if field.name == "architecture":
                kwargs[field.name] = Architecture(value)
            elif field.type == "bool" or field.name == "augment":
                kwargs[field.name] = value.lower() in ("1", "true", "yes")
            elif field.name == "loss":
                kwargs[field.name] = value
            elif field.name == "lr":
                kwargs[field.name] = float(value)
            else:
                kwargs[field.name] = int(value)
        return cls(**kwargs), raw


ABLATION_ROWS = {
    "unet+b": (Architecture.UNET_BASELINE, "b"),
    "ed+b": (Architecture.ED, "b"),
    "eds+b": (Architecture.EDS, "b"),
    "eds+rrm_lc+b": (Architecture.EDS_RRM_LC, "b"),
    "eds+rrm_ms+b": (Architecture.EDS_RRM_MS, "b"),
    "eds+rrm_ours+b": (Architecture.EDS_RRM_OURS, "b"),
    "eds+rrm_ours+s": (Architecture.EDS_RRM_OURS, "s"),
    "eds+rrm_ours+i": (Architecture.EDS_RRM_OURS, "i"),
    "eds+rrm_ours+bs": (Architecture.EDS_RRM_OURS, "bs"),
    "eds+rrm_ours+bi": (Architecture.EDS_RRM_OURS, "bi"),
    "eds+rrm_ours+si": (Architecture.EDS_RRM_OURS, "si"),
    "eds+rrm_ours+bsi": (Architecture.EDS_RRM_OURS, "bsi"),
}


def build_ablation_config(row_name: str, **overrides) -> TrainConfig:
    """Config for one row of the architecture/loss ablation grid."""
    key = row_name.strip().lower().replace(" ", "")
    if key not in ABLATION_ROWS:
        raise ValueError(
            f"unknown ablation row {row_name!r}; valid rows: {sorted(ABLATION_ROWS)}")
    arch, loss = ABLATION_ROWS[key]
    return TrainConfig(architecture=arch, loss=loss, **overrides)


def step_generator(seed: int, step: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(seed * 1_000_003 + step)
    return g


def sample_batch(samples: Sequence[Sample], config: TrainConfig,
                 step: int) -> tuple[torch.Tensor, torch.Tensor, list[str]]:
    """Deterministically draw and transform one batch for the given step."""
    g = step_generator(config.seed, step)
    idx = torch.randint(len(samples), (config.batch_size,), generator=g)
    images, masks, names = [], [], []
    for i in idx.tolist():
        img, msk = train_transform(samples[i], g, resize=config.resize,
                                   crop=config.crop)
        images.append(img)
        masks.append(msk)
        names.append(samples[i].identifier)
    return torch.stack(images), torch.stack(masks), names


def _log_line(step: int, lr: float, breakdown) -> str:
    bce = sum(r.bce for r in breakdown.per_output)
    ssim = sum(r.ssim for r in breakdown.per_output)
    iou = sum(r.iou for r in breakdown.per_output)
    return (f"step={step} lr={lr:.6g} bce={bce:.6f} ssim={ssim:.6f} "
            f"iou={iou:.6f} total={breakdown.total:.6f}")


@dataclasses.dataclass
class TrainResult:
    checkpoint_path: Path
    log_path: Path
    final_step: int
    final_total: float


def load_corpus(spec: DatasetSpec, augment: bool) -> list[Sample]:
    samples = [load_sample(*triple) for triple in scan_pairs(spec)]
    if not samples:
        raise ValueError(f"no samples found under {spec.image_dir}")
    if augment and spec.split == "train":
        samples = augment_hflip(samples)
    return samples


def train(config: TrainConfig, dataset, out_dir: Path,
          resume_from: Optional[Path] = None,
          model_config: Optional[PredNetConfig] = None) -> TrainResult:
    """Run the deeply supervised training loop.

    `dataset` is a DatasetSpec or a pre-loaded list of Samples. Writes one
    metrics-log line per step and a checkpoint (with optimizer state) at the
    configured cadence plus at the end. `model_config` overrides the network
    widths for a fresh run; resumed runs take it from the checkpoint.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    samples = (load_corpus(dataset, config.augment)
               if isinstance(dataset, DatasetSpec) else list(dataset))
    if not samples:
        raise ValueError("empty training corpus")

    start_step = 0
    if resume_from is not None:
        model, payload = restore_model(resume_from)
        start_step = payload["step"]
        optimizer = _make_optimizer(model, config)
        optimizer.load_state_dict(payload["optimizer"])
    else:
        torch.manual_seed(config.seed)
        model = SegmentationModel(config.architecture,
                                  model_config or PredNetConfig())
        optimizer = _make_optimizer(model, config)

    loss_config = LossConfig.from_variant(config.loss, n_outputs=model.num_outputs)
    log_path = out_dir / "metrics.log"
    ckpt_path = out_dir / "checkpoint.pt"
    model.train()

    final_total = math.nan
    with open(log_path, "a") as log:
        for step in range(start_step, config.max_iterations):
            images, masks, names = sample_batch(samples, config, step)
            outputs = model(images)
            outputs = [o.squeeze(1) for o in outputs]
            try:
                loss, breakdown = total_loss(outputs, masks, loss_config)
            except FloatingPointError:
                raise FloatingPointError(
                    f"non-finite loss at step {step}; batch: {', '.join(names)}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            log.write(_log_line(step, config.lr, breakdown) + "\n")
            final_total = breakdown.total
            if (step + 1) % config.checkpoint_every == 0:
                save_checkpoint(ckpt_path, model, step=step + 1, optimizer=optimizer)

    save_checkpoint(ckpt_path, model, step=config.max_iterations, optimizer=optimizer)
    return TrainResult(checkpoint_path=ckpt_path, log_path=log_path,
                       final_step=config.max_iterations, final_total=final_total)


def _make_optimizer(model, config: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=config.lr, betas=ADAM_BETAS,
                            eps=ADAM_EPS, weight_decay=ADAM_WEIGHT_DECAY)


@dataclasses.dataclass
class OverfitResult:
    snapshots: list[tuple[int, np.ndarray]]
    loss_trace: list[float]
    final_map: np.ndarray
    final_report: "object"
    iterations_run: int


def overfit_single_pair(image: np.ndarray, mask: np.ndarray, loss_variant: str,
                        iterations: int, resolution: int = 128,
                        snapshot_every: int = 250, seed: int = 0,
                        check_every: int = 25,
                        stop_check: Optional[Callable[[np.ndarray], bool]] = None,
                        model_config: Optional[PredNetConfig] = None,
                        ) -> OverfitResult:
    """Fit the full predict-refine model from scratch to one image/mask pair
    and snapshot the refined output on a fixed schedule.

    `stop_check` receives the current refined map (at training resolution,
    against the resized mask) every `check_every` steps and may end the run
    early once its target is met.
    """
    if resolution % 32:
        raise ValueError("resolution must be divisible by 32")
    torch.manual_seed(seed)
    model = SegmentationModel(Architecture.EDS_RRM_OURS,
                              model_config or PredNetConfig())
    optimizer = _make_optimizer(model, TrainConfig(max_iterations=iterations))
    loss_config = LossConfig.from_variant(loss_variant, n_outputs=model.num_outputs)

    img_t, _ = eval_transform(image, resize=resolution)
    msk_t = torch.from_numpy(np.asarray(mask, dtype=np.float32))[None, None]
    msk_t = torch.nn.functional.interpolate(
        msk_t, size=(resolution, resolution), mode="bilinear",
        align_corners=False)[0].clamp(0.0, 1.0)
    batch = img_t.unsqueeze(0)
    target = msk_t

    def current_map() -> np.ndarray:
        model.eval()
        with torch.no_grad():
            out = model(batch)[0][0, 0].numpy().astype(np.float64)
        model.train()
        return out

    snapshots = [(0, current_map())]
    loss_trace: list[float] = []
    model.train()
    steps_run = 0
    for step in range(1, iterations + 1):
        outputs = [o.squeeze(1) for o in model(batch)]
        loss, breakdown = total_loss(outputs, target, loss_config)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        loss_trace.append(breakdown.total)
        steps_run = step
        if step % snapshot_every == 0 or step == iterations:
            snapshots.append((step, current_map()))
        if stop_check is not None and step % check_every == 0:
            if stop_check(current_map()):
                snapshots.append((step, current_map()))
                break

    final_map = current_map()
    gt = (target[0].numpy() >= 0.5).astype(np.float64)
    report = evaluate_pair(final_map, gt)
    return OverfitResult(snapshots=snapshots, loss_trace=loss_trace,
                         final_map=final_map, final_report=report,
                         iterations_run=steps_run)


def smoothed(values: Sequence[float], window: int = 50) -> np.ndarray:
    """Trailing window average used for the loss-trend check."""
    arr = np.asarray(values, dtype=np.float64)
    if len(arr) < window:
        return arr.copy()
    kernel = np.ones(window) / window
    return np.convolve(arr, kernel, mode="valid")
