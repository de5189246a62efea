"""Command-line entry points: train, predict, evaluate, overfit-demo,
export, serve.

The checkpoint/cache root defaults to the BOUNDARYSEG_ROOT environment
variable (falling back to the current directory)."""

from __future__ import annotations

import os
import sys
from pathlib import Path

import click
import numpy as np
import torch

from . import checkpoints, core, data, metrics, training
from .model import Architecture, SegmentationModel
from .postprocess import postprocess_mask


def _root() -> Path:
    return Path(os.environ.get("BOUNDARYSEG_ROOT", "."))


@click.group()
def main():
    """Boundary-aware segmentation toolkit."""


@main.command()
@click.option("--config", "config_path", type=click.Path(path_type=Path),
              help="flat key=value run config")
@click.option("--row", "row_name", default=None,
              help="ablation row shortcut, e.g. eds+rrm_ours+bsi")
@click.option("--seed", type=int, default=None)
def train(config_path, row_name, seed):
    """Run the training loop and print the final checkpoint path."""
    try:
        if config_path is not None:
            config, raw = training.TrainConfig.from_file(config_path)
        elif row_name is not None:
            config, raw = training.build_ablation_config(row_name), {}
        else:
            raise click.UsageError("provide --config or --row")
        if row_name is not None and config_path is not None:
            arch, loss = training.ABLATION_ROWS[row_name.strip().lower().replace(" ", "")]
            config = training.TrainConfig(
                **{**{f.name: getattr(config, f.name)
                      for f in config.__dataclass_fields__.values()},
                   "architecture": arch, "loss": loss})
        if seed is not None:
            config = training.TrainConfig(
                **{**{f.name: getattr(config, f.name)
                      for f in config.__dataclass_fields__.values()}, "seed": seed})
        image_dir = raw.get("image_dir") if config_path else None
        mask_dir = raw.get("mask_dir") if config_path else None
        if not image_dir or not mask_dir:
            raise click.UsageError("config must set image_dir and mask_dir")
        out_dir = Path(raw.get("out_dir", _root() / "runs" / "train"))
        spec = data.DatasetSpec(image_dir=Path(image_dir), mask_dir=Path(mask_dir))
        result = training.train(config, spec, out_dir)
    except (FileNotFoundError, ValueError, click.UsageError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)
    click.echo(str(result.checkpoint_path))


def _iter_inputs(input_path: Path):
    if input_path.is_dir():
        return sorted(p for p in input_path.iterdir()
                      if p.suffix.lower() in data.IMAGE_SUFFIXES)
    return [input_path]


@main.command()
@click.option("--checkpoint", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--input", "input_path", type=click.Path(exists=True, path_type=Path),
              required=True, help="image file or directory")
@click.option("--out", "out_dir", type=click.Path(path_type=Path), required=True)
@click.option("--emit", multiple=True, default=("probmap",),
              type=click.Choice(["probmap", "cutout", "side_outputs"]))
@click.option("--postprocess/--no-postprocess", default=False)
def predict(checkpoint, input_path, out_dir, emit, postprocess):
    """Predict probability maps (and optional cutouts) at original size."""
    model, _ = checkpoints.restore_model(checkpoint)
    model.eval()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for path in _iter_inputs(input_path):
        image = core.load_image(path)
        inp, restore = data.eval_transform(image)
        with torch.no_grad():
            outputs = model(inp.unsqueeze(0))
        prob = restore(outputs[0])
        if postprocess:
            prob = postprocess_mask(prob)
        stem = path.stem
        if "probmap" in emit:
            core.save_mask(prob, out_dir / f"{stem}.png")
        if "cutout" in emit:
            core.save_cutout(image, prob, out_dir / f"{stem}_cutout.png")
        if "side_outputs" in emit:
            sheet = np.concatenate(
                [restore(o) for o in outputs], axis=1)
            core.save_mask(sheet, out_dir / f"{stem}_sides.png")
    click.echo(str(out_dir))


def _format_report_row(name: str, n: int, report: core.MetricReport) -> str:
    return "\t".join([name, str(n), f"{report.fw_beta:.4f}", f"{report.fb_beta:.4f}",
                      f"{report.mae:.4f}", f"{report.s_alpha:.4f}", f"{report.e_phi:.4f}"])


@main.command()
@click.option("--pred", "pred_dir", type=click.Path(exists=True, path_type=Path),
              required=True)
@click.option("--gt", "gt_dir", type=click.Path(exists=True, path_type=Path),
              required=True)
@click.option("--report", "report_path", type=click.Path(path_type=Path), required=True)
@click.option("--attributes", type=click.Path(exists=True, path_type=Path),
              help="lines of '<stem> <attribute>' for per-attribute sections")
@click.option("--name", "dataset_name", default="dataset")
def evaluate(pred_dir, gt_dir, report_path, attributes, dataset_name):
    """Write the five-measure table for matching prediction/GT stems."""
    spec = data.DatasetSpec(image_dir=pred_dir, mask_dir=gt_dir, split="test")
    try:
        triples = data.scan_pairs(spec)
    except data.PairingError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)
    stems = [t[0] for t in triples]
    pairs = [(core.load_mask(p), core.load_mask(g)) for _, p, g in triples]
    grouping = None
    if attributes:
        grouping = {}
        attr_of = dict(line.split() for line in Path(attributes).read_text().split("\n")
                       if line.strip())
        for i, stem in enumerate(stems):
            grouping.setdefault(attr_of.get(stem, "unlabeled"), []).append(i)
    report = metrics.evaluate_dataset(pairs, grouping=grouping)
    lines = ["\t".join(["dataset", "n", "fw_beta", "fb_beta", "mae", "s_alpha", "e_phi"]),
             _format_report_row(dataset_name, report.n, report.overall)]
    for label, group_report in report.groups.items():
        n = len(grouping.get(label, [])) if grouping else 0
        lines.append(_format_report_row(f"{dataset_name}:{label}", n, group_report))
    Path(report_path).write_text("\n".join(lines) + "\n")
    click.echo(str(report_path))


@main.command("overfit-demo")
@click.option("--image", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--mask", "mask_path", type=click.Path(path_type=Path), required=True)
@click.option("--loss", "loss_variant", default="bsi",
              type=click.Choice(sorted(training.LOSS_VARIANTS)))
@click.option("--all-losses", is_flag=True, help="run every loss variant")
@click.option("--iterations", type=int, default=2000)
@click.option("--resolution", type=int, default=128)
@click.option("--out", "out_dir", type=click.Path(path_type=Path), required=True)
@click.option("--seed", type=int, default=0)
def overfit_demo(image, mask_path, loss_variant, all_losses, iterations,
                 resolution, out_dir, seed):
    """Fit a single pair and emit a snapshot grid plus a metrics trace."""
    if not Path(mask_path).exists():
        click.echo(f"error: mask not found: {mask_path}", err=True)
        sys.exit(2)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    img = core.load_image(image)
    msk = core.load_mask(mask_path)
    variants = sorted(training.LOSS_VARIANTS) if all_losses else [loss_variant]
    for variant in variants:
        result = training.overfit_single_pair(img, msk, variant, iterations,
                                              resolution=resolution, seed=seed)
        grid = np.concatenate([snap for _, snap in result.snapshots], axis=1)
        core.save_mask(np.clip(grid, 0.0, 1.0), out_dir / f"snapshots_{variant}.png")
        trace = [f"iteration={i} total={v:.6f}" for i, v in enumerate(result.loss_trace)]
        trace.append("final " + " ".join(
            f"{k}={v:.4f}" for k, v in result.final_report.as_dict().items()))
        (out_dir / f"trace_{variant}.txt").write_text("\n".join(trace) + "\n")
    click.echo(str(out_dir))


@main.command()
@click.option("--weights", type=click.Path(exists=True, path_type=Path), required=True,
              help="raw state-dict file with parameters matching the architecture")
@click.option("--arch", default="eds_rrm_ours",
              type=click.Choice([a.value for a in Architecture]))
@click.option("--out", "out_path", type=click.Path(path_type=Path), required=True)
def export(weights, arch, out_path):
    """Convert externally trained raw weights into the checkpoint format."""
    state = torch.load(weights, map_location="cpu", weights_only=False)
    if isinstance(state, dict) and "model" in state:
        state = state["model"]
    model = SegmentationModel(Architecture(arch))
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        click.echo(f"error: weights do not match architecture {arch}: {exc}", err=True)
        sys.exit(2)
    checkpoints.save_checkpoint(Path(out_path), model)
    click.echo(str(out_path))


@main.command()
@click.option("--checkpoint", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--storage", type=click.Path(path_type=Path), default=None)
@click.option("--port", type=int, default=8000)
@click.option("--byte-limit", type=int, default=10 * 1024 * 1024)
@click.option("--pool-size", type=int, default=1)
def serve(checkpoint, storage, port, byte_limit, pool_size):
    """Start the background-removal HTTP service."""
    from .service import ServiceConfig, run_service

    storage = Path(storage) if storage else _root() / "storage"
    config = ServiceConfig(model_path=checkpoint, storage_root=storage,
                           byte_limit=byte_limit, pool_size=pool_size)
    run_service(config, port=port)


if __name__ == "__main__":
    main()
