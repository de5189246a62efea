"""Checkpoint archive plus sidecar manifest.

The manifest is a plain-text portability contract: a config hash line
followed by one "name shape" line per parameter and buffer. Loading
verifies the manifest against the target model and reports every
mismatching name.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import dataclasses

import torch

from .model import Architecture, SegmentationModel
from .prednet import PredNetConfig

MANIFEST_SUFFIX = ".manifest.txt"


class ManifestMismatchError(RuntimeError):
    pass


def config_hash(architecture: Architecture, extra: dict | None = None) -> str:
    payload = {"architecture": architecture.value, **(extra or {})}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def _manifest_lines(model: SegmentationModel) -> list[str]:
    return [f"{name} {tuple(t.shape)}" for name, t in sorted(model.state_dict().items())]


def save_checkpoint(path: Path, model: SegmentationModel, step: int = 0,
                    optimizer: torch.optim.Optimizer | None = None,
                    rng_state: torch.Tensor | None = None) -> Path:
    """Write the parameter archive and its manifest; returns the archive path."""
    path = Path(path)
    payload = {
        "architecture": model.architecture.value,
        "config": dataclasses.asdict(model.config),
        "step": step,
        "model": model.state_dict(),
    }
    if optimizer is not None:
        payload["optimizer"] = optimizer.state_dict()
    if rng_state is not None:
        payload["rng_state"] = rng_state
    torch.save(payload, path)
    manifest = [f"config_hash {config_hash(model.architecture, dataclasses.asdict(model.config))}"]
    manifest += _manifest_lines(model)
    Path(str(path) + MANIFEST_SUFFIX).write_text("\n".join(manifest) + "\n")
    return path


def manifest_hash(path: Path) -> str:
    """Digest of a checkpoint's manifest file, used as the model checksum."""
    text = Path(str(path) + MANIFEST_SUFFIX).read_text()
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def load_checkpoint(path: Path) -> dict:
    return torch.load(Path(path), map_location="cpu", weights_only=False)


def restore_model(path: Path) -> tuple[SegmentationModel, dict]:
    """Build the architecture recorded in the checkpoint and load its
    parameters, verifying shapes against the manifest contract."""
    payload = load_checkpoint(path)
    raw = payload.get("config")
    config = PredNetConfig(**{k: tuple(v) if isinstance(v, list) else v
                              for k, v in raw.items()}) if raw else PredNetConfig()
    model = SegmentationModel(Architecture(payload["architecture"]), config=config)
    own = model.state_dict()
    saved = payload["model"]
    problems = []
    for name, tensor in saved.items():
        if name not in own:
            problems.append(f"unexpected parameter {name}")
        elif tuple(own[name].shape) != tuple(tensor.shape):
            problems.append(
                f"{name}: checkpoint {tuple(tensor.shape)} vs model {tuple(own[name].shape)}")
    for name in own:
        if name not in saved:
            problems.append(f"missing parameter {name}")
    if problems:
        raise ManifestMismatchError(
            "checkpoint does not match the built architecture:\n  " + "\n  ".join(problems))
    model.load_state_dict(saved)
    return model, payload
