"""Checkpoint bundles: weights, running stats, configs, calibration, RNG state.

Bundles are plain dicts of primitives and tensors so torch.load's default
safe mode can read them. A schema tag guards against silently loading files
written by a different layout.
"""

from __future__ import annotations

from dataclasses import asdict
from pathlib import Path

import torch

from .network import ChromaNet, ChromaNetConfig

SCHEMA = "cofkey.checkpoint.v1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model: ChromaNet, *, train_config: dict | None = None,
                    optimizer_state: dict | None = None, counters: dict | None = None,
                    rng_state: dict | None = None, calibration: dict | None = None) -> None:
    bundle = {
        "schema": SCHEMA,
        "model_config": asdict(model.cfg),
        "model_state": model.state_dict(),
        "train_config": train_config,
        "optimizer_state": optimizer_state,
        "counters": counters or {},
        "rng_state": rng_state,
        "calibration": calibration,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(bundle, path)


def load_checkpoint(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    bundle = torch.load(path, map_location="cpu")
    if not isinstance(bundle, dict) or bundle.get("schema") != SCHEMA:
        raise CheckpointError(
            f"unrecognized checkpoint schema in {path}: expected {SCHEMA!r}, "
            f"got {bundle.get('schema') if isinstance(bundle, dict) else type(bundle)!r}")
    return bundle


def model_from_bundle(bundle: dict) -> ChromaNet:
    cfg_dict = dict(bundle["model_config"])
    for key in ("channels", "time_strides"):
        cfg_dict[key] = tuple(cfg_dict[key])
    model = ChromaNet(ChromaNetConfig(**cfg_dict))
    model.load_state_dict(bundle["model_state"])
    model.eval()
    return model
