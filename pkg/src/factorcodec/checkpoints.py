"""Versioned checkpoints with content hashes.

A checkpoint is a single torch.save payload: format version, a `kind` tag
(stage1 / stage2 / lm), the model config as plain dicts, model and
optimizer state, and the step counter. Loading validates version and kind
so a stage-2 file can never silently deserialize into a stage-1 model.
"""

from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Any

import numpy as np
import torch

CHECKPOINT_VERSION = 1


def state_hash(state_dict: dict[str, torch.Tensor]) -> str:
    """sha256 over sorted parameter names and raw tensor bytes."""
    h = hashlib.sha256()
    for key in sorted(state_dict):
        value = state_dict[key]
        h.update(key.encode())
        if isinstance(value, torch.Tensor):
            h.update(str(value.dtype).encode())
            h.update(np.ascontiguousarray(value.detach().cpu().numpy()).tobytes())
        else:
            h.update(repr(value).encode())
    return h.hexdigest()


def save_checkpoint(
    path: str | Path,
    *,
    kind: str,
    config: dict[str, Any],
    model: torch.nn.Module,
    optimizer: torch.optim.Optimizer | None = None,
    step: int = 0,
) -> str:
    """Write a checkpoint and return the model-state hash."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "config": config,
        "model_state": model.state_dict(),
        "optimizer_state": optimizer.state_dict() if optimizer is not None else None,
        "step": step,
    }
    torch.save(payload, path)
    return state_hash(payload["model_state"])


def load_checkpoint(path: str | Path, expected_kind: str) -> dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(
            f"{path}: checkpoint format version {version} does not match {CHECKPOINT_VERSION}"
        )
    if payload.get("kind") != expected_kind:
        raise ValueError(
            f"{path}: checkpoint kind {payload.get('kind')!r}, expected {expected_kind!r}"
        )
    return payload
