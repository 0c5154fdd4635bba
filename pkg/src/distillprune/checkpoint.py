"""Self-describing checkpoint archives: spec + parameters + masks + epoch."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn

from .errors import StructureError
from .masking import MaskSet
from .models import ModelSpec, build_model

CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class CheckpointBundle:
    spec: ModelSpec
    model: nn.Module
    masks: Optional[MaskSet]
    epoch: int
    seed: int


def save_checkpoint(
    path,
    model: nn.Module,
    masks: Optional[MaskSet],
    epoch: int,
    seed: int,
    state_dict: Optional[dict] = None,
) -> None:
    torch.save(
        {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "model_spec": model.spec.to_dict(),
            "state_dict": state_dict if state_dict is not None else model.state_dict(),
            "masks": masks.to_dict() if masks is not None else None,
            "epoch": epoch,
            "seed": seed,
        },
        path,
    )


def load_checkpoint(path) -> CheckpointBundle:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise StructureError(f"unsupported checkpoint format version {version}")
    spec = ModelSpec.from_dict(payload["model_spec"])
    model = build_model(spec, payload["seed"])
    model.load_state_dict(payload["state_dict"])
    masks = MaskSet.from_dict(payload["masks"]) if payload["masks"] is not None else None
    return CheckpointBundle(
        spec=spec, model=model, masks=masks, epoch=payload["epoch"], seed=payload["seed"]
    )
