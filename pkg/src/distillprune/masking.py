"""Structured channel masks: application, bookkeeping, and size accounting."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import torch
import torch.nn as nn

from .errors import StructureError

Tensor = torch.Tensor

MASK_FORMAT_VERSION = 1


@dataclass
class MaskSet:
    """Per-layer boolean channel masks (True = channel survives).

    Masks are monotone across pruning rounds: once a channel is False it
    stays False. ``cumulative_sparsity`` is the fraction of original channels
    removed, aggregated over all prunable layers.
    """

    masks: Dict[str, Tensor]
    round: int = 0
    saturated: Tuple[str, ...] = ()
    cumulative_sparsity: float = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.masks = {k: v.to(torch.bool) for k, v in self.masks.items()}
        if self.cumulative_sparsity is None:
            self.cumulative_sparsity = self.recompute_sparsity()

    def recompute_sparsity(self) -> float:
        total = sum(int(m.numel()) for m in self.masks.values())
        surviving = sum(int(m.sum()) for m in self.masks.values())
        return 1.0 - surviving / total if total else 0.0

    def surviving(self, layer_id: str) -> int:
        return int(self.masks[layer_id].sum())

    def clone(self) -> "MaskSet":
        return MaskSet(
            masks={k: v.clone() for k, v in self.masks.items()},
            round=self.round,
            saturated=self.saturated,
            cumulative_sparsity=self.cumulative_sparsity,
        )

    def to_dict(self) -> dict:
        return {
            "format_version": MASK_FORMAT_VERSION,
            "round": self.round,
            "cumulative_sparsity": self.cumulative_sparsity,
            "saturated": list(self.saturated),
            "masks": {k: v.to(torch.int8).tolist() for k, v in self.masks.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MaskSet":
        if d.get("format_version") != MASK_FORMAT_VERSION:
            raise StructureError(f"unsupported mask format version {d.get('format_version')}")
        return cls(
            masks={k: torch.tensor(v, dtype=torch.bool) for k, v in d["masks"].items()},
            round=d["round"],
            saturated=tuple(d.get("saturated", ())),
            cumulative_sparsity=d["cumulative_sparsity"],
        )

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f)

    @classmethod
    def load(cls, path) -> "MaskSet":
        with open(path) as f:
            return cls.from_dict(json.load(f))


@dataclass(frozen=True)
class SizeReport:
    total_params: int
    surviving_params: int

    @property
    def pruned_params(self) -> int:
        return self.total_params - self.surviving_params

    @property
    def reduction_fraction(self) -> float:
        return 1.0 - self.surviving_params / self.total_params


def full_mask(model: nn.Module) -> MaskSet:
    """All-ones mask over every prunable layer of the model."""
    masks = {
        gid: torch.ones(grp.size, dtype=torch.bool)
        for gid, grp in model.channel_groups().items()
    }
    return MaskSet(masks=masks, round=0)


def _check_compatible(model: nn.Module, masks: MaskSet) -> None:
    groups = model.channel_groups()
    if set(groups) != set(masks.masks):
        missing = set(groups) - set(masks.masks)
        extra = set(masks.masks) - set(groups)
        raise StructureError(
            f"mask/model mismatch: missing layers {sorted(missing)}, unknown layers {sorted(extra)}"
        )
    for gid, grp in groups.items():
        if masks.masks[gid].numel() != grp.size:
            raise StructureError(
                f"mask length {masks.masks[gid].numel()} != {grp.size} channels for layer {gid}"
            )


@torch.no_grad()
def apply_mask(model: nn.Module, masks: MaskSet) -> None:
    """Zero every weight produced by or feeding a masked-off channel.

    Batch-norm scale/shift of masked channels is zeroed too, so the channel
    emits exactly zero on any input. Pair with gradient masking (or the
    training loop's masked step) to keep the zeros through training.
    """
    _check_compatible(model, masks)
    for gid, grp in model.channel_groups().items():
        dead = ~masks.masks[gid]
        if not bool(dead.any()):
            continue
        for p in grp.out_params:
            p[dead] = 0.0
        for p in grp.in_params:
            p[:, dead] = 0.0


@torch.no_grad()
def apply_grad_mask(model: nn.Module, masks: MaskSet) -> None:
    """Zero gradients of masked weights so they receive no effective update."""
    _check_compatible(model, masks)
    for gid, grp in model.channel_groups().items():
        dead = ~masks.masks[gid]
        if not bool(dead.any()):
            continue
        for p in grp.out_params:
            if p.grad is not None:
                p.grad[dead] = 0.0
        for p in grp.in_params:
            if p.grad is not None:
                p.grad[:, dead] = 0.0


def effective_size(model: nn.Module, masks: MaskSet) -> SizeReport:
    """Count parameters that remain live under the masks.

    A weight survives only if both its input and output channels survive;
    per-channel parameters (biases, batch-norm scale/shift) survive with
    their channel. Distillation scaffolding is not part of the model and is
    never counted.
    """
    _check_compatible(model, masks)
    axes = model.param_mask_axes()
    total = 0
    surviving = 0
    for name, p in model.named_parameters():
        total += p.numel()
        out_gid, in_gid = axes[name]
        out_alive = int(masks.masks[out_gid].sum()) if out_gid else p.shape[0]
        if p.dim() >= 2:
            in_alive = int(masks.masks[in_gid].sum()) if in_gid else p.shape[1]
            rest = p.numel() // (p.shape[0] * p.shape[1])
            surviving += out_alive * in_alive * rest
        else:
            surviving += out_alive
    return SizeReport(total_params=total, surviving_params=surviving)
