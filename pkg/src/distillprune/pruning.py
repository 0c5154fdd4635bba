"""Channel ranking, monotone mask extraction, and the reinitialization
strategies (carry-forward, lottery-ticket rewind, pre-sparsified student)."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Dict

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, StructureError
from .masking import MaskSet, apply_grad_mask, apply_mask, full_mask
from .models import ModelSpec, WeightSnapshot, build_model, restore_snapshot, snapshot

log = logging.getLogger(__name__)

Tensor = torch.Tensor

STRATEGIES = ("sp-sad", "lth-sad", "ss-sad")


@dataclass(frozen=True)
class PruneConfig:
    rate: float  # fraction of the original channel count removed per round
    every: int  # epochs between prunings
    strategy: str = "lth-sad"
    criterion: str = "filter-l1"
    scope: str = "per-layer"  # 'per-layer' | 'global'

    def validate(self) -> None:
        if not 0.0 < self.rate < 1.0:
            raise ConfigError(f"prune rate must lie in (0, 1), got {self.rate}")
        if self.every < 1:
            raise ConfigError(f"prune interval must be >= 1 epoch, got {self.every}")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")
        if self.criterion != "filter-l1":
            raise ConfigError(f"unknown criterion {self.criterion!r}")
        if self.scope not in ("per-layer", "global"):
            raise ConfigError(f"unknown scope {self.scope!r}")


@torch.no_grad()
def rank_channels(model: nn.Module, masks: MaskSet) -> Dict[str, Tensor]:
    """Saliency scores: L1 norm of each surviving channel's producing filters.

    Channels already pruned score -inf so they can never be re-selected.
    """
    scores: Dict[str, Tensor] = {}
    for gid, grp in model.channel_groups().items():
        s = torch.zeros(grp.size, dtype=torch.float64)
        for p in grp.score_params:
            s += p.detach().abs().sum(dim=tuple(range(1, p.dim()))).to(torch.float64)
        s[~masks.masks[gid]] = float("-inf")
        scores[gid] = s
    return scores


def _removal_order(score: Tensor, alive: Tensor):
    """Surviving channel indices, worst first; ties prune the lower index."""
    idx = [i for i in range(score.numel()) if bool(alive[i])]
    return sorted(idx, key=lambda i: (float(score[i]), i))


def extract_mask(scores: Dict[str, Tensor], masks: MaskSet, cfg: PruneConfig) -> MaskSet:
    """One pruning round: remove floor(rate * original_count) of the
    lowest-scoring surviving channels, never dropping a layer below one
    surviving channel. The result is monotone with respect to ``masks``.
    """
    cfg.validate()
    missing = set(masks.masks) - set(scores)
    if missing:
        raise StructureError(f"scores missing for layers {sorted(missing)}")
    new = {gid: m.clone() for gid, m in masks.masks.items()}
    saturated = set(masks.saturated)

    if cfg.scope == "per-layer":
        for gid, m in new.items():
            want = math.floor(cfg.rate * m.numel())
            alive = int(m.sum())
            take = min(want, alive - 1)
            if take < want:
                saturated.add(gid)
            if take <= 0:
                continue
            for ch in _removal_order(scores[gid], m)[:take]:
                m[ch] = False
    else:
        total = sum(m.numel() for m in new.values())
        want = math.floor(cfg.rate * total)
        pool = []
        for gid, m in new.items():
            for ch in _removal_order(scores[gid], m):
                pool.append((float(scores[gid][ch]), gid, ch))
        pool.sort(key=lambda t: (t[0], t[1], t[2]))
        removed = 0
        for _, gid, ch in pool:
            if removed >= want:
                break
            if int(new[gid].sum()) <= 1:
                saturated.add(gid)
                continue
            new[gid][ch] = False
            removed += 1
        if removed < want:
            saturated.update(new)

    return MaskSet(masks=new, round=masks.round + 1, saturated=tuple(sorted(saturated)))


def reinit_sp(model: nn.Module, prev: WeightSnapshot, masks: MaskSet) -> None:
    """Carry-forward reinit: surviving weights return to their values at the
    previous pruning round; newly masked weights go to zero."""
    if prev.tag != "previous_round":
        raise StructureError(f"expected a previous_round snapshot, got {prev.tag!r}")
    restore_snapshot(model, prev)
    apply_mask(model, masks)


def reinit_lth(model: nn.Module, init: WeightSnapshot, masks: MaskSet) -> None:
    """Lottery-ticket rewind: surviving weights return to their values at
    initialization; masked weights go to zero. Callers must also reset
    optimizer state, a rewound model with stale momentum is incoherent."""
    if init.tag != "init":
        raise StructureError(f"expected an init snapshot, got {init.tag!r}")
    restore_snapshot(model, init)
    apply_mask(model, masks)


def _class_loss(outputs: Tensor, targets: Tensor, task: str) -> Tensor:
    if task == "classification":
        return F.cross_entropy(outputs, targets)
    return F.mse_loss(outputs, targets)


def presparsify_lth(
    spec: ModelSpec,
    data,
    cfg: PruneConfig,
    target_sparsity: float,
    *,
    seed: int = 0,
    lr: float = 0.05,
    momentum: float = 0.9,
    weight_decay: float = 0.0,
    batch_size: int = 64,
):
    """Standalone iterative train-prune-rewind (plain class loss, no
    distillation) until cumulative sparsity reaches the target.

    Returns the rewound sparse student and its masks. If every layer
    saturates before the target, the achieved masks come back with the
    saturation flags set and a warning is logged.
    """
    if not 0.0 < target_sparsity < 1.0:
        raise ConfigError(f"target sparsity must lie in (0, 1), got {target_sparsity}")
    cfg.validate()
    model = build_model(spec, seed)
    init = snapshot(model, "init")
    masks = full_mask(model)
    gen = torch.Generator().manual_seed(seed)

    while masks.cumulative_sparsity < target_sparsity:
        optimizer = torch.optim.SGD(
            model.parameters(), lr=lr, momentum=momentum, weight_decay=weight_decay
        )
        model.train()
        for _ in range(cfg.every):
            for x, y in data.iter_batches(batch_size, shuffle=True, generator=gen):
                optimizer.zero_grad()
                out, _ = model.forward_with_features(x)
                _class_loss(out, y, spec.task).backward()
                apply_grad_mask(model, masks)
                optimizer.step()
                apply_mask(model, masks)
        new_masks = extract_mask(rank_channels(model, masks), masks, cfg)
        if new_masks.cumulative_sparsity <= masks.cumulative_sparsity:
            log.warning(
                "pre-sparsification saturated at %.3f before target %.3f",
                masks.cumulative_sparsity,
                target_sparsity,
            )
            masks = new_masks
            break
        masks = new_masks
        reinit_lth(model, init, masks)

    return model, masks
