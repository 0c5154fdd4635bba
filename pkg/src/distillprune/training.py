"""The epoch loop: distillation training interleaved with periodic pruning,
strategy-specific reinitialization, and winning-ticket selection."""

from __future__ import annotations

import hashlib
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .distill import (
    AttentionHead,
    ProjectionBank,
    attention_loss,
    attention_weights,
    soft_target_loss,
    student_loss,
)
from .errors import ConfigError, NumericError, StructureError
from .masking import MaskSet, apply_grad_mask, apply_mask, full_mask
from .metrics import accuracy, mae, mse
from .models import WeightSnapshot, snapshot
from .pruning import PruneConfig, extract_mask, rank_channels, reinit_lth, reinit_sp

log = logging.getLogger(__name__)

Tensor = torch.Tensor


@dataclass
class EpochRecord:
    epoch: int
    class_loss: float
    attention_loss: float
    soft_loss: float
    total_loss: float
    val_accuracy: Optional[float]
    val_mae: Optional[float]
    val_mse: Optional[float]
    cumulative_sparsity: float
    learning_rate: float
    wall_time: float
    energy_joules: Optional[float] = None

    def primary_metric(self) -> Tuple[str, float]:
        if self.val_accuracy is not None:
            return "accuracy", self.val_accuracy
        return "mse", self.val_mse


@dataclass
class RoundCandidate:
    """Best in-round state, a winning-ticket candidate."""

    round: int
    sparsity: float
    best_metric: Optional[float] = None
    best_epoch: Optional[int] = None
    state: Optional[WeightSnapshot] = None
    masks: Optional[MaskSet] = None


@dataclass
class TrainState:
    epoch: int
    teacher: Optional[nn.Module]
    student: nn.Module
    masks: MaskSet
    snapshots: Dict[str, WeightSnapshot]
    history: List[EpochRecord] = field(default_factory=list)
    rounds: List[RoundCandidate] = field(default_factory=list)
    seed: int = 0
    prune_events: List[int] = field(default_factory=list)
    head: Optional[AttentionHead] = None
    bank: Optional[ProjectionBank] = None


@dataclass(frozen=True)
class WinningTicket:
    round: int
    sparsity: float
    metric: float
    checkpoint_ref: object = None


def lr_schedule(epoch: int, cfg) -> float:
    """Piecewise-constant schedule: the base rate times one decay factor per
    milestone already crossed."""
    if epoch < 0:
        raise ConfigError(f"epoch must be >= 0, got {epoch}")
    milestones = list(cfg.lr_milestones or ())
    if milestones != sorted(milestones):
        raise ConfigError(f"lr milestones must be sorted, got {milestones}")
    crossed = sum(1 for m in milestones if epoch >= m)
    return cfg.lr * cfg.lr_gamma**crossed


def parameter_hash(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


@torch.no_grad()
def evaluate(model: nn.Module, handle, task: str, batch_size: int = 256) -> Dict[str, float]:
    model.eval()
    preds, targets = [], []
    for x, y in handle.iter_batches(batch_size):
        out, _ = model.forward_with_features(x)
        preds.append(out)
        targets.append(y)
    model.train()
    p = torch.cat(preds)
    t = torch.cat(targets)
    if task == "classification":
        return {"accuracy": accuracy(p.argmax(dim=1).numpy(), t.numpy())}
    return {"mae": mae(t.numpy(), p.numpy()), "mse": mse(t.numpy(), p.numpy())}


def _class_loss(outputs: Tensor, targets: Tensor, task: str) -> Tensor:
    if task == "classification":
        return F.cross_entropy(outputs, targets)
    return F.mse_loss(outputs, targets)


def _metric_better(task: str, a: float, b: Optional[float]) -> bool:
    if b is None:
        return True
    return a > b if task == "classification" else a < b


def train(
    cfg,
    teacher: Optional[nn.Module],
    student: nn.Module,
    data,
    *,
    initial_masks: Optional[MaskSet] = None,
    power_sampler=None,
) -> Tuple[TrainState, Optional[WinningTicket]]:
    """Run the full strategy: per epoch, forward both models, combine class,
    attention and soft-target losses, back-propagate with masked gradients,
    and evaluate; every ``prune_every`` epochs extract and apply a new mask
    and reinitialize per the strategy. Returns the final state and the
    winning ticket over all sparsity plateaus.

    ``teacher=None`` (or beta = alpha_kd = 0) degenerates to plain
    supervised training, which is how teachers and no-distillation baselines
    are produced. ``data`` is a (train_handle, val_handle) pair.
    """
    train_handle, val_handle = data
    task = student.spec.task
    prunes = cfg.strategy in ("sp-sad", "lth-sad") and cfg.prune_every is not None
    if prunes:
        prune_cfg = PruneConfig(
            rate=cfg.prune_rate,
            every=cfg.prune_every,
            strategy=cfg.strategy,
            scope=cfg.prune_scope,
        )
        prune_cfg.validate()

    gen = torch.Generator().manual_seed(cfg.seed)
    masks = initial_masks.clone() if initial_masks is not None else full_mask(student)
    apply_mask(student, masks)
    snapshots = {"init": snapshot(student, "init")}

    head = bank = None
    scaffold_params: List[nn.Parameter] = []
    teacher_hash = None
    if teacher is not None:
        teacher.eval()
        for p in teacher.parameters():
            p.requires_grad_(False)
        teacher_hash = parameter_hash(teacher)
        head = AttentionHead.for_models(
            teacher, student, d=cfg.head_dim, seed=cfg.seed, f_q=cfg.f_q, f_k=cfg.f_k
        )
        bank = ProjectionBank.for_models(teacher, student, seed=cfg.seed + 1)
        scaffold_params = list(head.parameters()) + list(bank.parameters())

    def make_optimizer(lr: float) -> torch.optim.Optimizer:
        return torch.optim.SGD(
            list(student.parameters()) + scaffold_params,
            lr=lr,
            momentum=cfg.momentum,
            weight_decay=cfg.weight_decay,
        )

    state = TrainState(
        epoch=0,
        teacher=teacher,
        student=student,
        masks=masks,
        snapshots=snapshots,
        seed=cfg.seed,
        head=head,
        bank=bank,
    )
    state.rounds.append(RoundCandidate(round=0, sparsity=masks.cumulative_sparsity))

    optimizer = make_optimizer(lr_schedule(1, cfg))
    student.train()
    energy_seen = 0.0

    for epoch in range(1, cfg.epochs + 1):
        t0 = time.monotonic()
        lr = lr_schedule(epoch, cfg)
        for group in optimizer.param_groups:
            group["lr"] = lr
        if power_sampler is not None:
            power_sampler.set_phase("train")

        sums = {"class": 0.0, "att": 0.0, "soft": 0.0, "total": 0.0}
        batches = 0
        for x, y in train_handle.iter_batches(cfg.batch_size, shuffle=True, generator=gen):
            optimizer.zero_grad()
            out, s_feats = student.forward_with_features(x)
            cls = _class_loss(out, y, task)
            if teacher is not None:
                with torch.no_grad():
                    t_out, t_feats = teacher.forward_with_features(x)
                alpha = attention_weights(t_feats, s_feats, head)
                att = attention_loss(t_feats, s_feats, alpha, bank)
                soft = (
                    soft_target_loss(t_out, out, cfg.temperature)
                    if task == "classification"
                    else torch.zeros(())
                )
            else:
                att = torch.zeros(())
                soft = torch.zeros(())
            total = student_loss(cls, att, soft, cfg.beta, cfg.alpha_kd)
            if not torch.isfinite(total):
                state.history.append(
                    EpochRecord(
                        epoch,
                        float(cls),
                        float(att),
                        float(soft),
                        float(total),
                        None,
                        None,
                        None,
                        masks.cumulative_sparsity,
                        lr,
                        time.monotonic() - t0,
                    )
                )
                err = NumericError(f"non-finite loss at epoch {epoch}")
                err.state = state
                raise err
            total.backward()
            apply_grad_mask(student, masks)
            optimizer.step()
            apply_mask(student, masks)
            sums["class"] += float(cls.detach())
            sums["att"] += float(att.detach())
            sums["soft"] += float(soft.detach())
            sums["total"] += float(total.detach())
            batches += 1

        if power_sampler is not None:
            power_sampler.set_phase("inference")
        scores = evaluate(student, val_handle, task)
        epoch_energy = None
        if power_sampler is not None:
            from .telemetry import energy_joules

            now = energy_joules(power_sampler.peek())
            epoch_energy = now - energy_seen
            energy_seen = now

        record = EpochRecord(
            epoch=epoch,
            class_loss=sums["class"] / max(batches, 1),
            attention_loss=sums["att"] / max(batches, 1),
            soft_loss=sums["soft"] / max(batches, 1),
            total_loss=sums["total"] / max(batches, 1),
            val_accuracy=scores.get("accuracy"),
            val_mae=scores.get("mae"),
            val_mse=scores.get("mse"),
            cumulative_sparsity=masks.cumulative_sparsity,
            learning_rate=lr,
            wall_time=time.monotonic() - t0,
            energy_joules=epoch_energy,
        )
        state.history.append(record)
        state.epoch = epoch

        cand = state.rounds[-1]
        metric_name, metric_val = record.primary_metric()
        if _metric_better(task, metric_val, cand.best_metric):
            cand.best_metric = metric_val
            cand.best_epoch = epoch
            cand.state = snapshot(student, "previous_round")
            cand.masks = masks.clone()

        target_reached = (
            cfg.prune_target is not None
            and masks.cumulative_sparsity >= cfg.prune_target
        )
        if prunes and epoch % cfg.prune_every == 0 and not target_reached:
            prev = snapshot(student, "previous_round")
            snapshots["previous_round"] = prev
            new_masks = extract_mask(rank_channels(student, masks), masks, prune_cfg)
            if new_masks.cumulative_sparsity <= masks.cumulative_sparsity:
                log.info("pruning event at epoch %d skipped (saturated)", epoch)
                continue
            masks = new_masks
            state.masks = masks
            state.prune_events.append(epoch)
            if cfg.strategy == "sp-sad":
                reinit_sp(student, prev, masks)
            else:
                reinit_lth(student, snapshots["init"], masks)
            optimizer = make_optimizer(lr)
            state.rounds.append(
                RoundCandidate(round=len(state.rounds), sparsity=masks.cumulative_sparsity)
            )
            log.info(
                "epoch %d: pruned to %.1f%% cumulative sparsity (round %d)",
                epoch,
                100 * masks.cumulative_sparsity,
                masks.round,
            )

    if teacher is not None and parameter_hash(teacher) != teacher_hash:
        raise StructureError("teacher parameters changed during student training")

    completed = [c for c in state.rounds if c.best_metric is not None]
    ticket = None
    if completed:
        ticket = select_winning_ticket(state.history, {c.round: c for c in completed})
    return state, ticket


def select_winning_ticket(history: List[EpochRecord], checkpoints: Dict[int, object]) -> WinningTicket:
    """Pick the sparsity plateau with the best post-round evaluation metric
    (highest accuracy, or lowest MSE), breaking ties toward higher sparsity.
    """
    if not history:
        raise ValueError("cannot select a winning ticket from empty history")
    classification = history[0].val_accuracy is not None

    plateaus: List[Tuple[float, float]] = []  # (sparsity, best metric)
    for rec in history:
        name, val = rec.primary_metric()
        if val is None:
            continue
        if plateaus and math.isclose(plateaus[-1][0], rec.cumulative_sparsity):
            best = plateaus[-1][1]
            better = val > best if classification else val < best
            if better:
                plateaus[-1] = (rec.cumulative_sparsity, val)
        else:
            plateaus.append((rec.cumulative_sparsity, val))

    best_idx = 0
    for i, (sparsity, metric) in enumerate(plateaus):
        b_sp, b_m = plateaus[best_idx]
        if classification:
            better = metric > b_m or (metric == b_m and sparsity > b_sp)
        else:
            better = metric < b_m or (metric == b_m and sparsity > b_sp)
        if i > 0 and better:
            best_idx = i
    sparsity, metric = plateaus[best_idx]
    return WinningTicket(
        round=best_idx,
        sparsity=sparsity,
        metric=metric,
        checkpoint_ref=checkpoints.get(best_idx),
    )
