"""Attention-guided feature distillation.

The teacher-to-student transfer weights come from a small attention head:
queries are built from batch-averaged, spatially pooled teacher taps, keys
from student taps, and each teacher tap distributes its transfer probability
over student taps via a softmax of bilinear query/key affinities plus a
positional-encoding dot product, scaled by 1/sqrt(d).

The distillation loss then sums, over every (teacher tap, student tap) pair,
the attention-weighted Euclidean distance between channel-pooled,
L2-normalized descriptors, with the student map first projected to the
teacher tap's geometry by a learned 1x1 projection plus bilinear resize.
"""

from __future__ import annotations

import math
from typing import Callable, Dict, List, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, NumericError, StructureError
from .models import FeatureSet

Tensor = torch.Tensor

ACTIVATIONS: Dict[str, Callable[[Tensor], Tensor]] = {
    "identity": lambda x: x,
    "relu": F.relu,
    "tanh": torch.tanh,
}


def gap_hw(f: Tensor) -> Tensor:
    """Global average pooling over the spatial axes: (B,C,H,W) -> (B,C).

    2-axis maps (tabular taps) are already channel vectors and pass through.
    """
    if f.dim() == 4:
        return f.mean(dim=(2, 3))
    if f.dim() == 2:
        return f
    raise StructureError(f"expected a 2- or 4-axis feature map, got {f.dim()} axes")


def channel_pool_norm(f: Tensor) -> Tensor:
    """Channel average pooling followed by per-sample L2 normalization.

    Returns a flattened (B, H*W) spatial descriptor for 4-axis maps. 2-axis
    maps are treated as single-channel spatial patterns and normalized as-is.
    All-zero inputs map to all-zero outputs rather than dividing by zero
    (fully pruned taps are dead, not NaN).
    """
    if f.dim() == 4:
        pooled = f.mean(dim=1).flatten(1)
    elif f.dim() == 2:
        pooled = f
    else:
        raise StructureError(f"expected a 2- or 4-axis feature map, got {f.dim()} axes")
    norms = pooled.norm(dim=1, keepdim=True)
    return pooled / norms.clamp_min(torch.finfo(pooled.dtype).tiny)


class AttentionHead(nn.Module):
    """Learnable layer-matching parameters.

    One query map per teacher tap, one key map and one bilinear form per
    student tap, plus a positional encoding vector per tap on each side.
    """

    def __init__(
        self,
        teacher_widths: Sequence[int],
        student_widths: Sequence[int],
        d: int = 128,
        f_q: str = "identity",
        f_k: str = "identity",
    ):
        super().__init__()
        if d < 1:
            raise ConfigError("key/query width d must be >= 1")
        if f_q not in ACTIVATIONS or f_k not in ACTIVATIONS:
            raise ConfigError(f"unknown activation; choose from {sorted(ACTIVATIONS)}")
        if len(student_widths) > len(teacher_widths):
            raise StructureError("student may not have more taps than the teacher")
        self.d = d
        self.f_q = f_q
        self.f_k = f_k
        self.w_q = nn.ModuleList(nn.Linear(c, d, bias=False) for c in teacher_widths)
        self.w_k = nn.ModuleList(nn.Linear(c, d, bias=False) for c in student_widths)
        self.w_qk = nn.ParameterList(
            nn.Parameter(torch.empty(d, d)) for _ in student_widths
        )
        self.pos_teacher = nn.Parameter(torch.empty(len(teacher_widths), d))
        self.pos_student = nn.Parameter(torch.empty(len(student_widths), d))
        for w in self.w_qk:
            nn.init.normal_(w, std=1.0 / math.sqrt(d))
        nn.init.normal_(self.pos_teacher, std=0.02)
        nn.init.normal_(self.pos_student, std=0.02)

    @property
    def n_teacher(self) -> int:
        return len(self.w_q)

    @property
    def n_student(self) -> int:
        return len(self.w_k)

    @classmethod
    def for_models(cls, teacher: nn.Module, student: nn.Module, d: int = 128, seed: int = 0, **kw) -> "AttentionHead":
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            return cls(teacher.tap_widths(), student.tap_widths(), d=d, **kw)


def attention_weights(teacher_feats: FeatureSet, student_feats: FeatureSet, head: AttentionHead) -> Tensor:
    """Transfer-probability matrix: one softmax row per teacher tap.

    Pooled tap descriptors are averaged over the batch before the query/key
    maps, so the matrix depends on layers, not samples.
    """
    if len(teacher_feats) != head.n_teacher:
        raise StructureError(
            f"head expects {head.n_teacher} teacher taps, got {len(teacher_feats)}"
        )
    if len(student_feats) != head.n_student:
        raise StructureError(
            f"head expects {head.n_student} student taps, got {len(student_feats)}"
        )
    act_q = ACTIVATIONS[head.f_q]
    act_k = ACTIVATIONS[head.f_k]
    queries = []
    for (tap_id, f), lin in zip(teacher_feats, head.w_q):
        g = gap_hw(f)
        if g.shape[1] != lin.in_features:
            raise StructureError(
                f"teacher tap {tap_id} has {g.shape[1]} channels, head expects {lin.in_features}"
            )
        queries.append(act_q(lin(g)).mean(dim=0))
    keys = []
    for (tap_id, f), lin in zip(student_feats, head.w_k):
        g = gap_hw(f)
        if g.shape[1] != lin.in_features:
            raise StructureError(
                f"student tap {tap_id} has {g.shape[1]} channels, head expects {lin.in_features}"
            )
        keys.append(act_k(lin(g)).mean(dim=0))
    scale = math.sqrt(head.d)
    rows = []
    for t, q in enumerate(queries):
        logits = torch.stack(
            [
                (q @ head.w_qk[s] @ keys[s] + head.pos_teacher[t] @ head.pos_student[s]) / scale
                for s in range(len(keys))
            ]
        )
        rows.append(F.softmax(logits, dim=0))
    return torch.stack(rows)


class ProjectionBank(nn.Module):
    """Per (teacher tap, student tap) projections onto teacher geometry.

    4-axis maps get a learned 1x1 channel projection plus bilinear spatial
    resizing; 2-axis maps get a learned dense map onto the teacher width.
    Trained jointly with the student; excluded from pruning and size reports.
    """

    def __init__(self, teacher_widths: Sequence[int], student_widths: Sequence[int], conv: bool = True):
        super().__init__()
        self.conv = conv
        self.n_teacher = len(teacher_widths)
        self.n_student = len(student_widths)
        projs = {}
        for t, ct in enumerate(teacher_widths):
            for s, cs in enumerate(student_widths):
                if conv:
                    projs[f"p{t}_{s}"] = nn.Conv2d(cs, ct, kernel_size=1, bias=False)
                else:
                    projs[f"p{t}_{s}"] = nn.Linear(cs, ct, bias=False)
        self.projs = nn.ModuleDict(projs)

    @classmethod
    def for_models(cls, teacher: nn.Module, student: nn.Module, seed: int = 0) -> "ProjectionBank":
        conv = teacher.spec.family == "wide-resnet"
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            return cls(teacher.tap_widths(), student.tap_widths(), conv=conv)

    def project(self, t: int, s: int, student_map: Tensor, teacher_map: Tensor) -> Tensor:
        proj = self.projs[f"p{t}_{s}"]
        if self.conv:
            if student_map.dim() != 4 or teacher_map.dim() != 4:
                raise StructureError("convolutional bank requires 4-axis maps")
            out = proj(student_map)
            if out.shape[2:] != teacher_map.shape[2:]:
                out = F.interpolate(
                    out, size=teacher_map.shape[2:], mode="bilinear", align_corners=False
                )
            return out
        if student_map.dim() != 2 or teacher_map.dim() != 2:
            raise StructureError("dense bank requires 2-axis maps")
        return proj(student_map)


def attention_loss(
    teacher_feats: FeatureSet,
    student_feats: FeatureSet,
    alpha: Tensor,
    bank: ProjectionBank,
) -> Tensor:
    """Attention-weighted pooled-feature distance, averaged over the batch.

    For every pair (t, s): project the student map to teacher-t geometry,
    pool both sides with channel_pool_norm, take the per-sample Euclidean
    distance, and weight by alpha[t, s]. Non-negative and zero when every
    positively weighted pair has identical pooled descriptors.
    """
    n, m = len(teacher_feats), len(student_feats)
    if alpha.shape != (n, m):
        raise StructureError(f"alpha shape {tuple(alpha.shape)} != ({n}, {m})")
    if bank.n_teacher != n or bank.n_student != m:
        raise StructureError("projection bank does not cover the tap pairs")
    for tap_id, f in list(teacher_feats) + list(student_feats):
        if not torch.isfinite(f).all():
            raise NumericError(f"non-finite values in feature tap {tap_id}")
    total = alpha.new_zeros(())
    for t, (_, ft) in enumerate(teacher_feats):
        pooled_t = channel_pool_norm(ft)
        for s, (_, fs) in enumerate(student_feats):
            projected = bank.project(t, s, fs, ft)
            pooled_s = channel_pool_norm(projected)
            dist = (pooled_t - pooled_s).norm(dim=1).mean()
            total = total + alpha[t, s] * dist
    return total


def soft_target_loss(teacher_logits: Tensor, student_logits: Tensor, T: float) -> Tensor:
    """Temperature-softened teacher/student divergence, scaled by T^2."""
    if T <= 0:
        raise ConfigError(f"temperature must be positive, got {T}")
    if teacher_logits.shape != student_logits.shape:
        raise StructureError(
            f"logit shapes differ: {tuple(teacher_logits.shape)} vs {tuple(student_logits.shape)}"
        )
    log_p_teacher = F.log_softmax(teacher_logits / T, dim=-1)
    log_p_student = F.log_softmax(student_logits / T, dim=-1)
    p_teacher = log_p_teacher.exp()
    kl = (p_teacher * (log_p_teacher - log_p_student)).sum(dim=-1).mean()
    return kl * (T * T)


def student_loss(class_loss, att_loss, kd_loss, beta: float, alpha_kd: float):
    """Total training loss: (1 - alpha_kd) * class + alpha_kd * kd + beta * att.

    With alpha_kd = 0 the soft-target term drops out and the loss is the
    plain class loss plus the weighted attention term.
    """
    if beta < 0:
        raise ConfigError(f"beta must be non-negative, got {beta}")
    if not 0.0 <= alpha_kd <= 1.0:
        raise ConfigError(f"alpha_kd must lie in [0, 1], got {alpha_kd}")
    for name, v in (("class_loss", class_loss), ("att_loss", att_loss), ("kd_loss", kd_loss)):
        val = float(v.detach() if isinstance(v, Tensor) else v)
        if not math.isfinite(val):
            raise NumericError(f"{name} is not finite: {val}")
    return (1.0 - alpha_kd) * class_loss + alpha_kd * kd_loss + beta * att_loss
