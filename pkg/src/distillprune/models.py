"""Teacher/student network families with named feature taps.

Two families are provided:

* ``wide-resnet`` -- pre-activation wide residual networks for 32x32 images.
  Taps: the output of each of the three residual groups plus the pooled
  pre-classifier representation (kept 4-axis with 1x1 spatial extent).
* ``tabular-mlp`` -- fully connected regressors/classifiers for encoded
  tabular features. Taps: every hidden layer, post activation.

Channel pruning is logical, not physical: masked channels stay in the dense
arrays but their weights (and the batch-norm scale/shift that would revive
them) are held at exactly zero, so a masked channel's activation is zero on
any input.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InputError, StructureError

Tensor = torch.Tensor

#: ordered (tap_id, feature tensor) pairs produced by a forward pass
FeatureSet = List[Tuple[str, Tensor]]


@dataclass(frozen=True)
class ModelSpec:
    """Architecture selector; together with a seed it fully determines a model."""

    family: str  # 'wide-resnet' | 'tabular-mlp'
    depth: int
    width_factor: int = 1
    num_outputs: int = 1
    task: str = "classification"  # 'classification' | 'regression'
    input_dim: Optional[int] = None  # tabular only; feature count

    def validate(self) -> None:
        if self.family not in ("wide-resnet", "tabular-mlp"):
            raise StructureError(f"unknown model family {self.family!r}")
        if self.depth <= 0 or self.width_factor <= 0:
            raise StructureError("depth and width_factor must be positive")
        if self.task not in ("classification", "regression"):
            raise StructureError(f"unknown task {self.task!r}")
        if self.num_outputs < 1:
            raise StructureError("num_outputs must be >= 1")
        if self.task == "regression" and self.num_outputs != 1:
            raise StructureError("regression requires num_outputs = 1")
        if self.family == "wide-resnet":
            if self.depth % 6 != 4:
                raise StructureError(
                    f"wide-resnet depth must be 6k+4 (got {self.depth})"
                )

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "depth": self.depth,
            "width_factor": self.width_factor,
            "num_outputs": self.num_outputs,
            "task": self.task,
            "input_dim": self.input_dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)


@dataclass
class ChannelGroup:
    """One prunable set of channels and every parameter slice tied to it.

    ``out_params`` are masked along dim 0 (producing filters, biases and the
    batch-norm scale/shift of the channel), ``in_params`` along dim 1
    (downstream weights consuming the channel). ``score_params`` is the
    subset of producing weight tensors used for magnitude ranking.
    """

    layer_id: str
    size: int
    out_params: List[nn.Parameter] = field(default_factory=list)
    in_params: List[nn.Parameter] = field(default_factory=list)
    score_params: List[nn.Parameter] = field(default_factory=list)


@dataclass(frozen=True)
class WeightSnapshot:
    """Immutable deep copy of a model's full state (params and buffers)."""

    entries: Dict[str, Tensor]
    tag: str  # 'init' | 'previous_round'

    def param_count(self) -> int:
        return sum(v.numel() for v in self.entries.values())


class _WideBlock(nn.Module):
    """Pre-activation residual block with widened 3x3 convolutions.

    The first block of a group always projects its shortcut, even when the
    widths happen to match: the projection carries the group's channel mask,
    so pruned group-output channels cannot leak in from the group input.
    """

    def __init__(self, in_ch: int, out_ch: int, stride: int, projection: bool = False):
        super().__init__()
        self.equal_io = not projection and in_ch == out_ch and stride == 1
        self.bn1 = nn.BatchNorm2d(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, stride=1, padding=1, bias=False)
        self.shortcut = (
            None
            if self.equal_io
            else nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False)
        )

    def forward(self, x: Tensor) -> Tensor:
        o = F.relu(self.bn1(x))
        out = self.conv2(F.relu(self.bn2(self.conv1(o))))
        residual = x if self.equal_io else self.shortcut(o)
        return out + residual


class WideResNet(nn.Module):
    """Wide residual network for 32x32 inputs with group-level feature taps."""

    IN_CHANNELS = 3

    def __init__(self, spec: ModelSpec):
        super().__init__()
        spec.validate()
        self.spec = spec
        k = (spec.depth - 4) // 6
        widths = [16, 16 * spec.width_factor, 32 * spec.width_factor, 64 * spec.width_factor]
        self.stem = nn.Conv2d(self.IN_CHANNELS, widths[0], 3, stride=1, padding=1, bias=False)
        self.groups = nn.ModuleList()
        in_ch = widths[0]
        for g, (out_ch, stride) in enumerate(zip(widths[1:], (1, 2, 2)), start=1):
            blocks = []
            for b in range(k):
                blocks.append(
                    _WideBlock(in_ch, out_ch, stride if b == 0 else 1, projection=b == 0)
                )
                in_ch = out_ch
            self.groups.append(nn.Sequential(*blocks))
        self.bn_final = nn.BatchNorm2d(widths[3])
        self.fc = nn.Linear(widths[3], spec.num_outputs)
        self._widths = widths
        self._groups_layout = None

    def tap_ids(self) -> List[str]:
        return ["group1", "group2", "group3", "pooled"]

    def tap_widths(self) -> List[int]:
        return [self._widths[1], self._widths[2], self._widths[3], self._widths[3]]

    def forward_with_features(self, x: Tensor) -> Tuple[Tensor, FeatureSet]:
        if x.dim() != 4 or x.shape[1] != self.IN_CHANNELS:
            raise InputError(
                f"expected (batch, {self.IN_CHANNELS}, H, W) input, got {tuple(x.shape)}"
            )
        feats: FeatureSet = []
        h = self.stem(x)
        for g, group in enumerate(self.groups, start=1):
            h = group(h)
            feats.append((f"group{g}", h))
        h = F.relu(self.bn_final(h))
        pooled = F.adaptive_avg_pool2d(h, 1)
        feats.append(("pooled", pooled))
        out = self.fc(pooled.flatten(1))
        if self.spec.task == "regression":
            out = out.squeeze(-1)
        return out, feats

    def forward(self, x: Tensor) -> Tensor:
        return self.forward_with_features(x)[0]

    def channel_groups(self) -> Dict[str, ChannelGroup]:
        """Prunable channel sets: one per block's inner conv, one per residual
        group output (shared by every block output and the shortcut, so a
        pruned channel is dead across the whole group)."""
        if self._groups_layout is not None:
            return self._groups_layout
        groups: Dict[str, ChannelGroup] = {}
        n_groups = len(self.groups)
        for g in range(1, n_groups + 1):
            blocks = list(self.groups[g - 1])
            width = self._widths[g]
            for b, blk in enumerate(blocks):
                gid = f"group{g}.block{b}.inner"
                groups[gid] = ChannelGroup(
                    layer_id=gid,
                    size=blk.conv1.out_channels,
                    out_params=[blk.conv1.weight, blk.bn2.weight, blk.bn2.bias],
                    in_params=[blk.conv2.weight],
                    score_params=[blk.conv1.weight],
                )
            out = ChannelGroup(layer_id=f"group{g}.out", size=width)
            for b, blk in enumerate(blocks):
                out.out_params.append(blk.conv2.weight)
                out.score_params.append(blk.conv2.weight)
                if b == 0 and blk.shortcut is not None:
                    out.out_params.append(blk.shortcut.weight)
                    out.score_params.append(blk.shortcut.weight)
                if b > 0:
                    # bn1 of later blocks normalizes this group's output
                    out.out_params.extend([blk.bn1.weight, blk.bn1.bias])
                    out.in_params.append(blk.conv1.weight)
            if g < n_groups:
                nxt = list(self.groups[g])[0]
                out.out_params.extend([nxt.bn1.weight, nxt.bn1.bias])
                out.in_params.append(nxt.conv1.weight)
                if nxt.shortcut is not None:
                    out.in_params.append(nxt.shortcut.weight)
            else:
                out.out_params.extend([self.bn_final.weight, self.bn_final.bias])
                out.in_params.append(self.fc.weight)
            groups[f"group{g}.out"] = out
        self._groups_layout = groups
        return groups

    def param_mask_axes(self) -> Dict[str, Tuple[Optional[str], Optional[str]]]:
        """Map parameter name -> (out-side group id, in-side group id)."""
        by_param_out: Dict[int, str] = {}
        by_param_in: Dict[int, str] = {}
        for gid, grp in self.channel_groups().items():
            for p in grp.out_params:
                by_param_out[id(p)] = gid
            for p in grp.in_params:
                by_param_in[id(p)] = gid
        return {
            name: (by_param_out.get(id(p)), by_param_in.get(id(p)))
            for name, p in self.named_parameters()
        }


class TabularMLP(nn.Module):
    """Fully connected network over encoded tabular features.

    Hidden widths halve from 256 * width_factor down; with depth 3 and
    width_factor 1 that is (256, 128, 64). Every hidden layer is a tap.
    """

    def __init__(self, spec: ModelSpec):
        super().__init__()
        spec.validate()
        if spec.input_dim is None:
            raise StructureError("tabular-mlp requires input_dim (the encoded feature count)")
        self.spec = spec
        widths = [max(8, 64 * spec.width_factor * 2 ** (spec.depth - 1 - i)) for i in range(spec.depth)]
        dims = [spec.input_dim] + widths
        self.hidden = nn.ModuleList(
            nn.Linear(dims[i], dims[i + 1]) for i in range(spec.depth)
        )
        self.out = nn.Linear(widths[-1], spec.num_outputs)
        self._widths = widths

    def tap_ids(self) -> List[str]:
        return [f"hidden{i + 1}" for i in range(len(self.hidden))]

    def tap_widths(self) -> List[int]:
        return list(self._widths)

    def forward_with_features(self, x: Tensor) -> Tuple[Tensor, FeatureSet]:
        if x.dim() != 2 or x.shape[1] != self.spec.input_dim:
            raise InputError(
                f"expected (batch, {self.spec.input_dim}) input, got {tuple(x.shape)}"
            )
        feats: FeatureSet = []
        h = x
        for i, layer in enumerate(self.hidden, start=1):
            h = F.relu(layer(h))
            feats.append((f"hidden{i}", h))
        out = self.out(h)
        if self.spec.task == "regression":
            out = out.squeeze(-1)
        return out, feats

    def forward(self, x: Tensor) -> Tensor:
        return self.forward_with_features(x)[0]

    def channel_groups(self) -> Dict[str, ChannelGroup]:
        groups: Dict[str, ChannelGroup] = {}
        for i, layer in enumerate(self.hidden, start=1):
            nxt = self.hidden[i] if i < len(self.hidden) else self.out
            gid = f"hidden{i}"
            groups[gid] = ChannelGroup(
                layer_id=gid,
                size=layer.out_features,
                out_params=[layer.weight, layer.bias],
                in_params=[nxt.weight],
                score_params=[layer.weight],
            )
        return groups

    def param_mask_axes(self) -> Dict[str, Tuple[Optional[str], Optional[str]]]:
        by_out: Dict[int, str] = {}
        by_in: Dict[int, str] = {}
        for gid, grp in self.channel_groups().items():
            for p in grp.out_params:
                by_out[id(p)] = gid
            for p in grp.in_params:
                by_in[id(p)] = gid
        return {
            name: (by_out.get(id(p)), by_in.get(id(p)))
            for name, p in self.named_parameters()
        }


def build_model(spec: ModelSpec, seed: int) -> nn.Module:
    """Construct a model with deterministic initialization for the given seed."""
    spec.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        if spec.family == "wide-resnet":
            model = WideResNet(spec)
            for m in model.modules():
                if isinstance(m, nn.Conv2d):
                    nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
                elif isinstance(m, nn.Linear):
                    nn.init.kaiming_normal_(m.weight)
                    nn.init.zeros_(m.bias)
        else:
            model = TabularMLP(spec)
    return model


def forward_with_features(model: nn.Module, batch: Tensor) -> Tuple[Tensor, FeatureSet]:
    """Forward pass returning predictions plus the ordered feature taps."""
    return model.forward_with_features(batch)


def snapshot(model: nn.Module, tag: str) -> WeightSnapshot:
    """Deep copy of the model state; later training never alters it."""
    if tag not in ("init", "previous_round"):
        raise StructureError(f"unknown snapshot tag {tag!r}")
    entries = {k: v.detach().clone() for k, v in model.state_dict().items()}
    return WeightSnapshot(entries=entries, tag=tag)


def restore_snapshot(model: nn.Module, snap: WeightSnapshot) -> None:
    """Copy a snapshot's state back into the model (exact, dtype-preserving)."""
    current = model.state_dict()
    if set(current) != set(snap.entries):
        raise StructureError("snapshot keys do not match the model")
    with torch.no_grad():
        model.load_state_dict({k: v.clone() for k, v in snap.entries.items()})


def clone_model(model: nn.Module) -> nn.Module:
    return copy.deepcopy(model)
