"""Experiment configuration: flat key-value files with sectioned overrides.

A config file has an ``[experiment]`` section holding the run parameters and
``[teacher]``/``[student]`` sections describing the two architectures. Any
key can be overridden from the environment with the
``DISTILLPRUNE_<SECTION>_<KEY>`` convention, e.g.
``DISTILLPRUNE_EXPERIMENT_EPOCHS=5`` or ``DISTILLPRUNE_STUDENT_DEPTH=10``.

Bundled presets live next to this module; pass a preset name instead of a
path anywhere a config file is accepted.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, fields, replace
from importlib import resources
from typing import Optional, Tuple

from .errors import ConfigError
from .models import ModelSpec

ENV_PREFIX = "DISTILLPRUNE"

STRATEGIES = ("sad", "sp-sad", "lth-sad", "ss-sad")
DATASETS = ("cifar", "movies")


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything that determines a run, including both model specs."""

    strategy: str
    dataset: str
    teacher: ModelSpec
    student: ModelSpec
    epochs: int
    lr: float
    batch_size: int = 64
    feature_group: Optional[str] = None
    lr_milestones: Tuple[int, ...] = ()
    gamma: float = 0.1  # per-milestone factor when decay_mode is weight-decay
    decay: float = 0.0
    decay_mode: str = "weight-decay"  # or 'lr-factor'
    momentum: float = 0.9
    beta: float = 0.0
    temperature: float = 4.0
    alpha_kd: float = 0.0
    prune_rate: Optional[float] = None
    prune_every: Optional[int] = None
    prune_scope: str = "per-layer"
    prune_target: Optional[float] = None
    subset_fraction: float = 1.0
    seed: int = 0
    data_root: str = "synthetic"
    out_dir: str = "runs/latest"
    teacher_epochs: int = 0
    teacher_lr: Optional[float] = None
    teacher_checkpoint: Optional[str] = None
    student_checkpoint: Optional[str] = None
    head_dim: int = 128
    f_q: str = "identity"
    f_k: str = "identity"
    movie_manifest: Optional[str] = None
    name: str = "experiment"

    @property
    def weight_decay(self) -> float:
        return self.decay if self.decay_mode == "weight-decay" else 0.0

    @property
    def lr_gamma(self) -> float:
        return self.decay if self.decay_mode == "lr-factor" else self.gamma

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.dataset not in DATASETS:
            raise ConfigError(f"dataset must be one of {DATASETS}, got {self.dataset!r}")
        if self.strategy == "sad":
            if self.prune_rate is not None or self.prune_every is not None:
                raise ConfigError("strategy sad does not prune; remove prune_rate/prune_every")
        else:
            if self.prune_rate is None or self.prune_every is None:
                raise ConfigError(f"strategy {self.strategy} requires prune_rate and prune_every")
            if not 0.0 < self.prune_rate < 1.0:
                raise ConfigError(f"prune_rate must lie in (0, 1), got {self.prune_rate}")
            if self.prune_every < 1:
                raise ConfigError(f"prune_every must be >= 1, got {self.prune_every}")
        if self.strategy == "ss-sad" and self.prune_target is None:
            raise ConfigError("strategy ss-sad requires prune_target (pre-sparsification level)")
        if self.prune_target is not None and not 0.0 < self.prune_target < 1.0:
            raise ConfigError(f"prune_target must lie in (0, 1), got {self.prune_target}")
        if self.dataset == "movies" and self.feature_group is None:
            raise ConfigError("the movies dataset requires feature_group")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if list(self.lr_milestones) != sorted(self.lr_milestones):
            raise ConfigError(f"lr_milestones must be sorted, got {self.lr_milestones}")
        if self.decay_mode not in ("weight-decay", "lr-factor"):
            raise ConfigError(f"decay_mode must be weight-decay or lr-factor, got {self.decay_mode!r}")
        if self.beta < 0:
            raise ConfigError(f"beta must be non-negative, got {self.beta}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if not 0.0 <= self.alpha_kd <= 1.0:
            raise ConfigError(f"alpha_kd must lie in [0, 1], got {self.alpha_kd}")
        if not 0.0 < self.subset_fraction <= 1.0:
            raise ConfigError(f"subset_fraction must lie in (0, 1], got {self.subset_fraction}")
        if self.dataset == "movies" and self.feature_group not in (
            "numerical",
            "social",
            "categorical",
            "textual",
        ):
            raise ConfigError(f"unknown feature_group {self.feature_group!r}")
        self.teacher.validate()
        self.student.validate()

    def with_overrides(self, **kw) -> "ExperimentConfig":
        return replace(self, **kw)

    def prune_schedule(self) -> Tuple[int, ...]:
        """Epochs at which pruning events fire, ignoring saturation."""
        if self.strategy not in ("sp-sad", "lth-sad") or not self.prune_every:
            return ()
        return tuple(range(self.prune_every, self.epochs + 1, self.prune_every))

    def lr_drops(self) -> Tuple[int, ...]:
        return tuple(m for m in self.lr_milestones if m <= self.epochs)

    def to_cfg_text(self) -> str:
        """Render back to the config-file format (the resolved-config echo)."""
        cp = configparser.ConfigParser()
        exp = {}
        skip = {"teacher", "student"}
        for f in fields(self):
            if f.name in skip:
                continue
            v = getattr(self, f.name)
            if v is None:
                continue
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            exp[f.name] = str(v)
        cp["experiment"] = exp
        for section, spec in (("teacher", self.teacher), ("student", self.student)):
            cp[section] = {
                k: str(v) for k, v in spec.to_dict().items() if v is not None
            }
        import io

        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


_INT_KEYS = {"epochs", "batch_size", "prune_every", "seed", "teacher_epochs", "head_dim"}
_FLOAT_KEYS = {
    "lr",
    "gamma",
    "decay",
    "momentum",
    "beta",
    "temperature",
    "alpha_kd",
    "prune_rate",
    "prune_target",
    "subset_fraction",
    "teacher_lr",
}
_TUPLE_KEYS = {"lr_milestones"}


def _coerce(key: str, raw: str):
    raw = raw.strip()
    if raw == "":
        return None
    if key in _INT_KEYS:
        return int(raw)
    if key in _FLOAT_KEYS:
        return float(raw)
    if key in _TUPLE_KEYS:
        return tuple(int(x) for x in raw.split(",") if x.strip())
    return raw


def _spec_from_section(section) -> ModelSpec:
    kw = {}
    for key in ("family", "depth", "width_factor", "num_outputs", "task", "input_dim"):
        if key in section and section[key].strip():
            v = section[key].strip()
            kw[key] = v if key in ("family", "task") else int(v)
    try:
        return ModelSpec(**kw)
    except TypeError as e:
        raise ConfigError(f"incomplete model spec: {e}") from e


def _apply_env(cp: configparser.ConfigParser) -> None:
    for section in cp.sections():
        for key in cp[section]:
            env = f"{ENV_PREFIX}_{section.upper()}_{key.upper()}"
            if env in os.environ:
                cp[section][key] = os.environ[env]
    # environment may introduce keys the file omitted
    for env, value in os.environ.items():
        if not env.startswith(ENV_PREFIX + "_"):
            continue
        rest = env[len(ENV_PREFIX) + 1 :]
        for section in cp.sections():
            prefix = section.upper() + "_"
            if rest.startswith(prefix):
                cp[section][rest[len(prefix) :].lower()] = value


def preset_path(name: str) -> str:
    """Path of a bundled preset config (with or without the .cfg suffix)."""
    fname = name if name.endswith(".cfg") else name + ".cfg"
    ref = resources.files("distillprune").joinpath("presets", fname)
    if not ref.is_file():
        available = sorted(
            p.name[:-4]
            for p in resources.files("distillprune").joinpath("presets").iterdir()
            if p.name.endswith(".cfg")
        )
        raise ConfigError(f"no preset {name!r}; available: {', '.join(available)}")
    return str(ref)


def load_config(path_or_preset: str, apply_env: bool = True) -> ExperimentConfig:
    """Parse and validate a config file (or bundled preset name)."""
    path = path_or_preset
    if not os.path.isfile(path):
        path = preset_path(path_or_preset)
    cp = configparser.ConfigParser()
    read = cp.read(path)
    if not read:
        raise ConfigError(f"cannot read config file {path}")
    if "experiment" not in cp:
        raise ConfigError(f"config {path} lacks an [experiment] section")
    for section in ("teacher", "student"):
        if section not in cp:
            raise ConfigError(f"config {path} lacks a [{section}] section")
    if apply_env:
        _apply_env(cp)

    known = {f.name for f in fields(ExperimentConfig)} - {"teacher", "student"}
    kw = {}
    for key, raw in cp["experiment"].items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r} in [experiment]")
        value = _coerce(key, raw)
        if value is not None:
            kw[key] = value
    kw.setdefault("name", os.path.splitext(os.path.basename(path))[0])
    cfg = ExperimentConfig(
        teacher=_spec_from_section(cp["teacher"]),
        student=_spec_from_section(cp["student"]),
        **kw,
    )
    cfg.validate()
    return cfg
