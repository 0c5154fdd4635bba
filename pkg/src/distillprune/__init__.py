"""Compress neural networks by distilling a large teacher into a small,
iteratively channel-pruned student.

Three strategies are provided, all sharing the same attention-guided
feature distillation:

* ``sp-sad``  -- prune during training, carrying surviving weights forward.
* ``lth-sad`` -- prune, then rewind surviving weights to their initial values
  (lottery-ticket style).
* ``ss-sad``  -- pre-sparsify the student with plain lottery-ticket pruning,
  then distill into the sparse student.

The package also ships the evaluation side: accuracy / MAE / MSE metrics,
model-size accounting, and GPU power telemetry with file replay.
"""

from .errors import ConfigError, IngestionError, InputError, NumericError, StructureError
from .models import ModelSpec, build_model, forward_with_features, snapshot
from .masking import MaskSet, apply_mask, effective_size, full_mask
from .distill import (
    AttentionHead,
    ProjectionBank,
    attention_loss,
    attention_weights,
    channel_pool_norm,
    gap_hw,
    soft_target_loss,
    student_loss,
)
from .pruning import PruneConfig, extract_mask, presparsify_lth, rank_channels, reinit_lth, reinit_sp
from .metrics import accuracy, mae, mse
from .telemetry import PowerLog, PowerSample, energy_joules, read_power_log, sample_power
from .training import EpochRecord, TrainState, WinningTicket, lr_schedule, select_winning_ticket, train
from .config import ExperimentConfig, load_config, preset_path

__all__ = [
    "AttentionHead",
    "ConfigError",
    "EpochRecord",
    "ExperimentConfig",
    "IngestionError",
    "InputError",
    "MaskSet",
    "ModelSpec",
    "NumericError",
    "PowerLog",
    "PowerSample",
    "ProjectionBank",
    "PruneConfig",
    "StructureError",
    "TrainState",
    "WinningTicket",
    "accuracy",
    "apply_mask",
    "attention_loss",
    "attention_weights",
    "build_model",
    "channel_pool_norm",
    "effective_size",
    "energy_joules",
    "extract_mask",
    "forward_with_features",
    "full_mask",
    "gap_hw",
    "load_config",
    "lr_schedule",
    "mae",
    "mse",
    "preset_path",
    "presparsify_lth",
    "rank_channels",
    "read_power_log",
    "reinit_lth",
    "reinit_sp",
    "sample_power",
    "select_winning_ticket",
    "snapshot",
    "soft_target_loss",
    "student_loss",
    "train",
]
