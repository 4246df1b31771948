"""Capsule-network training and primary-capsule pruning toolkit."""

from .capsnet import (
    CapsNetConfig,
    CapsNetModel,
    accuracy,
    dynamic_routing,
    forward,
    init_model,
    margin_loss,
    pc_count,
    primary_capsules,
    reconstruction_loss,
    squash,
)
from .data import DatasetSplit, load_cifar10, load_idx, synth_dataset
from .flops import FlopsReport, flops_pc_transform, flops_report, flops_routing, reduction_ratio
from .pruning import (
    PruneRanking,
    PruneRecord,
    PruneSchedule,
    accumulate,
    activation_score_batch,
    apply_prune,
    default_schedule,
    fine_tune,
    min_weight_score,
    normalize,
    parse_schedule,
    prune_loop,
    select_prune_targets,
    taylor_score_batch,
)
from .persist import emit_curve, load, read_curve, save
from .tensor import Tape, Tensor, backward
from .training import Adam, train

__version__ = "0.1.0"
