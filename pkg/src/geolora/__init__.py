"""Rank-adaptive low-rank training with a parallel geometric integrator."""

from .errors import ConfigError, InvalidArgument, NumericFailure
from .lowrank import (
    AugmentedState,
    LowRankAdapter,
    TruncationMode,
    TruncationPolicy,
    assemble_dense,
    make_adapter,
    tangent_project,
    truncate,
    zero_adapter,
)
from .integrator import (
    LayerStack,
    OptimizerOpts,
    geolora_iteration,
    global_truncate,
    stack_iteration,
)

__version__ = "0.1.0"
