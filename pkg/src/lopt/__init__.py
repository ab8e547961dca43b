"""Learned-optimizer update engine with materializing and streaming
execution paths, accumulator state, a data-parallel step simulator, and
benchmarking tools."""

from .tensors import (
    FileFormatError,
    MalformedHeaderError,
    ParamTensor,
    TensorError,
    TruncatedFileError,
    VersionMismatchError,
    file_load,
    file_save,
    tensor_new,
)
from .state import (
    BetaConfig,
    OptState,
    state_step,
    update_adafactor,
    update_momentum,
    update_second_moment,
)
from .features import (
    FeatureSet,
    FeatureSetSpec,
    FeatureStats,
    build_features_full,
    build_features_range,
    column_names,
    compute_squared_average,
    construct_features_at,
    normalize_features,
    small_fc_lopt_spec,
    spec_by_name,
    velo_mlp_spec,
)
from .engine import (
    EngineError,
    LoptWeights,
    ScratchLimitError,
    ScratchTracker,
    UpdateOverflowError,
    UpdateReport,
    apply_update,
    count_kernel_equivalents,
    load_weights,
    mlp_forward,
    random_weights,
    save_weights,
    step_fused,
    step_naive,
    zero_weights,
)
from .optim import (
    CheckpointMismatchError,
    OptimError,
    OptimizerHandle,
    ScheduleConfig,
    adafactor_step,
    adam_step,
    apply_weight_decay,
    checkpoint_load,
    checkpoint_save,
    opt_step,
    schedule_lr,
)
from .distsim import (
    CommTrace,
    CostModel,
    DistError,
    ShardPlan,
    Strategy,
    TraceError,
    make_plan,
    mean_grads,
    normalization_across_shards,
    run_allreduce_step,
    run_fsdp_a2a_step,
    run_reduce_scatter_step,
    validate_plan,
    validate_trace,
)

__version__ = "0.1.0"
