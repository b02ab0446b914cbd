"""Zero-shot fusion of fine-tuned models into a sparse mixture of low-rank
experts, with the linear algebra, merging baselines, checkpoint format and
desk-scale experiment harness it needs."""

from .baselines import DeltaSet, merging_error, optimal_bias_lambda, task_arithmetic, weight_average
from .checkpoint import ModelSpec, Tensor, TensorStore, read_store, write_store
from .errors import (
    ConfigError,
    NumericError,
    RankDeficiencyError,
    ShapeError,
    SmileError,
    StoreError,
    StoreMismatchError,
)
from .linalg import SvdFactors, svd, truncate, truncation_error
from .smile import (
    LowRankExpert,
    SmileBundle,
    SmileConfig,
    SmileLayer,
    build_expert,
    build_expert_from_lora,
    forward,
    param_count,
    route,
    upscale_model,
)
from .subspace import Zone, project_zone, zone_partition

__version__ = "0.1.0"
