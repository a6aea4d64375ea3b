"""Layer dropping for transformer encoder checkpoints."""

from .contribution import SimilarityProfile, cosine, score_and_plan, similarity_profile
from .encoder import EncoderConfig, EncoderModel, TokenBatch, forward, init_encoder, load_weights
from .finetune import (
    SyntheticTask,
    TrainConfig,
    compare_strategies,
    drop_after_finetune,
    finetune,
    gradient_check,
    gradual_drop_finetune,
)
from .strategies import (
    DropPlan,
    Strategy,
    plan_bottom,
    plan_even_alternate,
    plan_odd_alternate,
    plan_symmetric,
    plan_top,
    select_by_threshold,
)
from .surgery import ReductionReport, apply_plan, max_droppable_within, reduction_report
from .tensorstore import Checkpoint, get_tensor, read_checkpoint, write_checkpoint
from .topology import NamingScheme, ParamReport, count_parameters, infer_topology

__version__ = "0.1.0"
