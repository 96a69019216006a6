"""Services package."""

from sdtp.services.kv_cache_service import (
    EvictedScore,
    GenerationOutcome,
    compose_sdtp_h2o,
    decode_tail_nll,
)
from sdtp.services.objectives import EmptySelectionError, NonFiniteLossError
from sdtp.services.profiler_service import (
    UnknownProfileError,
    bench_toy,
    flops_table,
    get_profile,
)
from sdtp.services.saliency_service import (
    EmptyMapError,
    LabelLengthError,
    SaliencyService,
)
from sdtp.services.sweep_service import run_sweeps
from sdtp.services.training_service import (
    CorpusTooSmallError,
    EmptyBatchError,
    EvalMode,
    TrainerService,
    TrainingResult,
    evaluate,
    pretrain_base,
)

__all__ = [
    "CorpusTooSmallError",
    "EmptyBatchError",
    "EmptyMapError",
    "EmptySelectionError",
    "EvalMode",
    "EvictedScore",
    "GenerationOutcome",
    "LabelLengthError",
    "NonFiniteLossError",
    "SaliencyService",
    "TrainerService",
    "TrainingResult",
    "UnknownProfileError",
    "bench_toy",
    "compose_sdtp_h2o",
    "decode_tail_nll",
    "evaluate",
    "flops_table",
    "get_profile",
    "pretrain_base",
    "run_sweeps",
]
