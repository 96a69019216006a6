"""Report schemas shared by the services and the command line."""

import typing as t

from pydantic import BaseModel, Field

COUNTING_CONVENTION: str = "2 FLOPs per MAC; causal masking not discounted"


class LossReport(BaseModel):
    """Loss components of one training step (batch mean)."""

    cls: float
    mse: float
    rank: float
    ratio: float | None = None
    total: float
    mse_per_stage: t.List[float] = []
    rank_per_stage: t.List[float] = []
    pair_counts: t.List[int] = []


class StepMetrics(LossReport):
    """One metrics-log record."""

    step: int
    epoch: int


class TrainingMetadata(BaseModel):
    """What produced a checkpoint."""

    config_hash: str
    steps: int
    seed: int
    base_checksum: str
    scorer_checksum: str
    final_loss: LossReport | None = None


class EvalReport(BaseModel):
    """Held-out perplexity and scorer/saliency agreement."""

    mode: str
    seed: int
    windows: int
    tail_tokens: int
    nll: float
    perplexity: float
    stage_layers: t.List[int]
    stage_ratios: t.List[float]
    kept_counts: t.List[float]
    spearman: t.List[float | None] | None = None
    mean_spearman: float | None = None
    kv_policy: str | None = None
    kv_budget: int | None = None
    max_cache_entries: int | None = None
    budget_respected: bool | None = None


class SparsityStats(BaseModel):
    """Important vs redundant token counts per stage of one sequence."""

    threshold: float
    length: int
    stage_layers: t.List[int]
    important: t.List[int]
    redundant: t.List[int]
    persistence: t.List[t.List[float | None]]


class SparsityProfile(BaseModel):
    """Mean important-token share per stage over many sequences."""

    threshold: float
    windows: int
    stage_layers: t.List[int]
    important_fraction: t.List[float]


class FlopsReport(BaseModel):
    """Analytic cost of one (profile, length, schedule) triple."""

    profile: str
    length: int
    gen_len: int
    convention: str = COUNTING_CONVENTION
    mean_keep_ratio: float
    prefill_flops: float
    prefill_flops_sdtp: float
    scorer_flops: float
    end2end_flops: float
    end2end_flops_sdtp: float
    memory_bytes: float
    memory_bytes_sdtp: float
    prefill_ratio: float = Field(..., gt=0.0)
    end2end_ratio: float = Field(..., gt=0.0)
    memory_ratio: float = Field(..., gt=0.0)
    memory_savings: float


class FlopsTable(BaseModel):
    """Cost rows over several lengths."""

    profile: str
    stage_layers: t.List[int]
    stage_ratios: t.List[float]
    rows: t.List[FlopsReport]


class BenchReport(BaseModel):
    """Wall-clock timings of the toy model."""

    length: int
    gen_len: int
    repeats: int
    workers: int = 1
    prefill_ms_full: float
    prefill_ms_pruned: float
    end2end_ms_full: float
    end2end_ms_pruned: float
    prefill_speedup: float
    end2end_speedup: float
    prefill_ms_spread: t.Tuple[float, float]
    output_overlap: float


class TraceRow(BaseModel):
    """Cache size of one layer after one decode step."""

    step: int
    layer: int
    entries: int


class GenerationReport(BaseModel):
    """Outcome of a generation run."""

    prompt_length: int
    kept_prefill: int
    policy: str
    budget: int | None
    generated: t.List[int]
    text: str
    stage_kept: t.List[t.List[int]]
    max_cache_entries: int


class SweepRow(BaseModel):
    """Perplexity of one placement or stage-count configuration."""

    study: str
    start_layer: int
    layer_step: int
    stages: int
    keep_ratio: float
    final_keep: float
    perplexity: float


class SweepReport(BaseModel):
    """Placement and stage-count studies."""

    windows: int
    baseline_perplexity: float
    rows: t.List[SweepRow]
