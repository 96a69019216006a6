"""Analytic FLOPs and memory model, plus a wall-clock toy benchmark.

Counting convention: 2 FLOPs per multiply-accumulate; attention costs
`2 n^2 d` for scores plus `2 n^2 d` for the value mix in every layer,
with no discount for causal masking.
"""

import logging
import time
import typing as t

import numpy as np

from sdtp.core.errors import SdtpError
from sdtp.core.globals import BUILTIN_PROFILES, DEFAULT_GEN_LEN
from sdtp.core.kv_cache import KVCachePolicy
from sdtp.core.models import ModelParams, prefill_pruned
from sdtp.core.pruning import (
    RandomScorer,
    StageScorer,
    keep_count,
    protected_set,
    scorer_flops_per_token,
)
from sdtp.schemas.profile import ArchProfile
from sdtp.schemas.reports import BenchReport, FlopsReport, FlopsTable
from sdtp.schemas.schedule import PruneSchedule
from sdtp.services.kv_cache_service import NO_PRUNING, compose_sdtp_h2o

LOGGER: logging.Logger = logging.getLogger(__name__)

WEIGHT_BYTES: int = 2
LOGIT_BYTES: int = 4


class UnknownProfileError(SdtpError, ValueError):
    """Raised when a named architecture profile does not exist."""

    def __init__(self, name: str) -> None:
        self.name = name
        self.available = sorted(BUILTIN_PROFILES)
        super().__init__(
            f"unknown profile {name!r}; available: "
            f"{', '.join(self.available)}"
        )


def get_profile(name: str) -> ArchProfile:
    """Built-in architecture profile by name."""
    if name not in BUILTIN_PROFILES:
        raise UnknownProfileError(name)
    return ArchProfile(**BUILTIN_PROFILES[name])


def layer_keep_ratios(
    schedule: PruneSchedule | None, n_layers: int
) -> t.List[float]:
    """Cumulative keep ratio inside every layer."""
    plan = schedule or NO_PRUNING
    return [plan.ratio_at(layer) for layer in range(n_layers)]


def mean_keep_ratio(schedule: PruneSchedule | None, n_layers: int) -> float:
    """Mean per-layer keep ratio, protection floor ignored."""
    return float(np.mean(layer_keep_ratios(schedule, n_layers)))


def layer_token_counts(
    schedule: PruneSchedule | None, n_layers: int, length: int
) -> t.List[int]:
    """Tokens processed by every layer, as the pruned prefill keeps them.

    Args:
        schedule (PruneSchedule | None): Pruning stages; none if None.
        n_layers (int): Model depth.
        length (int): Prompt length.

    Returns:
        List[int]: Token count per layer.
    """
    plan = schedule or NO_PRUNING
    floor: int = protected_set(
        length, plan.sink_count, plan.local_fraction
    ).shape[0]
    counts: t.List[int] = []
    current: int = length
    for layer in range(n_layers):
        stage = plan.stage_at(layer)
        if stage is not None:
            target = max(
                keep_count(plan.stages[stage].keep_ratio, length), floor
            )
            current = min(current, target)
        counts.append(current)
    return counts


def scorer_flops(
    profile: ArchProfile,
    length: int,
    schedule: PruneSchedule | None,
    scorer_hidden: int | None = None,
) -> int:
    """FLOPs of every scorer that actually prunes during prefill."""
    plan = schedule or NO_PRUNING
    hidden: int = scorer_hidden or max(1, profile.d_model // 2)
    per_token: int = scorer_flops_per_token(profile.d_model, hidden)
    counts = layer_token_counts(plan, profile.n_layers, length)
    total: int = 0
    for stage in plan.stages:
        before: int = length if stage.layer == 0 else counts[stage.layer - 1]
        if counts[stage.layer] < before:
            total += before * per_token
    return total


def flops_prefill(
    profile: ArchProfile,
    length: int,
    schedule: PruneSchedule | None = None,
    scorer_hidden: int | None = None,
) -> int:
    """Prefill FLOPs of one prompt, scorers included.

    Args:
        profile (ArchProfile): Model shape.
        length (int): Prompt length, >= 1.
        schedule (PruneSchedule | None): Pruning stages; none if None.
        scorer_hidden (int | None): Scorer width; `d_model // 2` if None.

    Returns:
        int: FLOPs.
    """
    if length < 1:
        raise ValueError(f"length must be >= 1, got {length}")
    d: int = profile.d_model
    counts = layer_token_counts(schedule, profile.n_layers, length)
    total: int = 2 * length * d * profile.vocab_size
    for tokens in counts:
        total += 2 * profile.layer_macs_per_token * tokens
        total += 4 * tokens * tokens * d
    total += 2 * counts[-1] * d * profile.vocab_size
    return total + scorer_flops(profile, length, schedule, scorer_hidden)


def flops_decode_step(
    profile: ArchProfile, contexts: t.Sequence[int]
) -> int:
    """One decode step attending `contexts[l]` entries in layer `l`."""
    d: int = profile.d_model
    total: int = 4 * d * profile.vocab_size
    for context in contexts:
        total += 2 * profile.layer_macs_per_token + 4 * context * d
    return total


def flops_end2end(  # pylint: disable=too-many-arguments
    profile: ArchProfile,
    length: int,
    gen_len: int = DEFAULT_GEN_LEN,
    schedule: PruneSchedule | None = None,
    scorer_hidden: int | None = None,
    policy: KVCachePolicy | None = None,
) -> int:
    """Prefill plus `gen_len` decode steps.

    Decode step `k` attends the cached prefill entries of each layer plus
    `k` generated ones, capped at the budget plus the new entry when an
    eviction policy is active.

    Args:
        profile (ArchProfile): Model shape.
        length (int): Prompt length.
        gen_len (int): Generated tokens, >= 0.
        schedule (PruneSchedule | None): Pruning stages.
        scorer_hidden (int | None): Scorer width.
        policy (KVCachePolicy | None): Decode-time eviction.

    Returns:
        int: FLOPs.
    """
    if gen_len < 0:
        raise ValueError(f"gen_len must be >= 0, got {gen_len}")
    total: int = flops_prefill(profile, length, schedule, scorer_hidden)
    counts = layer_token_counts(schedule, profile.n_layers, length)
    budget: int | None = None
    if policy is not None and policy.active:
        budget = policy.absolute_budget(counts[-1])
    for step in range(1, gen_len + 1):
        cached = [count + step - 1 for count in counts]
        if budget is not None:
            cached = [min(entries, budget) for entries in cached]
        contexts = [entries + 1 for entries in cached]
        total += flops_decode_step(profile, contexts)
    return total


def memory_estimate(
    profile: ArchProfile,
    length: int,
    schedule: PruneSchedule | None = None,
    precision_bytes: int = WEIGHT_BYTES,
) -> int:
    """Prefill high-water memory in bytes.

    Weights, the key/value cache of the surviving tokens, the 32-bit
    logits of the final rows, and the first layer's MLP activations.

    Args:
        profile (ArchProfile): Model shape.
        length (int): Prompt length.
        schedule (PruneSchedule | None): Pruning stages.
        precision_bytes (int): Bytes per stored value.

    Returns:
        int: Bytes.
    """
    counts = layer_token_counts(schedule, profile.n_layers, length)
    weights: int = profile.parameters * precision_bytes
    cache: int = 2 * sum(counts) * profile.d_kv * precision_bytes
    logits: int = counts[-1] * profile.vocab_size * LOGIT_BYTES
    mlp_width: int = profile.d_ff * (2 if profile.gated_mlp else 1)
    activations: int = counts[0] * mlp_width * precision_bytes
    return weights + cache + logits + activations


def flops_report(  # pylint: disable=too-many-arguments
    profile: ArchProfile,
    length: int,
    schedule: PruneSchedule | None,
    gen_len: int = DEFAULT_GEN_LEN,
    scorer_hidden: int | None = None,
    precision_bytes: int = WEIGHT_BYTES,
) -> FlopsReport:
    """Cost with and without the schedule at one prompt length."""
    prefill = flops_prefill(profile, length)
    prefill_sdtp = flops_prefill(profile, length, schedule, scorer_hidden)
    end2end = flops_end2end(profile, length, gen_len)
    end2end_sdtp = flops_end2end(
        profile, length, gen_len, schedule, scorer_hidden
    )
    memory = memory_estimate(profile, length, None, precision_bytes)
    memory_sdtp = memory_estimate(
        profile, length, schedule, precision_bytes
    )
    return FlopsReport(
        profile=profile.name,
        length=length,
        gen_len=gen_len,
        mean_keep_ratio=mean_keep_ratio(schedule, profile.n_layers),
        prefill_flops=prefill,
        prefill_flops_sdtp=prefill_sdtp,
        scorer_flops=scorer_flops(profile, length, schedule, scorer_hidden),
        end2end_flops=end2end,
        end2end_flops_sdtp=end2end_sdtp,
        memory_bytes=memory,
        memory_bytes_sdtp=memory_sdtp,
        prefill_ratio=prefill_sdtp / prefill,
        end2end_ratio=end2end_sdtp / end2end,
        memory_ratio=memory_sdtp / memory,
        memory_savings=1.0 - memory_sdtp / memory,
    )


def flops_table(
    profile: ArchProfile,
    lengths: t.Sequence[int],
    schedule: PruneSchedule | None,
    gen_len: int = DEFAULT_GEN_LEN,
    scorer_hidden: int | None = None,
) -> FlopsTable:
    """One `FlopsReport` per prompt length."""
    plan = schedule or NO_PRUNING
    return FlopsTable(
        profile=profile.name,
        stage_layers=list(plan.layers),
        stage_ratios=list(plan.ratios),
        rows=[
            flops_report(profile, length, plan, gen_len, scorer_hidden)
            for length in lengths
        ],
    )


def _timed(action: t.Callable[[], t.Any]) -> t.Tuple[float, t.Any]:
    start = time.perf_counter()
    result = action()
    return (time.perf_counter() - start) * 1000.0, result


def bench_toy(  # pylint: disable=too-many-arguments,too-many-locals
    params: ModelParams,
    scorers: StageScorer | None,
    schedule: PruneSchedule,
    length: int,
    gen_len: int = 16,
    repeats: int = 3,
    seed: int = 0,
) -> BenchReport:
    """Median wall-clock timings of full and pruned runs on the toy model.

    Runs on one worker. The pruned and full greedy generations are
    compared position by position as a correctness guard.

    Args:
        params (ModelParams): Base model.
        scorers (StageScorer | None): Keep-score source; seeded random
            scores if None.
        schedule (PruneSchedule): Pruning stages.
        length (int): Prompt length.
        gen_len (int): Generated tokens per end-to-end run.
        repeats (int): Timed repetitions, >= 1.
        seed (int): Prompt and random-scorer seed.

    Returns:
        BenchReport: Medians, spread and speedups.
    """
    if repeats < 1:
        raise ValueError(f"repeats must be >= 1, got {repeats}")
    rng = np.random.default_rng([seed, 0xBE])
    prompt = rng.integers(0, params.config.vocab_size, size=length)
    scorer = scorers or RandomScorer(seed)
    none = KVCachePolicy()

    prefill_full: t.List[float] = []
    prefill_pruned_ms: t.List[float] = []
    e2e_full: t.List[float] = []
    e2e_pruned: t.List[float] = []
    full_tokens: t.List[int] = []
    pruned_tokens: t.List[int] = []
    for _ in range(repeats):
        elapsed, _ = _timed(
            lambda: prefill_pruned(params, prompt, NO_PRUNING)
        )
        prefill_full.append(elapsed)
        elapsed, _ = _timed(
            lambda: prefill_pruned(params, prompt, schedule, scorer)
        )
        prefill_pruned_ms.append(elapsed)
        elapsed, outcome = _timed(
            lambda: compose_sdtp_h2o(
                params, prompt, None, None, none, gen_len
            )
        )
        e2e_full.append(elapsed)
        full_tokens = outcome.tokens
        elapsed, outcome = _timed(
            lambda: compose_sdtp_h2o(
                params, prompt, schedule, scorer, none, gen_len
            )
        )
        e2e_pruned.append(elapsed)
        pruned_tokens = outcome.tokens

    overlap: float = (
        float(np.mean(np.equal(full_tokens, pruned_tokens)))
        if full_tokens
        else 1.0
    )
    medians = [
        float(np.median(values))
        for values in (prefill_full, prefill_pruned_ms, e2e_full, e2e_pruned)
    ]
    LOGGER.info(
        "Bench at length %d: prefill %.1f ms -> %.1f ms",
        length,
        medians[0],
        medians[1],
    )
    return BenchReport(
        length=length,
        gen_len=gen_len,
        repeats=repeats,
        workers=1,
        prefill_ms_full=medians[0],
        prefill_ms_pruned=medians[1],
        end2end_ms_full=medians[2],
        end2end_ms_pruned=medians[3],
        prefill_speedup=medians[0] / medians[1],
        end2end_speedup=medians[2] / medians[3],
        prefill_ms_spread=(
            float(min(prefill_pruned_ms)),
            float(max(prefill_pruned_ms)),
        ),
        output_overlap=overlap,
    )
