"""Pruned prefill followed by budgeted decoding or scoring."""

import logging
import typing as t
from dataclasses import dataclass, field

import numpy as np
import numpy.typing as npt
from scipy.special import log_softmax, softmax

from sdtp.core.diffmath import Array
from sdtp.core.kv_cache import KVCache, KVCachePolicy, bind_budget
from sdtp.core.models import ModelParams, decode_step, prefill_pruned
from sdtp.core.pruning import StageScorer
from sdtp.schemas.reports import GenerationReport, TraceRow
from sdtp.schemas.schedule import PruneSchedule

LOGGER: logging.Logger = logging.getLogger(__name__)

NO_PRUNING: PruneSchedule = PruneSchedule(stages=())


@dataclass
class GenerationOutcome:
    """Generated ids, cache-size trace and the summary report."""

    tokens: t.List[int]
    trace: t.List[TraceRow]
    report: GenerationReport
    cache: KVCache


def next_token(
    logits: Array, temperature: float, rng: np.random.Generator
) -> int:
    """Greedy pick at temperature 0, otherwise a softmax sample.

    Args:
        logits (Array): Vocabulary logits.
        temperature (float): Sampling temperature, >= 0.
        rng (Generator): Sampling source.

    Returns:
        int: Chosen token id.
    """
    if temperature < 0.0:
        raise ValueError(f"temperature must be >= 0, got {temperature}")
    scores = np.asarray(logits, dtype=np.float64)
    if temperature == 0.0:
        return int(np.argmax(scores))
    probs = softmax(scores / temperature)
    return int(rng.choice(probs.shape[0], p=probs))


def _trace(step: int, cache: KVCache) -> t.List[TraceRow]:
    return [
        TraceRow(step=step, layer=layer, entries=entries)
        for layer, entries in enumerate(cache.sizes())
    ]


def decode_text(tokens: t.Sequence[int]) -> str:
    """Byte ids as text, undecodable bytes replaced."""
    return bytes(tokens).decode("utf-8", errors="replace")


def compose_sdtp_h2o(  # pylint: disable=too-many-arguments,too-many-locals
    params: ModelParams,
    tokens: npt.ArrayLike,
    schedule: PruneSchedule | None,
    scorers: StageScorer | None,
    policy: KVCachePolicy,
    gen_len: int,
    temperature: float = 0.0,
    seed: int = 0,
) -> GenerationOutcome:
    """Generate after a pruned prefill, evicting cache entries per policy.

    Step 0 of the trace is the cache right after prefill (and the first
    eviction); step `k` is the cache after the k-th decode step.

    Args:
        params (ModelParams): Base model.
        tokens (ArrayLike): Prompt ids.
        schedule (PruneSchedule | None): Prefill pruning; none if None.
        scorers (StageScorer | None): Keep-score source for the schedule.
        policy (KVCachePolicy): Decode-time eviction.
        gen_len (int): Tokens to generate.
        temperature (float): 0 for greedy decoding.
        seed (int): Sampling seed.

    Returns:
        GenerationOutcome: Tokens, trace and report.
    """
    if gen_len < 0:
        raise ValueError(f"gen_len must be >= 0, got {gen_len}")
    prompt = np.asarray(tokens, dtype=np.int64)
    plan = schedule if schedule is not None else NO_PRUNING
    rng = np.random.default_rng([seed, 0x6E])

    prefill = prefill_pruned(params, prompt, plan, scorers)
    cache = prefill.cache
    kept_prefill: int = len(cache.layers[-1])
    bind_budget(cache, policy)
    trace = _trace(0, cache)

    generated: t.List[int] = []
    logits: Array = prefill.logits[-1]
    for step in range(1, gen_len + 1):
        token = next_token(logits, temperature, rng)
        generated.append(token)
        if step == gen_len:
            break
        logits, cache = decode_step(params, cache, token, policy)
        trace.extend(_trace(step, cache))

    LOGGER.info(
        "Generated %d tokens from %d prompt tokens (%d kept at prefill)",
        len(generated),
        prompt.shape[0],
        kept_prefill,
    )
    report = GenerationReport(
        prompt_length=int(prompt.shape[0]),
        kept_prefill=kept_prefill,
        policy=policy.kind.value,
        budget=cache.budget,
        generated=generated,
        text=decode_text(generated),
        stage_kept=[
            prefill.mask.kept(stage).tolist()
            for stage in range(len(plan.stages))
        ],
        max_cache_entries=max(row.entries for row in trace),
    )
    return GenerationOutcome(
        tokens=generated, trace=trace, report=report, cache=cache
    )


@dataclass
class EvictedScore:
    """Summed tail NLL of one window decoded under eviction."""

    nll: float
    tokens: int
    budget: int | None
    max_cache_entries: int
    stage_counts: t.List[int] = field(default_factory=list)


def decode_tail_nll(  # pylint: disable=too-many-arguments
    params: ModelParams,
    inputs: npt.ArrayLike,
    labels: npt.ArrayLike,
    tail_start: int,
    schedule: PruneSchedule | None,
    scorers: StageScorer | None,
    policy: KVCachePolicy,
) -> EvictedScore:
    """Score the tail of a window token by token under cache eviction.

    The prefix before `tail_start` is prefilled (pruned when a schedule
    is given); every tail token is then fed through `decode_step` with
    the true previous token, so each prediction sees only the entries
    the policy kept.

    Args:
        params (ModelParams): Base model.
        inputs (ArrayLike): Window inputs.
        labels (ArrayLike): Next-token id of every input position.
        tail_start (int): First scored position, >= 1.
        schedule (PruneSchedule | None): Prefill pruning; none if None.
        scorers (StageScorer | None): Keep-score source for the schedule.
        policy (KVCachePolicy): Decode-time eviction.

    Returns:
        EvictedScore: Tail NLL in nats, the largest cache seen and the
            prefix kept counts per stage.
    """
    ids = np.asarray(inputs, dtype=np.int64)
    targets = np.asarray(labels, dtype=np.int64)
    if not 1 <= tail_start < ids.shape[0]:
        raise ValueError(
            f"tail_start must lie in [1, {ids.shape[0]}), got {tail_start}"
        )
    plan = schedule if schedule is not None else NO_PRUNING
    prefill = prefill_pruned(params, ids[:tail_start], plan, scorers)
    cache = prefill.cache
    bind_budget(cache, policy)
    largest: int = max(cache.sizes())
    nll: float = 0.0
    for position in range(tail_start, ids.shape[0]):
        logits, cache = decode_step(params, cache, int(ids[position]), policy)
        largest = max(largest, *cache.sizes())
        log_probs = log_softmax(np.asarray(logits, dtype=np.float64))
        nll -= float(log_probs[targets[position]])
    return EvictedScore(
        nll=nll,
        tokens=int(ids.shape[0] - tail_start),
        budget=cache.budget,
        max_cache_entries=largest,
        stage_counts=list(prefill.stage_counts),
    )
