"""Token scorers, keep-mask sampling and top-k selection."""

import hashlib
import logging
import math
import typing as t
from dataclasses import dataclass, field

import numpy as np
import numpy.typing as npt

from sdtp.core import diffmath as dm
from sdtp.core.diffmath import Array, DiffTensor, Tape
from sdtp.core.errors import SdtpError
from sdtp.schemas.schedule import PruneSchedule, PruneStage

LOGGER: logging.Logger = logging.getLogger(__name__)

SINK_COUNT: int = 4
LOCAL_FRACTION: float = 0.10
GUMBEL_EPS: float = 1e-20
SCORER_INIT_STD: float = 0.02
# Scorer cost per token must stay under this share of the whole
# model's cost per token
SCORER_BUDGET: float = 0.01


class ScheduleRangeError(SdtpError, ValueError):
    """Raised when a schedule places a stage past the last layer."""

    max_stages: int

    def __init__(self, max_stages: int, message: str | None = None) -> None:
        """Initialize ScheduleRangeError.

        Args:
            max_stages (int): Largest stage count that fits.
            message (str | None): Optional override message.
        """
        self.max_stages = max_stages
        super().__init__(
            message
            or f"schedule does not fit the model; at most {max_stages} "
            "stages are feasible"
        )


class NonFiniteInputError(SdtpError, ValueError):
    """Raised when a scorer receives NaN or infinite hidden states."""

    def __init__(self, what: str) -> None:
        self.what = what
        super().__init__(f"non-finite values in {what}")


class MaskLengthError(SdtpError, ValueError):
    """Raised when a keep vector does not match the sequence length."""

    def __init__(self, expected: int, actual: int) -> None:
        """Initialize MaskLengthError.

        Args:
            expected (int): Sequence length.
            actual (int): Length of the offending mask.
        """
        self.expected = expected
        self.actual = actual
        super().__init__(f"mask length {actual} != sequence length {expected}")


class ScorerBudgetError(SdtpError, ValueError):
    """Raised when a scorer would cost more than its FLOPs budget."""

    def __init__(self, share: float) -> None:
        self.share = share
        super().__init__(
            f"scorer costs {share:.2%} of the model's per-token FLOPs, "
            f"limit is {SCORER_BUDGET:.0%}"
        )


def keep_count(ratio: float, length: int) -> int:
    """Number of tokens a cumulative keep ratio leaves alive.

    Args:
        ratio (float): Cumulative keep ratio.
        length (int): Original sequence length.

    Returns:
        int: `ceil(ratio * length)`, immune to float noise like 0.9*100.
    """
    return int(math.ceil(round(ratio * length, 9)))


def build_schedule(  # pylint: disable=too-many-arguments
    stages: int,
    ratio: float,
    start_layer: int,
    layer_step: int,
    n_layers: int,
    sink_count: int = SINK_COUNT,
    local_fraction: float = LOCAL_FRACTION,
) -> PruneSchedule:
    """Geometric schedule: stage i at `start + i*step` keeps `ratio^(i+1)`.

    Args:
        stages (int): Stage count.
        ratio (float): Per-stage keep ratio.
        start_layer (int): Layer of the first stage.
        layer_step (int): Layers between consecutive stages.
        n_layers (int): Depth of the model the schedule targets.
        sink_count (int): Leading tokens that are never pruned.
        local_fraction (float): Trailing share that is never pruned.

    Returns:
        PruneSchedule: The schedule.
    """
    if layer_step < 1:
        raise ValueError(f"layer_step must be >= 1, got {layer_step}")
    max_stages: int = max(0, (n_layers - 1 - start_layer) // layer_step + 1)
    if stages > max_stages:
        raise ScheduleRangeError(max_stages)
    return PruneSchedule(
        stages=tuple(
            PruneStage(
                layer=start_layer + index * layer_step,
                keep_ratio=ratio ** (index + 1),
            )
            for index in range(stages)
        ),
        sink_count=sink_count,
        local_fraction=local_fraction,
    )


def check_schedule(schedule: PruneSchedule, n_layers: int) -> None:
    """Reject schedules with stages at or past `n_layers`."""
    for index, stage in enumerate(schedule.stages):
        if stage.layer >= n_layers:
            raise ScheduleRangeError(
                index,
                f"stage {index} at layer {stage.layer} is beyond the "
                f"model's {n_layers} layers",
            )


def protected_set(
    length: int,
    sink_count: int = SINK_COUNT,
    local_fraction: float = LOCAL_FRACTION,
) -> npt.NDArray[np.int64]:
    """Indices that are never pruned: sink tokens plus the local tail.

    Args:
        length (int): Sequence length.
        sink_count (int): Leading tokens kept.
        local_fraction (float): Trailing share kept.

    Returns:
        NDArray[int64]: Sorted unique indices.
    """
    sinks = np.arange(min(sink_count, length))
    tail = np.arange(length - keep_count(local_fraction, length), length)
    return np.union1d(sinks, tail).astype(np.int64)


def select_topk(
    scores: npt.ArrayLike,
    ratio: float,
    protected: npt.ArrayLike,
    eligible: npt.ArrayLike | None = None,
) -> npt.NDArray[np.int64]:
    """Inference-time selection of the surviving tokens.

    Keeps `max(ceil(ratio*N), |protected|)` indices: protected ones
    first, then the highest scores among the remaining eligible ones,
    earlier index winning ties.

    Args:
        scores (ArrayLike): One keep score per token.
        ratio (float): Cumulative keep ratio.
        protected (ArrayLike): Indices that must survive.
        eligible (ArrayLike | None): Boolean vector of tokens still alive;
            defaults to all of them.

    Returns:
        NDArray[int64]: Kept indices in ascending order.
    """
    values = np.asarray(scores, dtype=np.float64)
    length: int = values.shape[0]
    alive = (
        np.ones(length, dtype=bool)
        if eligible is None
        else np.asarray(eligible, dtype=bool)
    )
    forced = np.zeros(length, dtype=bool)
    forced[np.asarray(protected, dtype=np.int64)] = True
    target: int = max(keep_count(ratio, length), int(forced.sum()))
    target = min(target, int((alive | forced).sum()))

    candidates = np.flatnonzero(alive & ~forced)
    order = np.lexsort((candidates, -values[candidates]))
    extra = candidates[order[: max(0, target - int(forced.sum()))]]
    return np.sort(np.concatenate([np.flatnonzero(forced), extra])).astype(
        np.int64
    )


@dataclass
class TokenMask:
    """Per-stage keep vectors of one sequence; each implies the previous."""

    length: int
    protected: npt.NDArray[np.int64]
    history: t.List[npt.NDArray[np.bool_]] = field(default_factory=list)
    layers: t.List[int] = field(default_factory=list)

    @classmethod
    def full(
        cls, length: int, protected: npt.NDArray[np.int64]
    ) -> "TokenMask":
        """Mask with no stage applied yet."""
        return cls(length=length, protected=protected)

    def latest(self) -> npt.NDArray[np.bool_]:
        """Keep vector of the most recent stage (all True before any)."""
        if not self.history:
            return np.ones(self.length, dtype=bool)
        return self.history[-1]

    def kept(self, stage: int) -> npt.NDArray[np.int64]:
        """Indices alive after `stage`."""
        return np.flatnonzero(self.history[stage]).astype(np.int64)

    def keep_at(self, layer: int) -> npt.NDArray[np.bool_] | None:
        """Keep vector in effect inside `layer`, None before any stage."""
        current: npt.NDArray[np.bool_] | None = None
        for stage_layer, vector in zip(self.layers, self.history):
            if stage_layer <= layer:
                current = vector
        return current


def propagate_mask(
    prev: TokenMask, stage_vector: npt.ArrayLike, layer: int
) -> TokenMask:
    """Append a stage, AND-ed with the previous one.

    Args:
        prev (TokenMask): Mask so far.
        stage_vector (ArrayLike): Boolean keep decisions of the new stage.
        layer (int): Layer the stage runs before.

    Returns:
        TokenMask: A new mask with the stage appended.
    """
    vector = np.asarray(stage_vector, dtype=bool)
    if vector.shape != (prev.length,):
        raise MaskLengthError(prev.length, int(vector.size))
    return TokenMask(
        length=prev.length,
        protected=prev.protected,
        history=[*prev.history, prev.latest() & vector],
        layers=[*prev.layers, layer],
    )


class StageScorer(t.Protocol):
    """Anything that assigns keep scores to the rows alive at a stage."""

    def stage_scores(
        self, stage: int, hidden: Array, positions: npt.NDArray[np.int64]
    ) -> Array:
        """Score rows of `hidden`; higher means more worth keeping."""


@dataclass
class ScorerParams:
    """Per-stage two-layer MLP scorers, `d_model -> d_hidden -> 2`."""

    arrays: t.Dict[str, Array]
    n_stages: int
    d_model: int
    d_hidden: int

    def stage(self, index: int) -> t.Dict[str, Array]:
        """Arrays of one stage keyed by short name (w1, b1, w2, b2)."""
        prefix: str = f"{index}."
        return {
            name[len(prefix):]: values
            for name, values in self.arrays.items()
            if name.startswith(prefix)
        }

    def checksum(self) -> str:
        """SHA-256 over names and raw bytes, in name order."""
        digest = hashlib.sha256()
        for name in sorted(self.arrays):
            digest.update(name.encode())
            digest.update(np.ascontiguousarray(self.arrays[name]).tobytes())
        return digest.hexdigest()

    def watch(
        self, tape: Tape, trainable: bool = True
    ) -> t.Dict[str, DiffTensor]:
        """Put every array on `tape`."""
        return {
            name: tape.leaf(values, requires_grad=trainable, name=name)
            for name, values in self.arrays.items()
        }

    def stage_scores(
        self, stage: int, hidden: Array, positions: npt.NDArray[np.int64]
    ) -> Array:
        """Keep-logit margins of rows at a stage, without recording."""
        del positions
        tape = Tape(dtype=hidden.dtype, grad_enabled=False)
        weights = {
            name: tape.constant(values)
            for name, values in self.stage(stage).items()
        }
        logits = score_tokens(tape.constant(hidden), weights)
        return keep_margin(logits).values


def init_scorers(
    n_stages: int,
    d_model: int,
    seed: int,
    d_hidden: int | None = None,
    model_flops: int | None = None,
    dtype: npt.DTypeLike = np.float32,
) -> ScorerParams:
    """Scaled-normal init of one scorer per stage.

    Args:
        n_stages (int): Number of schedule stages.
        d_model (int): Hidden width of the base model.
        seed (int): Initialization seed.
        d_hidden (int | None): Scorer width; defaults to `d_model // 2`.
        model_flops (int | None): Per-token FLOPs of the base model
            without attention; when given, the scorer must stay under 1%
            of it.
        dtype (DTypeLike): Storage dtype.

    Returns:
        ScorerParams: Fresh scorers.
    """
    hidden: int = d_hidden or max(1, d_model // 2)
    if model_flops is not None:
        share: float = scorer_flops_per_token(d_model, hidden) / model_flops
        if share >= SCORER_BUDGET:
            raise ScorerBudgetError(share)
    rng = np.random.default_rng([seed, 1])
    arrays: t.Dict[str, Array] = {}
    for index in range(n_stages):
        arrays[f"{index}.w1"] = rng.normal(
            0.0, SCORER_INIT_STD, (d_model, hidden)
        ).astype(dtype)
        arrays[f"{index}.b1"] = np.zeros(hidden, dtype=dtype)
        arrays[f"{index}.w2"] = rng.normal(
            0.0, SCORER_INIT_STD, (hidden, 2)
        ).astype(dtype)
        arrays[f"{index}.b2"] = np.zeros(2, dtype=dtype)
    return ScorerParams(
        arrays=arrays, n_stages=n_stages, d_model=d_model, d_hidden=hidden
    )


def scorer_flops_per_token(d_model: int, d_hidden: int) -> int:
    """FLOPs of one scorer on one token (2 per multiply-accumulate)."""
    return 2 * (d_model * d_hidden + d_hidden * 2)


def score_tokens(
    hidden: DiffTensor, weights: t.Mapping[str, DiffTensor]
) -> DiffTensor:
    """Keep/drop logits `MLP(GELU(MLP(x)))` for every row.

    Args:
        hidden (DiffTensor): `N x d_model` stage input.
        weights (Mapping[str, DiffTensor]): One stage's w1, b1, w2, b2.

    Returns:
        DiffTensor: `N x 2` logits, column 0 keeps.
    """
    if not np.all(np.isfinite(hidden.values)):
        raise NonFiniteInputError("scorer input")
    inner = dm.gelu(dm.add(dm.matmul(hidden, weights["w1"]), weights["b1"]))
    return dm.add(dm.matmul(inner, weights["w2"]), weights["b2"])


def keep_margin(logits: DiffTensor) -> DiffTensor:
    """Keep-logit minus drop-logit, monotone in the keep probability."""
    return dm.sub(dm.select_column(logits, 0), dm.select_column(logits, 1))


def keep_probability(logits: DiffTensor) -> DiffTensor:
    """Softmax over the two logits, keep component."""
    return dm.select_column(dm.softmax_rows(logits), 0)


def force_protected(
    keep: DiffTensor, protected: npt.ArrayLike
) -> DiffTensor:
    """Set protected entries to 1 with no gradient through them."""
    forced = np.zeros(keep.shape, dtype=keep.values.dtype)
    forced[np.asarray(protected, dtype=np.int64)] = 1.0
    return dm.add_constant(dm.mul_constant(keep, 1.0 - forced), forced)


def sample_mask(
    logits: DiffTensor,
    temperature: float,
    protected: npt.ArrayLike,
    rng: np.random.Generator,
) -> DiffTensor:
    """Straight-through Gumbel-Softmax keep decisions.

    Forward values are hard 0/1; the gradient is that of the soft
    Gumbel-Softmax keep component. Protected entries are forced to 1.

    Args:
        logits (DiffTensor): `N x 2` scorer output.
        temperature (float): Softmax temperature, > 0.
        protected (ArrayLike): Indices forced to keep.
        rng (Generator): Noise source.

    Returns:
        DiffTensor: Length-`N` keep vector.
    """
    if temperature <= 0.0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    uniform = rng.random(logits.shape)
    gumbel = -np.log(-np.log(uniform + GUMBEL_EPS) + GUMBEL_EPS)
    soft = dm.softmax_rows(
        dm.scale(dm.add_constant(logits, gumbel), 1.0 / temperature)
    )
    hard = (soft.values[:, 0] >= soft.values[:, 1]).astype(np.float64)
    keep = dm.straight_through(dm.select_column(soft, 0), hard)
    return force_protected(keep, protected)


class RandomScorer:
    """Uniform random keep scores, reproducible per seed and stream."""

    def __init__(self, seed: int, stream: int = 0) -> None:
        self.seed = seed
        self.stream = stream

    def stage_scores(
        self, stage: int, hidden: Array, positions: npt.NDArray[np.int64]
    ) -> Array:
        """Random scores for the alive rows."""
        del positions
        rng = np.random.default_rng(
            [self.seed, self.stream, stage, hidden.shape[0]]
        )
        return rng.random(hidden.shape[0])


class OracleScorer:
    """Keep scores read from precomputed per-stage saliency."""

    def __init__(self, stage_maps: t.Sequence[npt.ArrayLike]) -> None:
        """Initialize OracleScorer.

        Args:
            stage_maps (Sequence[ArrayLike]): Per stage, one score per
                ORIGINAL position.
        """
        self.stage_maps = [np.asarray(m, dtype=np.float64) for m in stage_maps]

    def stage_scores(
        self, stage: int, hidden: Array, positions: npt.NDArray[np.int64]
    ) -> Array:
        """Saliency of the alive rows at their original positions."""
        del hidden
        return self.stage_maps[stage][positions]
