"""Gradient-times-input token attribution and sparsity analysis."""

import logging
import typing as t
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
import numpy.typing as npt

from sdtp.core.diffmath import Array, Tape
from sdtp.core.errors import SdtpError
from sdtp.core.models import ModelParams, forward
from sdtp.schemas.config import SaliencyMode
from sdtp.schemas.reports import SparsityProfile, SparsityStats
from sdtp.schemas.schedule import PruneSchedule
from sdtp.services.objectives import lm_cross_entropy

LOGGER: logging.Logger = logging.getLogger(__name__)

IMPORTANCE_THRESHOLD: float = 0.10
DEGENERATE_TARGET: float = 0.5


class LabelLengthError(SdtpError, ValueError):
    """Raised when labels and tokens differ in length."""

    def __init__(self, tokens: int, labels: int) -> None:
        self.tokens = tokens
        self.labels = labels
        super().__init__(f"{labels} labels for {tokens} tokens")


class EmptyMapError(SdtpError, ValueError):
    """Raised when sparsity analysis receives no stages."""

    def __init__(self) -> None:
        super().__init__("sparsity_stats needs at least one stage map")


@dataclass(frozen=True)
class SaliencyMap:
    """Token importance at one stage of one sequence."""

    stage: int
    layer: int
    scores: Array
    mode: SaliencyMode
    normalized: bool = False
    degenerate: bool = False
    raw_min: float | None = None
    raw_max: float | None = None


def token_scores(
    grad: npt.ArrayLike,
    x: npt.ArrayLike,
    mode: SaliencyMode = SaliencyMode.ABS_DOT,
) -> Array:
    """Reduce gradient times input to one score per token.

    Args:
        grad (ArrayLike): `N x d` gradient at the tap.
        x (ArrayLike): `N x d` hidden state at the tap.
        mode (SaliencyMode): `abs-dot`, `dot` or `l1`.

    Returns:
        Array: `N` scores.
    """
    gradient = np.asarray(grad, dtype=np.float64)
    hidden = np.asarray(x, dtype=np.float64)
    if gradient.shape != hidden.shape:
        raise ValueError(
            f"grad shape {gradient.shape} != input shape {hidden.shape}"
        )
    product = gradient * hidden
    if mode == SaliencyMode.L1:
        return np.abs(product).sum(axis=-1)
    dot = product.sum(axis=-1)
    if mode == SaliencyMode.DOT:
        return dot
    return np.abs(dot)


def attribute(
    params: ModelParams,
    tokens: npt.ArrayLike,
    labels: npt.ArrayLike,
    schedule: PruneSchedule,
    mode: SaliencyMode = SaliencyMode.ABS_DOT,
) -> t.List[SaliencyMap]:
    """Saliency of every token at every stage of the schedule.

    One taped, unpruned forward computes the summed next-token
    cross-entropy; one backward yields the gradient at each stage input.

    Args:
        params (ModelParams): Model parameters, never updated.
        tokens (ArrayLike): Input ids.
        labels (ArrayLike): Next-token ids, same length, or one shorter
            when the last token has no successor.
        schedule (PruneSchedule): Stages whose inputs are attributed.
        mode (SaliencyMode): Per-token reduction.

    Returns:
        List[SaliencyMap]: Raw (unnormalized) maps, one per stage.
    """
    ids = np.asarray(tokens, dtype=np.int64)
    targets = np.asarray(labels, dtype=np.int64)
    include: np.ndarray | None = None
    if targets.shape[0] == ids.shape[0] - 1:
        include = np.arange(ids.shape[0]) < targets.shape[0]
        targets = np.append(targets, 0)
    elif ids.shape != targets.shape:
        raise LabelLengthError(ids.shape[0], targets.shape[0])
    tape = Tape(dtype=params.dtype)
    result = forward(params, ids, tap_layers=schedule.layers, tape=tape)
    loss = lm_cross_entropy(
        result.logits, targets, include, reduction="sum"
    )
    tape.backward(loss)
    return [
        SaliencyMap(
            stage=index,
            layer=layer,
            scores=token_scores(
                result.taps[layer].grad, result.taps[layer].values, mode
            ),
            mode=mode,
        )
        for index, layer in enumerate(schedule.layers)
    ]


def normalize(saliency: SaliencyMap) -> SaliencyMap:
    """Per-sequence min-max scaling to [0, 1].

    A constant map cannot be scaled; it becomes all 0.5 and is flagged
    degenerate.

    Args:
        saliency (SaliencyMap): Raw or normalized map.

    Returns:
        SaliencyMap: Normalized map.
    """
    if saliency.normalized:
        return saliency
    scores = saliency.scores
    low, high = float(scores.min()), float(scores.max())
    if high - low <= 0.0:
        LOGGER.debug("stage %d: constant saliency", saliency.stage)
        return replace(
            saliency,
            scores=np.full_like(scores, DEGENERATE_TARGET),
            normalized=True,
            degenerate=True,
            raw_min=low,
            raw_max=high,
        )
    return replace(
        saliency,
        scores=(scores - low) / (high - low),
        normalized=True,
        raw_min=low,
        raw_max=high,
    )


def sparsity_stats(
    maps: t.Sequence[SaliencyMap], threshold: float = IMPORTANCE_THRESHOLD
) -> SparsityStats:
    """Important and redundant tokens per stage, plus persistence.

    A token is important when its score exceeds `threshold` times the
    stage maximum. `persistence[s][u]` is the share of tokens redundant
    at stage `s` that are also redundant at stage `u`; None when stage
    `s` has no redundant token.

    Args:
        maps (Sequence[SaliencyMap]): One map per stage, same sequence.
        threshold (float): Fraction of the maximum.

    Returns:
        SparsityStats: Counts and persistence matrix.
    """
    if not maps:
        raise EmptyMapError()
    redundant_sets: t.List[np.ndarray] = []
    important: t.List[int] = []
    for saliency in maps:
        scores = saliency.scores
        is_important = scores > threshold * float(scores.max())
        important.append(int(is_important.sum()))
        redundant_sets.append(~is_important)

    persistence: t.List[t.List[float | None]] = []
    for source in redundant_sets:
        size = int(source.sum())
        persistence.append(
            [
                None if size == 0 else float((source & other).sum() / size)
                for other in redundant_sets
            ]
        )
    length: int = int(maps[0].scores.shape[0])
    return SparsityStats(
        threshold=threshold,
        length=length,
        stage_layers=[saliency.layer for saliency in maps],
        important=important,
        redundant=[length - count for count in important],
        persistence=persistence,
    )


def sparsity_profile(stats: t.Sequence[SparsityStats]) -> SparsityProfile:
    """Mean important-token share per stage over many sequences."""
    if not stats:
        raise EmptyMapError()
    fractions = np.array(
        [[count / item.length for count in item.important] for item in stats]
    )
    return SparsityProfile(
        threshold=stats[0].threshold,
        windows=len(stats),
        stage_layers=stats[0].stage_layers,
        important_fraction=[float(v) for v in fractions.mean(axis=0)],
    )


class SaliencyService:
    """Attribution over batches against one frozen model."""

    def __init__(
        self,
        params: ModelParams,
        schedule: PruneSchedule,
        mode: SaliencyMode = SaliencyMode.ABS_DOT,
        workers: int = 1,
    ) -> None:
        """Initialize SaliencyService.

        Args:
            params (ModelParams): Model parameters.
            schedule (PruneSchedule): Stages to attribute.
            mode (SaliencyMode): Per-token reduction.
            workers (int): Parallel attribution threads.
        """
        self.params = params
        self.schedule = schedule
        self.mode = mode
        self.workers = workers

    def attribute_window(self, window: npt.ArrayLike) -> t.List[SaliencyMap]:
        """Raw maps of one `length + 1` token window."""
        ids = np.asarray(window, dtype=np.int64)
        return attribute(
            self.params, ids[:-1], ids[1:], self.schedule, self.mode
        )

    def attribute_batch(
        self, windows: npt.ArrayLike
    ) -> t.List[t.List[SaliencyMap]]:
        """Raw maps of every window, in input order."""
        batch = list(np.asarray(windows, dtype=np.int64))
        if not batch:
            raise ValueError("attribute_batch needs at least one window")
        if self.workers == 1:
            return [self.attribute_window(window) for window in batch]
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            return list(pool.map(self.attribute_window, batch))

    def targets(
        self, windows: npt.ArrayLike
    ) -> t.List[t.List[SaliencyMap]]:
        """Normalized supervision targets of every window."""
        return [
            [normalize(saliency) for saliency in maps]
            for maps in self.attribute_batch(windows)
        ]

    def profile(
        self,
        windows: npt.ArrayLike,
        threshold: float = IMPORTANCE_THRESHOLD,
    ) -> SparsityProfile:
        """Sparsity profile over many windows."""
        return sparsity_profile(
            [
                sparsity_stats(maps, threshold)
                for maps in self.attribute_batch(windows)
            ]
        )
