"""Training losses for the token scorers."""

import logging
import math
import typing as t

import numpy as np
import numpy.typing as npt

from sdtp.core import diffmath as dm
from sdtp.core.diffmath import DiffTensor
from sdtp.core.errors import SdtpError
from sdtp.schemas.config import LossWeights

LOGGER: logging.Logger = logging.getLogger(__name__)

PAIR_BUDGET: int = 4096


class EmptySelectionError(SdtpError, ValueError):
    """Raised when a loss has no position left to average over."""

    def __init__(self, what: str) -> None:
        self.what = what
        super().__init__(f"{what}: no positions included")


class NonFiniteLossError(SdtpError, ArithmeticError):
    """Raised when a loss component is NaN or infinite."""

    component: str

    def __init__(self, component: str, value: float) -> None:
        """Initialize NonFiniteLossError.

        Args:
            component (str): Name of the offending term.
            value (float): Its value.
        """
        self.component = component
        self.value = value
        super().__init__(f"loss component {component!r} is {value}")


class MseTerm(t.NamedTuple):
    """Alignment loss of one stage."""

    loss: DiffTensor
    empty: bool


class RankTerm(t.NamedTuple):
    """Ranking loss of one stage and the pairs it used."""

    loss: DiffTensor
    pairs: int


def _included(length: int, include: npt.ArrayLike | None) -> np.ndarray:
    if include is None:
        return np.arange(length)
    mask = np.asarray(include, dtype=bool)
    if mask.shape != (length,):
        raise ValueError(
            f"include mask has {mask.size} entries, need {length}"
        )
    return np.flatnonzero(mask)


def mse_loss(
    keep_prob: DiffTensor,
    target: npt.ArrayLike,
    include: npt.ArrayLike | None = None,
) -> MseTerm:
    """Mean squared gap between keep probabilities and saliency targets.

    Args:
        keep_prob (DiffTensor): Length-`N` keep probabilities.
        target (ArrayLike): Normalized saliency, length `N`.
        include (ArrayLike | None): Positions that are supervised.

    Returns:
        MseTerm: The loss, zero and flagged empty when nothing is included.
    """
    goal = np.asarray(target)
    if goal.shape != keep_prob.shape:
        raise ValueError(
            f"keep_prob has shape {keep_prob.shape}, target {goal.shape}"
        )
    rows = _included(goal.shape[0], include)
    if rows.size == 0:
        LOGGER.debug("mse_loss: no supervised positions")
        return MseTerm(keep_prob.tape.constant(0.0), True)
    picked = dm.gather_rows(keep_prob, rows)
    gap = dm.add_constant(picked, -goal[rows])
    return MseTerm(dm.mean(dm.square(gap)), False)


def ranking_loss_stage(
    margin: DiffTensor,
    target: npt.ArrayLike,
    include: npt.ArrayLike | None = None,
    pair_budget: int = PAIR_BUDGET,
    rng: np.random.Generator | None = None,
) -> RankTerm:
    """Pairwise logistic ranking loss of one stage.

    Sums `log(1 + exp(-(m_i - m_j) * sign(s_i - s_j)))` over pairs
    `i < j` with untied targets. Above `pair_budget` pairs, a uniform
    subsample is used and scaled by `total / budget`.

    Args:
        margin (DiffTensor): Length-`N` keep-logit margins.
        target (ArrayLike): Saliency, length `N`.
        include (ArrayLike | None): Positions that are supervised.
        pair_budget (int): Most pairs evaluated.
        rng (Generator | None): Subsampling source.

    Returns:
        RankTerm: The loss and the number of pairs evaluated.
    """
    goal = np.asarray(target, dtype=np.float64)
    rows = _included(goal.shape[0], include)
    upper, lower = np.triu_indices(rows.size, k=1)
    first, second = rows[upper], rows[lower]
    signs = np.sign(goal[first] - goal[second])
    untied = signs != 0
    first, second, signs = first[untied], second[untied], signs[untied]
    total_pairs: int = int(signs.size)
    if total_pairs == 0:
        return RankTerm(margin.tape.constant(0.0), 0)

    factor: float = 1.0
    if total_pairs > pair_budget:
        generator = rng or np.random.default_rng(0)
        chosen = np.sort(
            generator.choice(total_pairs, size=pair_budget, replace=False)
        )
        first, second, signs = first[chosen], second[chosen], signs[chosen]
        factor = total_pairs / pair_budget

    diffs = dm.sub(
        dm.gather_rows(margin, first), dm.gather_rows(margin, second)
    )
    loss = dm.total(dm.softplus(dm.mul_constant(diffs, -signs)))
    return RankTerm(dm.scale(loss, factor), int(signs.size))


def ranking_loss_total(terms: t.Sequence[RankTerm]) -> DiffTensor:
    """Sum of per-stage ranking losses."""
    if not terms:
        raise ValueError("ranking_loss_total needs at least one stage")
    loss = terms[0].loss
    for term in terms[1:]:
        loss = dm.add(loss, term.loss)
    return loss


def lm_cross_entropy(
    logits: DiffTensor,
    labels: npt.ArrayLike,
    include: npt.ArrayLike | None = None,
    reduction: t.Literal["mean", "sum"] = "mean",
) -> DiffTensor:
    """Next-token negative log-likelihood over included positions.

    Args:
        logits (DiffTensor): `N x vocab` logits.
        labels (ArrayLike): Target id of every position.
        include (ArrayLike | None): Positions that count.
        reduction (str): `mean` or `sum`.

    Returns:
        DiffTensor: Scalar loss.
    """
    targets = np.asarray(labels, dtype=np.int64)
    if targets.shape[0] != logits.shape[0]:
        raise ValueError(
            f"{targets.shape[0]} labels for {logits.shape[0]} positions"
        )
    rows = _included(targets.shape[0], include)
    if rows.size == 0:
        raise EmptySelectionError("lm_cross_entropy")
    picked = dm.pick(dm.log_softmax_rows(logits), rows, targets[rows])
    nll = dm.scale(dm.total(picked), -1.0)
    if reduction == "sum":
        return nll
    return dm.scale(nll, 1.0 / rows.size)


def ratio_loss(
    keep_probs: t.Sequence[DiffTensor], target_ratios: t.Sequence[float]
) -> DiffTensor:
    """Squared gap between mean soft keep and target ratio, summed.

    Args:
        keep_probs (Sequence[DiffTensor]): Cumulative soft keep per stage.
        target_ratios (Sequence[float]): Cumulative keep ratio per stage.

    Returns:
        DiffTensor: Scalar loss.
    """
    if len(keep_probs) != len(target_ratios) or not keep_probs:
        raise ValueError("ratio_loss needs one target ratio per stage")
    terms = [
        dm.square(dm.add_constant(dm.mean(keep), -ratio))
        for keep, ratio in zip(keep_probs, target_ratios)
    ]
    loss = terms[0]
    for term in terms[1:]:
        loss = dm.add(loss, term)
    return loss


def total_loss(
    cls: DiffTensor,
    mse: DiffTensor,
    rank: DiffTensor,
    ratio: DiffTensor | None = None,
    weights: LossWeights | None = None,
) -> DiffTensor:
    """Weighted sum of the loss components.

    Args:
        cls (DiffTensor): Language-model cross-entropy.
        mse (DiffTensor): Saliency alignment loss.
        rank (DiffTensor): Ranking loss.
        ratio (DiffTensor | None): Optional keep-ratio constraint.
        weights (LossWeights | None): Per-term weights, all 1 by default.

    Returns:
        DiffTensor: Scalar total.
    """
    weights = weights or LossWeights()
    components: t.List[t.Tuple[str, DiffTensor, float]] = [
        ("cls", cls, weights.cls),
        ("mse", mse, weights.mse),
        ("rank", rank, weights.rank),
    ]
    if ratio is not None:
        components.append(("ratio", ratio, weights.ratio))
    for name, value, _ in components:
        number = float(value.values)
        if not math.isfinite(number):
            raise NonFiniteLossError(name, number)

    loss: DiffTensor | None = None
    for _, value, weight in components:
        term = value if weight == 1.0 else dm.scale(value, weight)
        loss = term if loss is None else dm.add(loss, term)
    assert loss is not None
    return loss
