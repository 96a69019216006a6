import itertools
import math

import numpy as np
import pytest

from sdtp.core.diffmath import Tape, finite_diff_check
from sdtp.schemas.config import LossWeights
from sdtp.services.objectives import (
    EmptySelectionError,
    NonFiniteLossError,
    lm_cross_entropy,
    mse_loss,
    ranking_loss_stage,
    ranking_loss_total,
    ratio_loss,
    total_loss,
)


def _vector(values):
    return Tape(dtype=np.float64).leaf(values)


@pytest.mark.parametrize(
    "keep, target, expected",
    [
        ([0.2, 0.7], [0.2, 0.7], 0.0),
        ([1.0, 0.0], [0.0, 1.0], 1.0),
        ([0.5, 0.5], [0.0, 1.0], 0.25),
    ],
)
def test_mse_loss(keep, target, expected):
    term = mse_loss(_vector(keep), target)
    assert term.loss.item() == pytest.approx(expected)
    assert not term.empty


def test_mse_loss_with_nothing_included_is_zero():
    term = mse_loss(_vector([0.1, 0.9]), [1.0, 0.0], include=[False, False])
    assert term.loss.item() == 0.0
    assert term.empty


def test_ranking_loss_concordant_and_discordant_pairs():
    concordant = ranking_loss_stage(_vector([2.0, 0.0]), [1.0, 0.0])
    assert concordant.loss.item() == pytest.approx(
        math.log1p(math.exp(-2.0))
    )
    assert concordant.loss.item() == pytest.approx(0.1269280, abs=1e-7)
    assert concordant.pairs == 1
    discordant = ranking_loss_stage(_vector([0.0, 2.0]), [1.0, 0.0])
    assert discordant.loss.item() == pytest.approx(2.126928, abs=1e-6)


def test_ranking_loss_skips_tied_targets():
    term = ranking_loss_stage(_vector([3.0, -1.0, 0.5]), [0.4, 0.4, 0.4])
    assert term.loss.item() == 0.0
    assert term.pairs == 0


def test_ranking_loss_subsamples_above_budget():
    rng = np.random.default_rng(0)
    margin = rng.normal(size=40)
    target = rng.random(40)
    full = ranking_loss_stage(_vector(margin), target)
    sampled = ranking_loss_stage(
        _vector(margin), target, pair_budget=100, rng=rng
    )
    assert full.pairs == 780
    assert sampled.pairs == 100
    assert sampled.loss.item() == pytest.approx(full.loss.item(), rel=0.3)


def test_ranking_loss_total_adds_stages():
    tape = Tape(dtype=np.float64)
    rng = np.random.default_rng(1)
    terms = [
        ranking_loss_stage(tape.leaf(rng.normal(size=6)), rng.random(6))
        for _ in range(3)
    ]
    assert ranking_loss_total(terms[:1]).item() == terms[0].loss.item()
    assert ranking_loss_total(terms).item() == pytest.approx(
        sum(term.loss.item() for term in terms)
    )
    repeated = ranking_loss_total([terms[0]] * 3)
    assert repeated.item() == pytest.approx(3 * terms[0].loss.item())


def test_cross_entropy_closed_forms():
    tape = Tape(dtype=np.float64)
    uniform = tape.constant(np.zeros((4, 256)))
    loss = lm_cross_entropy(uniform, [1, 2, 3, 4])
    assert loss.item() == pytest.approx(math.log(256))
    assert loss.item() == pytest.approx(5.5452, abs=1e-4)

    confident = np.zeros((3, 5))
    confident[np.arange(3), [4, 0, 2]] = 20.0
    loss = lm_cross_entropy(tape.constant(confident), [4, 0, 2])
    assert loss.item() < 1e-8


def test_cross_entropy_include_and_reduction():
    tape = Tape(dtype=np.float64)
    logits = tape.constant(np.zeros((4, 8)))
    summed = lm_cross_entropy(
        logits, [0, 1, 2, 3], [True, True, False, False], reduction="sum"
    )
    assert summed.item() == pytest.approx(2 * math.log(8))
    with pytest.raises(EmptySelectionError):
        lm_cross_entropy(logits, [0, 1, 2, 3], [False] * 4)


def test_cross_entropy_gradient_matches_finite_differences():
    labels = [3, 1, 0]

    def loss(x):
        return lm_cross_entropy(x, labels)

    point = np.random.default_rng(2).normal(size=(3, 6))
    assert finite_diff_check(loss, point) < 1e-6


def test_ratio_loss():
    on_target = ratio_loss([_vector([0.9, 0.9])], [0.9])
    assert on_target.item() == pytest.approx(0.0, abs=1e-15)
    over = ratio_loss([_vector([1.0, 1.0, 1.0])], [0.9])
    assert over.item() == pytest.approx(0.01)


@pytest.mark.parametrize("start, sign", [(1.0, 1.0), (0.5, -1.0)])
def test_ratio_loss_gradient_points_toward_target(start, sign):
    tape = Tape(dtype=np.float64)
    keep = tape.leaf([start, start])
    tape.backward(ratio_loss([keep], [0.8]))
    assert np.all(np.sign(keep.grad) == sign)


def test_total_loss_weighting():
    tape = Tape(dtype=np.float64)
    cls, mse, rank = (tape.constant(v) for v in (1.0, 2.0, 3.0))
    assert total_loss(cls, mse, rank).item() == 6.0
    zero = LossWeights(cls=0.0, mse=0.0, rank=0.0, ratio=0.0)
    assert total_loss(cls, mse, rank, weights=zero).item() == 0.0
    ratio = tape.constant(0.5)
    weighted = total_loss(
        cls, mse, rank, ratio, LossWeights(ratio=2.0)
    ).item()
    assert weighted == pytest.approx(1.0 + 2.0 + 3.0 + 2 * 0.5)


def test_total_loss_rejects_non_finite_components():
    tape = Tape(dtype=np.float64)
    finite = tape.constant(1.0)
    with pytest.raises(NonFiniteLossError) as info:
        total_loss(finite, tape.constant(np.nan), finite)
    assert info.value.component == "mse"
    with pytest.raises(NonFiniteLossError):
        total_loss(finite, finite, finite, tape.constant(np.inf))


def test_mse_gradient_reaches_only_included_rows():
    tape = Tape(dtype=np.float64)
    keep = tape.leaf([0.2, 0.4, 0.6])
    term = mse_loss(keep, [1.0, 1.0, 1.0], include=[True, False, True])
    tape.backward(term.loss)
    assert keep.grad[1] == 0.0
    assert keep.grad[0] < 0.0 and keep.grad[2] < 0.0


def _rank_loss(margin, target, **kwargs):
    return ranking_loss_stage(_vector(margin), target, **kwargs).loss.item()


@pytest.mark.parametrize("size", [2, 3, 4, 5])
def test_swapping_concordant_margins_never_lowers_the_ranking_loss(size):
    base = np.sort(np.random.default_rng(size).normal(size=size))
    for order in itertools.permutations(range(size)):
        target = np.asarray(order, dtype=np.float64)
        margin = base[np.argsort(np.argsort(target))]
        aligned = _rank_loss(margin, target)
        for i, j in itertools.combinations(range(size), 2):
            swapped = margin.copy()
            swapped[[i, j]] = swapped[[j, i]]
            assert _rank_loss(swapped, target) > aligned


def test_ranking_loss_ignores_a_shift_of_every_margin():
    rng = np.random.default_rng(6)
    margin = rng.normal(size=12)
    target = rng.random(12)
    for shift in (-3.0, 0.5, 40.0):
        assert _rank_loss(margin + shift, target) == pytest.approx(
            _rank_loss(margin, target), rel=1e-12
        )


def test_margins_matching_the_target_beat_shuffled_margins():
    rng = np.random.default_rng(8)
    wins = 0
    for _ in range(100):
        target = rng.normal(size=32)
        wins += _rank_loss(target, target) < _rank_loss(
            rng.permutation(target), target
        )
    assert wins >= 95


def test_subsampled_ranking_loss_is_unbiased():
    rng = np.random.default_rng(9)
    margin = rng.normal(size=40)
    target = rng.random(40)
    full = _rank_loss(margin, target)
    draws = [
        _rank_loss(margin, target, pair_budget=100, rng=rng)
        for _ in range(1000)
    ]
    assert np.mean(draws) == pytest.approx(full, rel=0.02)
