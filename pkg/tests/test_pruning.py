import itertools

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.special import expit

from sdtp.core import diffmath as dm
from sdtp.core.diffmath import Tape, finite_diff_check
from sdtp.core.pruning import (
    MaskLengthError,
    NonFiniteInputError,
    ScheduleRangeError,
    ScorerBudgetError,
    TokenMask,
    build_schedule,
    check_schedule,
    init_scorers,
    keep_count,
    keep_margin,
    keep_probability,
    propagate_mask,
    protected_set,
    sample_mask,
    score_tokens,
    select_topk,
)
from sdtp.schemas.schedule import PruneSchedule, PruneStage


def test_geometric_schedule_reaches_65_percent_pruning():
    schedule = build_schedule(10, 0.9, 4, 3, 34)
    assert schedule.layers == (4, 7, 10, 13, 16, 19, 22, 25, 28, 31)
    assert schedule.ratios[0] == pytest.approx(0.9)
    assert schedule.ratios[1] == pytest.approx(0.81)
    assert schedule.ratios[-1] == pytest.approx(0.34867844, abs=1e-8)


def test_small_schedules():
    single = build_schedule(1, 1.0, 0, 1, 4)
    assert single.ratios == (1.0,)
    toy = build_schedule(3, 0.9, 2, 2, 8)
    assert toy.layers == (2, 4, 6)
    assert toy.ratios == pytest.approx((0.9, 0.81, 0.729))


def test_schedule_overflow_names_the_largest_feasible_count():
    with pytest.raises(ScheduleRangeError) as info:
        build_schedule(10, 0.9, 4, 3, 30)
    assert info.value.max_stages == 9
    with pytest.raises(ScheduleRangeError):
        check_schedule(build_schedule(2, 0.9, 2, 2, 8), 4)


def test_schedule_rejects_unordered_stages():
    with pytest.raises(ValueError):
        PruneSchedule(
            stages=(
                PruneStage(layer=3, keep_ratio=0.9),
                PruneStage(layer=2, keep_ratio=0.8),
            )
        )
    with pytest.raises(ValueError):
        PruneSchedule(
            stages=(
                PruneStage(layer=1, keep_ratio=0.8),
                PruneStage(layer=2, keep_ratio=0.9),
            )
        )


def test_keep_count_ignores_float_noise():
    assert keep_count(0.9, 100) == 90
    assert keep_count(0.81, 100) == 81
    assert keep_count(0.5, 7) == 4


@pytest.mark.parametrize(
    "length, expected",
    [
        (100, [0, 1, 2, 3] + list(range(90, 100))),
        (3, [0, 1, 2]),
        (40, [0, 1, 2, 3, 36, 37, 38, 39]),
    ],
)
def test_protected_set(length, expected):
    assert protected_set(length).tolist() == expected


def test_select_topk_protection_dominates():
    kept = select_topk(np.arange(10.0), 0.5, protected_set(10))
    assert kept.tolist() == [0, 1, 2, 3, 9]


def test_select_topk_edge_cases():
    assert select_topk(np.random.rand(8), 1.0, []).tolist() == list(range(8))
    assert select_topk(np.ones(8), 0.5, []).tolist() == [0, 1, 2, 3]
    kept = select_topk(np.arange(10.0), 0.5, [0])
    assert kept.tolist() == [0, 6, 7, 8, 9]


def test_select_topk_respects_previous_stage():
    alive = np.array([True] * 5 + [False] * 5)
    kept = select_topk(np.arange(10.0), 0.3, [0], eligible=alive)
    assert kept.tolist() == [0, 3, 4]


def test_propagate_mask_identity_and_monotonicity():
    mask = TokenMask.full(8, np.array([0]))
    vector = np.array([1, 0, 1, 1, 0, 1, 1, 1], dtype=bool)
    first = propagate_mask(mask, vector, 1)
    assert np.array_equal(first.latest(), vector)
    dropped = propagate_mask(mask, np.arange(8) != 5, 1)
    again = propagate_mask(dropped, np.ones(8, dtype=bool), 2)
    assert not again.latest()[5]
    assert again.keep_at(0) is None
    assert np.array_equal(again.keep_at(3), again.latest())
    with pytest.raises(MaskLengthError):
        propagate_mask(mask, np.ones(7, dtype=bool), 1)


def test_propagate_mask_popcount_over_all_patterns():
    patterns = [
        np.array(bits, dtype=bool)
        for bits in itertools.product([0, 1], repeat=8)
    ]
    rng = np.random.default_rng(0)
    for index in rng.choice(len(patterns), size=40, replace=False):
        prev = propagate_mask(
            TokenMask.full(8, np.array([], dtype=np.int64)),
            patterns[index],
            0,
        )
        for vector in patterns[::17]:
            out = propagate_mask(prev, vector, 1).latest()
            assert out.sum() <= min(prev.latest().sum(), vector.sum())


def _zero_weights(tape, d_model, hidden, bias=(0.0, 0.0)):
    return {
        "w1": tape.constant(np.zeros((d_model, hidden))),
        "b1": tape.constant(np.zeros(hidden)),
        "w2": tape.constant(np.zeros((hidden, 2))),
        "b2": tape.constant(np.asarray(bias)),
    }


def test_zero_scorer_outputs_its_bias():
    tape = Tape(dtype=np.float64)
    hidden = tape.constant(np.random.default_rng(0).normal(size=(5, 8)))
    logits = score_tokens(hidden, _zero_weights(tape, 8, 4, (0.3, -0.2)))
    assert logits.shape == (5, 2)
    assert np.allclose(logits.values, [[0.3, -0.2]] * 5)
    flat = score_tokens(hidden, _zero_weights(tape, 8, 4))
    assert np.allclose(keep_probability(flat).values, 0.5)


def test_scorer_rejects_non_finite_input():
    tape = Tape(dtype=np.float64)
    hidden = tape.constant([[np.nan] * 8])
    with pytest.raises(NonFiniteInputError):
        score_tokens(hidden, _zero_weights(tape, 8, 4))


def test_scorer_budget_is_enforced():
    init_scorers(3, 16, seed=0, model_flops=32768)
    with pytest.raises(ScorerBudgetError):
        init_scorers(3, 16, seed=0, model_flops=10_000)


def _keep_frequency(logit_pair, draws=10_000, protected=()):
    tape = Tape(dtype=np.float64, grad_enabled=False)
    logits = tape.constant(np.tile(logit_pair, (draws, 1)))
    rng = np.random.default_rng(0)
    return sample_mask(logits, 1.0, list(protected), rng).values


def test_gumbel_mask_saturates_and_balances():
    assert _keep_frequency([10.0, -10.0]).mean() > 0.999
    assert _keep_frequency([0.0, 0.0]).mean() == pytest.approx(0.5, abs=0.02)


def test_gumbel_mask_forces_protected_entries():
    keep = _keep_frequency([-10.0, 10.0], draws=10, protected=[0, 9])
    assert keep[0] == 1.0
    assert keep[9] == 1.0
    assert set(np.unique(keep)) <= {0.0, 1.0}


def test_gumbel_mask_rejects_non_positive_temperature():
    tape = Tape(dtype=np.float64)
    with pytest.raises(ValueError):
        sample_mask(
            tape.constant(np.zeros((3, 2))), 0.0, [], np.random.default_rng()
        )


@pytest.mark.parametrize("factor", [1e-3, 0.5, 7.0, 1e4])
def test_select_topk_ignores_positive_scaling(factor):
    rng = np.random.default_rng(12)
    scores = rng.normal(size=50)
    protected = protected_set(50, 4, 0.1)
    alive = rng.random(50) < 0.8
    for ratio in (0.3, 0.6, 0.9):
        assert np.array_equal(
            select_topk(scores * factor, ratio, protected, alive),
            select_topk(scores, ratio, protected, alive),
        )


@pytest.mark.parametrize("part", ["hidden", "w1", "b1", "w2", "b2"])
def test_scorer_gradient_matches_finite_differences(part):
    scorers = init_scorers(1, 8, seed=3, dtype=np.float64)
    stage = scorers.stage(0)
    rng = np.random.default_rng(4)
    hidden = rng.normal(size=(5, 8))
    point = hidden if part == "hidden" else stage[part]

    def loss(x):
        weights = {
            name: x if name == part else x.tape.constant(values)
            for name, values in stage.items()
        }
        inputs = x if part == "hidden" else x.tape.constant(hidden)
        margin = keep_margin(score_tokens(inputs, weights))
        return dm.total(dm.square(margin))

    assert finite_diff_check(loss, point, rng=rng) < 1e-5


def _logistic_density(x):
    return expit(x) * (1.0 - expit(x))


def test_straight_through_mask_matches_its_expectations():
    margin = 0.9
    draws = 20_000
    tape = Tape(dtype=np.float64)
    logits = tape.leaf(np.tile([margin, 0.0], (draws, 1)))
    keep = sample_mask(logits, 1.0, [], np.random.default_rng(21))
    # Forward: Gumbel-max draws keep with the softmax probability
    assert keep.values.mean() == pytest.approx(expit(margin), abs=0.015)
    tape.backward(dm.total(keep))
    grad = logits.grad
    assert np.allclose(grad[:, 0], -grad[:, 1])
    assert np.all(grad[:, 0] > 0.0) and np.all(grad[:, 0] <= 0.25)
    # Backward: the mean soft-path gradient, logistic noise integrated out
    expected, _ = quad(
        lambda noise: _logistic_density(margin + noise)
        * _logistic_density(noise),
        -40.0,
        40.0,
    )
    assert grad[:, 0].mean() == pytest.approx(expected, abs=0.005)
