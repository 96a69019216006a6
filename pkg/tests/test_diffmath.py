import numpy as np
import pytest

from sdtp.core import diffmath as dm
from sdtp.core.diffmath import (
    NonScalarBackwardError,
    ShapeMismatchError,
    Tape,
    TapeMismatchError,
    finite_diff_check,
)
from sdtp.core.models import forward
from sdtp.services.objectives import lm_cross_entropy


def test_matmul_identity_and_hand_arithmetic():
    tape = Tape(dtype=np.float64)
    a = tape.constant(np.eye(2))
    b = tape.constant([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(dm.matmul(a, b).values, [[1.0, 2.0], [3.0, 4.0]])
    row = tape.constant([[1.0, 2.0]])
    col = tape.constant([[3.0], [4.0]])
    assert np.array_equal((row @ col).values, [[11.0]])


def test_matmul_rejects_inner_mismatch():
    tape = Tape(dtype=np.float64)
    with pytest.raises(ShapeMismatchError):
        dm.matmul(tape.constant(np.ones((2, 3))), tape.constant(np.ones(2)))


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    right = rng.normal(size=(7, 3))

    def loss(x):
        return dm.total(dm.square(dm.matmul(x, x.tape.constant(right))))

    assert finite_diff_check(loss, rng.normal(size=(5, 7)), rng=rng) < 1e-6


def test_elementwise_fixed_points():
    tape = Tape(dtype=np.float64)
    assert dm.gelu(tape.constant([0.0])).values[0] == 0.0
    probs = dm.softmax_rows(tape.constant([[0.0, 0.0, 0.0]])).values
    assert np.allclose(probs, 1.0 / 3.0)


def test_gelu_gradient_at_one():
    assert finite_diff_check(lambda x: dm.total(dm.gelu(x)), [1.0]) < 1e-6


def test_backward_linear_and_square():
    tape = Tape(dtype=np.float64)
    x = tape.leaf([4.0, 5.0, 6.0])
    w = tape.constant([1.0, 2.0, 3.0])
    tape.backward(dm.total(w * x))
    assert np.array_equal(x.grad, [1.0, 2.0, 3.0])

    tape = Tape(dtype=np.float64)
    y = tape.leaf([1.0, -2.0])
    tape.backward(dm.total(dm.square(y)))
    assert np.array_equal(y.grad, [2.0, -4.0])


def test_backward_accumulates_until_reset():
    tape = Tape(dtype=np.float64)
    x = tape.leaf([1.0, 2.0])
    out = dm.total(dm.scale(x, 3.0))
    tape.backward(out)
    tape.backward(out)
    assert np.array_equal(x.grad, [6.0, 6.0])
    tape.reset()
    assert np.array_equal(x.grad, [0.0, 0.0])


def test_backward_requires_scalar_on_same_tape():
    tape = Tape(dtype=np.float64)
    x = tape.leaf([1.0, 2.0])
    with pytest.raises(NonScalarBackwardError):
        tape.backward(x)
    with pytest.raises(TapeMismatchError):
        Tape(dtype=np.float64).backward(dm.total(x))


def test_inference_tape_records_nothing():
    tape = Tape(dtype=np.float64, grad_enabled=False)
    x = tape.leaf([1.0, 2.0])
    out = dm.total(dm.exp(x))
    assert len(tape) == 0
    assert not out.requires_grad


def test_guarded_primitives_stay_finite():
    tape = Tape(dtype=np.float64)
    big = tape.constant([[1e4, -1e4, 0.0]])
    assert np.all(np.isfinite(dm.softmax_rows(big).values))
    assert np.all(np.isfinite(dm.log_softmax_rows(big).values))
    flat = tape.constant(np.ones((2, 4)))
    normed = dm.layer_norm(
        flat, tape.constant(np.ones(4)), tape.constant(np.zeros(4))
    )
    assert np.all(np.isfinite(normed.values))


def test_sum_gradient_is_all_ones():
    point = np.random.default_rng(1).normal(size=6)
    assert finite_diff_check(dm.total, point) < 1e-8


def test_softmax_sum_gradient_vanishes():
    def loss(x):
        return dm.total(dm.softmax_rows(dm.reshape(x, (1, 5))))

    assert finite_diff_check(loss, np.arange(5.0)) < 1e-6


def test_policy_softmax_with_hard_gate_restricts_keys():
    tape = Tape(dtype=np.float64)
    scores = tape.constant(np.zeros((3, 3)))
    gate = tape.constant([1.0, 0.0, 1.0])
    probs = dm.policy_softmax_rows(scores, gate).values
    assert np.allclose(probs[0], [0.5, 0.0, 0.5])
    assert np.allclose(probs[1], [1 / 3, 1 / 3, 1 / 3])
    assert np.allclose(probs.sum(axis=-1), 1.0)


def test_straight_through_forward_is_hard():
    tape = Tape(dtype=np.float64)
    soft = tape.leaf([0.3, 0.8])
    hard = dm.straight_through(soft, [0.0, 1.0])
    assert np.array_equal(hard.values, [0.0, 1.0])
    tape.backward(dm.total(hard))
    assert np.array_equal(soft.grad, [1.0, 1.0])


def test_model_loss_gradient_matches_finite_differences(tiny_params):
    tokens = np.arange(6) % tiny_params.config.vocab_size
    labels = np.roll(tokens, -1)

    def loss(w_fc):
        weights = tiny_params.watch(
            w_fc.tape, overrides={"h.0.mlp.w_fc": w_fc}
        )
        result = forward(
            tiny_params, tokens, tape=w_fc.tape, weights=weights
        )
        return lm_cross_entropy(result.logits, labels)

    error = finite_diff_check(
        loss, tiny_params.arrays["h.0.mlp.w_fc"], samples=50
    )
    assert error < 1e-5


def _weighted_total(out):
    weights = np.random.default_rng(7).normal(size=out.shape)
    return dm.total(dm.mul_constant(out, weights))


def _const(x, values):
    return x.tape.constant(values)


_RNG = np.random.default_rng(11)
_GAMMA = _RNG.normal(size=6)
_BETA = _RNG.normal(size=6)
_ROWS = _RNG.normal(size=(4, 6))
_GATE = _RNG.uniform(0.2, 0.9, size=4)
_SCORES = _RNG.normal(size=(4, 4))

PRIMITIVES = {
    "layer_norm_input": (
        lambda x: dm.layer_norm(x, _const(x, _GAMMA), _const(x, _BETA)),
        (4, 6),
    ),
    "layer_norm_gain": (
        lambda g: dm.layer_norm(_const(g, _ROWS), g, _const(g, _BETA)),
        (6,),
    ),
    "layer_norm_bias": (
        lambda b: dm.layer_norm(_const(b, _ROWS), _const(b, _GAMMA), b),
        (6,),
    ),
    "softmax_rows": (dm.softmax_rows, (3, 5)),
    "log_softmax_rows": (dm.log_softmax_rows, (3, 5)),
    "policy_softmax_scores": (
        lambda s: dm.policy_softmax_rows(s, _const(s, _GATE)),
        (4, 4),
    ),
    "policy_softmax_gate": (
        lambda g: dm.policy_softmax_rows(_const(g, _SCORES), g),
        (4,),
    ),
    "embedding_gather": (
        lambda table: dm.embedding_gather(table, [0, 2, 2, 5]),
        (6, 3),
    ),
    "concat_rows": (
        lambda x: dm.concat([x, _const(x, np.ones((1, 3))), x], axis=0),
        (2, 3),
    ),
    "concat_columns": (
        lambda x: dm.concat([dm.square(x), x], axis=1),
        (2, 3),
    ),
    "softplus": (dm.softplus, (5,)),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_primitive_gradients_match_finite_differences(name, seed):
    build, shape = PRIMITIVES[name]
    rng = np.random.default_rng(seed)
    point = rng.normal(size=shape)
    if name == "policy_softmax_gate":
        point = rng.uniform(0.1, 0.9, size=shape)

    def loss(x):
        return _weighted_total(build(x))

    assert finite_diff_check(loss, point, rng=rng) < 1e-4


def _gradient(build, point):
    tape = Tape(dtype=np.float64)
    x = tape.leaf(point)
    tape.backward(build(x))
    return x.grad.copy()


def test_gradients_are_linear_in_the_loss():
    point = np.random.default_rng(4).normal(size=(3, 4))

    def first(x):
        return dm.total(dm.gelu(x))

    def second(x):
        return dm.total(dm.square(dm.softmax_rows(x)))

    def mixed(x):
        return dm.add(dm.scale(first(x), 2.5), dm.scale(second(x), -0.75))

    expected = 2.5 * _gradient(first, point) - 0.75 * _gradient(
        second, point
    )
    assert np.allclose(_gradient(mixed, point), expected, atol=1e-12)


def test_every_model_parameter_gradient_matches_finite_differences(
    tiny_params,
):
    tokens = np.array([3, 141, 59, 26, 5, 35])
    labels = np.roll(tokens, -1)
    rng = np.random.default_rng(5)
    for name in sorted(tiny_params.arrays):

        def loss(values, name=name):
            weights = tiny_params.watch(
                values.tape, overrides={name: values}
            )
            result = forward(
                tiny_params, tokens, tape=values.tape, weights=weights
            )
            return lm_cross_entropy(result.logits, labels)

        error = finite_diff_check(
            loss, tiny_params.arrays[name], samples=3, rng=rng
        )
        assert error < 1e-4, name
