"""Dense reverse-mode differentiation over NumPy arrays.

A `Tape` records every primitive application in creation order, so the
recorded list is already topologically sorted: replaying it backwards
visits each node after all of its consumers. Tensors never share a tape
implicitly; callers create one tape per forward pass.
"""

import logging
import math
import typing as t

import numpy as np
import numpy.typing as npt
from scipy.special import expit

from sdtp.core.config import SETTINGS
from sdtp.core.errors import SdtpError

LOGGER: logging.Logger = logging.getLogger(__name__)

Array = npt.NDArray[t.Any]
Vjp = t.Callable[[Array, t.Tuple[bool, ...]], t.Sequence[Array | None]]

# tanh approximation of GELU
GELU_COEFF: float = 0.044715
GELU_SCALE: float = math.sqrt(2.0 / math.pi)

LAYER_NORM_EPS: float = 1e-5
POLICY_EPS: float = 1e-12


class ShapeMismatchError(SdtpError, ValueError):
    """Raised when operand shapes are incompatible for a primitive."""

    op: str
    left: t.Tuple[int, ...]
    right: t.Tuple[int, ...]

    def __init__(
        self,
        op: str,
        left: t.Tuple[int, ...],
        right: t.Tuple[int, ...],
    ) -> None:
        """Initialize ShapeMismatchError.

        Args:
            op (str): Name of the primitive.
            left (Tuple[int, ...]): Shape of the first operand.
            right (Tuple[int, ...]): Shape of the second operand.
        """
        self.op = op
        self.left = left
        self.right = right
        super().__init__(f"{op}: incompatible shapes {left} and {right}")


class NonScalarBackwardError(SdtpError, ValueError):
    """Raised when backward is requested from a non-scalar tensor."""

    def __init__(self, shape: t.Tuple[int, ...]) -> None:
        """Initialize NonScalarBackwardError.

        Args:
            shape (Tuple[int, ...]): Shape of the offending tensor.
        """
        self.shape = shape
        super().__init__(f"backward needs a 0-d tensor, got shape {shape}")


class TapeMismatchError(SdtpError, ValueError):
    """Raised when tensors from different tapes are combined."""

    def __init__(self) -> None:
        super().__init__("operands were recorded on different tapes")


class DiffTensor:
    """Array value recorded on a tape, with an accumulated gradient."""

    __slots__ = (
        "values",
        "tape",
        "node_id",
        "requires_grad",
        "parents",
        "vjp",
        "name",
        "_grad",
    )

    def __init__(
        self,
        values: Array,
        tape: "Tape",
        node_id: int = -1,
        requires_grad: bool = False,
        parents: t.Tuple["DiffTensor", ...] = (),
        vjp: Vjp | None = None,
        name: str | None = None,
    ) -> None:
        self.values = values
        self.tape = tape
        self.node_id = node_id
        self.requires_grad = requires_grad
        self.parents = parents
        self.vjp = vjp
        self.name = name
        self._grad: Array | None = None

    @property
    def shape(self) -> t.Tuple[int, ...]:
        """Shape of the stored values."""
        return tuple(self.values.shape)

    @property
    def ndim(self) -> int:
        """Number of dimensions of the stored values."""
        return int(self.values.ndim)

    @property
    def grad(self) -> Array:
        """Accumulated gradient, zeros until a backward pass reaches it."""
        if self._grad is None:
            return np.zeros_like(self.values)
        return self._grad

    def accumulate(self, grad: Array) -> None:
        """Add an incoming adjoint into the stored gradient.

        Args:
            grad (Array): Adjoint with the same shape as the values.
        """
        if grad.shape != self.values.shape:
            raise ShapeMismatchError(
                "accumulate", self.values.shape, grad.shape
            )
        if self._grad is None:
            self._grad = np.array(grad, dtype=self.values.dtype, copy=True)
        else:
            self._grad = self._grad + grad

    def zero_grad(self) -> None:
        """Drop the accumulated gradient."""
        self._grad = None

    def item(self) -> float:
        """Return the value of a single-element tensor as a float.

        Returns:
            float: The scalar value.
        """
        return float(self.values.reshape(-1)[0])

    def __add__(self, other: "DiffTensor") -> "DiffTensor":
        return add(self, other)

    def __sub__(self, other: "DiffTensor") -> "DiffTensor":
        return sub(self, other)

    def __mul__(self, other: "DiffTensor") -> "DiffTensor":
        return mul(self, other)

    def __matmul__(self, other: "DiffTensor") -> "DiffTensor":
        return matmul(self, other)

    def __neg__(self) -> "DiffTensor":
        return scale(self, -1.0)

    def __repr__(self) -> str:
        return (
            f"DiffTensor(shape={self.shape}, node={self.node_id}, "
            f"requires_grad={self.requires_grad})"
        )


class Tape:
    """Ordered record of primitive applications for one forward pass."""

    dtype: np.dtype
    grad_enabled: bool
    nodes: t.List[DiffTensor]

    def __init__(
        self,
        dtype: npt.DTypeLike | None = None,
        grad_enabled: bool = True,
    ) -> None:
        """Initialize a tape.

        Args:
            dtype (DTypeLike | None): Floating dtype of every tensor on the
                tape. Defaults to the configured run-wide precision.
            grad_enabled (bool): When False nothing is recorded and every
                result is a plain constant (inference mode).
        """
        self.dtype = np.dtype(dtype) if dtype is not None else SETTINGS.dtype
        self.grad_enabled = grad_enabled
        self.nodes = []

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(
        self,
        values: npt.ArrayLike,
        requires_grad: bool = True,
        name: str | None = None,
    ) -> DiffTensor:
        """Register an input tensor.

        Args:
            values (ArrayLike): Initial values, cast to the tape dtype.
            requires_grad (bool): Whether backward should reach it.
            name (str | None): Optional label, used in error messages.

        Returns:
            DiffTensor: The registered tensor.
        """
        array: Array = np.asarray(values, dtype=self.dtype)
        if not (requires_grad and self.grad_enabled):
            return DiffTensor(array, self, name=name)
        node = DiffTensor(
            array,
            self,
            node_id=len(self.nodes),
            requires_grad=True,
            name=name,
        )
        self.nodes.append(node)
        return node

    def constant(
        self, values: npt.ArrayLike, name: str | None = None
    ) -> DiffTensor:
        """Wrap values that never receive gradients."""
        return self.leaf(values, requires_grad=False, name=name)

    def record(
        self,
        values: Array,
        parents: t.Sequence[DiffTensor],
        vjp: Vjp,
        force_grad: bool = False,
    ) -> DiffTensor:
        """Append the result of a primitive to the tape.

        Args:
            values (Array): Forward result.
            parents (Sequence[DiffTensor]): Operands of the primitive.
            vjp (Vjp): Maps the output adjoint to one adjoint per parent.
            force_grad (bool): Track the result even when no parent does.

        Returns:
            DiffTensor: The recorded result.
        """
        for parent in parents:
            if parent.tape is not self:
                raise TapeMismatchError()
        tracked: bool = self.grad_enabled and (
            force_grad or any(parent.requires_grad for parent in parents)
        )
        values = np.asarray(values, dtype=self.dtype)
        if not tracked:
            return DiffTensor(values, self)
        node = DiffTensor(
            values,
            self,
            node_id=len(self.nodes),
            requires_grad=True,
            parents=tuple(parents),
            vjp=vjp,
        )
        self.nodes.append(node)
        return node

    def backward(self, scalar: DiffTensor) -> None:
        """Populate gradients of every node reachable from a scalar.

        Gradients accumulate: running backward twice without `reset`
        doubles every gradient.

        Args:
            scalar (DiffTensor): A 0-d tensor recorded on this tape.
        """
        if scalar.tape is not self:
            raise TapeMismatchError()
        if scalar.ndim != 0:
            raise NonScalarBackwardError(scalar.shape)
        if not scalar.requires_grad:
            LOGGER.debug("backward from an untracked scalar is a no-op")
            return

        adjoints: t.Dict[int, Array] = {
            scalar.node_id: np.ones_like(scalar.values)
        }
        for node in reversed(self.nodes[: scalar.node_id + 1]):
            grad: Array | None = adjoints.pop(node.node_id, None)
            if grad is None:
                continue
            node.accumulate(grad)
            if node.vjp is None:
                continue
            needs = tuple(parent.requires_grad for parent in node.parents)
            for parent, parent_grad in zip(
                node.parents, node.vjp(grad, needs)
            ):
                if parent_grad is None or not parent.requires_grad:
                    continue
                previous: Array | None = adjoints.get(parent.node_id)
                adjoints[parent.node_id] = (
                    parent_grad if previous is None else previous + parent_grad
                )

    def reset(self) -> None:
        """Zero the gradient of every recorded node."""
        for node in self.nodes:
            node.zero_grad()


def _tape_of(*tensors: DiffTensor) -> Tape:
    tape: Tape = tensors[0].tape
    for tensor in tensors[1:]:
        if tensor.tape is not tape:
            raise TapeMismatchError()
    return tape


def _unbroadcast(grad: Array, shape: t.Tuple[int, ...]) -> Array:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op: str, a: DiffTensor, b: DiffTensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeMismatchError(op, a.shape, b.shape) from exc


def add(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    """Elementwise sum; `b` may broadcast over leading axes of `a`."""
    _check_broadcast("add", a, b)

    def vjp(grad: Array, needs: t.Tuple[bool, ...]) -> t.List[Array | None]:
        return [
            _unbroadcast(grad, a.shape) if needs[0] else None,
            _unbroadcast(grad, b.shape) if needs[1] else None,
        ]

    return _tape_of(a, b).record(a.values + b.values, (a, b), vjp)


def sub(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    """Elementwise difference."""
    _check_broadcast("sub", a, b)

    def vjp(grad: Array, needs: t.Tuple[bool, ...]) -> t.List[Array | None]:
        return [
            _unbroadcast(grad, a.shape) if needs[0] else None,
            _unbroadcast(-grad, b.shape) if needs[1] else None,
        ]

    return _tape_of(a, b).record(a.values - b.values, (a, b), vjp)


def mul(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    """Elementwise product."""
    _check_broadcast("mul", a, b)

    def vjp(grad: Array, needs: t.Tuple[bool, ...]) -> t.List[Array | None]:
        return [
            _unbroadcast(grad * b.values, a.shape) if needs[0] else None,
            _unbroadcast(grad * a.values, b.shape) if needs[1] else None,
        ]

    return _tape_of(a, b).record(a.values * b.values, (a, b), vjp)


def scale(a: DiffTensor, factor: float) -> DiffTensor:
    """Multiply by a Python scalar."""

    def vjp(grad: Array, _: t.Tuple[bool, ...]) -> t.List[Array | None]:
        return [grad * factor]

    return a.tape.record(a.values * factor, (a,), vjp)


def add_constant(a: DiffTensor, constant: npt.ArrayLike) -> DiffTensor:
    """Add a non-differentiable array (masks, biases, noise)."""
    return add(a, a.tape.constant(constant))


def mul_constant(a: DiffTensor, constant: npt.ArrayLike) -> DiffTensor:
    """Multiply by a non-differentiable array."""
    return mul(a, a.tape.constant(constant))


def matmul(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    """Matrix product of 2-d operands or batched 3-d operands.

    Args:
        a (DiffTensor): Left operand, `m x k` or `batch x m x k`.
        b (DiffTensor): Right operand, `k x n` or `batch x k x n`.

    Returns:
        DiffTensor: The product.
    """
    if (
        a.ndim != b.ndim
        or a.ndim not in (2, 3)
        or a.shape[-1] != b.shape[-2]
        or (a.ndim == 3 and a.shape[0] != b.shape[0])
    ):
        raise ShapeMismatchError("matmul", a.shape, b.shape)

    def vjp(grad: Array, needs: t.Tuple[bool, ...]) -> t.List[Array | None]:
        return [
            grad @ np.swapaxes(b.values, -1, -2) if needs[0] else None,
            np.swapaxes(a.values, -1, -2) @ grad if needs[1] else None,
        ]

    return _tape_of(a, b).record(a.values @ b.values, (a, b), vjp)


def gelu(x: DiffTensor) -> DiffTensor:
    """GELU, tanh approximation; the adjoint differentiates the same form."""
    v: Array = x.values
    inner: Array = GELU_SCALE * (v + GELU_COEFF * v**3)
    tanh_inner: Array = np.tanh(inner)

    def vjp(grad: Array, _: t.Tuple[bool, ...]) -> t.List[Array | None]:
        slope: Array = 0.5 * (1.0 + tanh_inner) + 0.5 * v * (
            1.0 - tanh_inner**2
        ) * GELU_SCALE * (1.0 + 3.0 * GELU_COEFF * v**2)
        return [grad * slope]

    return x.tape.record(0.5 * v * (1.0 + tanh_inner), (x,), vjp)


def softmax_rows(x: DiffTensor) -> DiffTensor:
    """Softmax over the last axis."""
    shifted: Array = x.values - x.values.max(axis=-1, keepdims=True)
    exps: Array = np.exp(shifted)
    probs: Array = exps / exps.sum(axis=-1, keepdims=True)

    def vjp(grad: Array, _: t.Tuple[bool, ...]) -> t.List[Array | None]:
        inner: Array = (grad * probs).sum(axis=-1, keepdims=True)
        return [probs * (grad - inner)]

    return x.tape.record(probs, (x,), vjp)


def log_softmax_rows(x: DiffTensor) -> DiffTensor:
    """Log-softmax over the last axis."""
    shifted: Array = x.values - x.values.max(axis=-1, keepdims=True)
    out: Array = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def vjp(grad: Array, _: t.Tuple[bool, ...]) -> t.List[Array | None]:
        return [grad - np.exp(out) * grad.sum(axis=-1, keepdims=True)]

    return x.tape.record(out, (x,), vjp)


def policy_softmax_rows(
    scores: DiffTensor, gate: DiffTensor, eps: float = POLICY_EPS
) -> DiffTensor:
    """Softmax over keys where each key's weight is scaled by a gate.

    The diagonal (a query attending to itself) is never gated, so every
    row keeps at least one positive entry. With a hard 0/1 gate the result
    equals a softmax restricted to the kept keys; the gradient still
    reaches the gate, which is how sampled keep masks are trained.

    Args:
        scores (DiffTensor): `... x n x n` attention logits.
        gate (DiffTensor): Length-`n` keep weights for the keys.
        eps (float): Denominator guard.

    Returns:
        DiffTensor: Row-normalized attention weights.
    """
    n: int = scores.shape[-1]
    if scores.shape[-2] != n or gate.shape != (n,):
        raise ShapeMismatchError(
            "policy_softmax_rows", scores.shape, gate.shape
        )
    exps: Array = np.exp(
        scores.values - scores.values.max(axis=-1, keepdims=True)
    )
    gate_matrix: Array = np.broadcast_to(gate.values, (n, n)).copy()
    np.fill_diagonal(gate_matrix, 1.0)
    weighted: Array = exps * gate_matrix
    denom: Array = weighted.sum(axis=-1, keepdims=True) + eps
    probs: Array = weighted / denom

    def vjp(grad: Array, needs: t.Tuple[bool, ...]) -> t.List[Array | None]:
        d_weighted: Array = (
            grad - (grad * probs).sum(axis=-1, keepdims=True)
        ) / denom
        d_gate: Array | None = None
        if needs[1]:
            per_pair: Array = _unbroadcast(d_weighted * exps, (n, n)).copy()
            np.fill_diagonal(per_pair, 0.0)
            d_gate = per_pair.sum(axis=0)
        return [d_weighted * weighted if needs[0] else None, d_gate]

    return _tape_of(scores, gate).record(probs, (scores, gate), vjp)


def layer_norm(
    x: DiffTensor,
    gamma: DiffTensor,
    beta: DiffTensor,
    eps: float = LAYER_NORM_EPS,
) -> DiffTensor:
    """Layer normalization over the last axis with an epsilon guard."""
    mean: Array = x.values.mean(axis=-1, keepdims=True)
    centered: Array = x.values - mean
    inv_std: Array = 1.0 / np.sqrt(
        (centered**2).mean(axis=-1, keepdims=True) + eps
    )
    normed: Array = centered * inv_std

    def vjp(grad: Array, needs: t.Tuple[bool, ...]) -> t.List[Array | None]:
        d_normed: Array = grad * gamma.values
        d_x: Array | None = None
        if needs[0]:
            d_x = inv_std * (
                d_normed
                - d_normed.mean(axis=-1, keepdims=True)
                - normed * (d_normed * normed).mean(axis=-1, keepdims=True)
            )
        return [
            d_x,
            _unbroadcast(grad * normed, gamma.shape) if needs[1] else None,
            _unbroadcast(grad, beta.shape) if needs[2] else None,
        ]

    return _tape_of(x, gamma, beta).record(
        normed * gamma.values + beta.values, (x, gamma, beta), vjp
    )


def embedding_gather(table: DiffTensor, index: npt.ArrayLike) -> DiffTensor:
    """Select rows of `table` (embedding lookup, or physical token pruning).

    Args:
        table (DiffTensor): Source tensor, gathered along axis 0.
        index (ArrayLike): Integer row indices; repeats are allowed.

    Returns:
        DiffTensor: `table[index]`.
    """
    rows: npt.NDArray[np.intp] = np.asarray(index, dtype=np.intp)

    def vjp(grad: Array, _: t.Tuple[bool, ...]) -> t.List[Array | None]:
        full: Array = np.zeros_like(table.values)
        np.add.at(full, rows, grad)
        return [full]

    return table.tape.record(table.values[rows], (table,), vjp)


gather_rows = embedding_gather


def concat(tensors: t.Sequence[DiffTensor], axis: int = 0) -> DiffTensor:
    """Concatenate tensors along an axis."""
    tape: Tape = _tape_of(*tensors)
    bounds: t.List[int] = list(
        np.cumsum([tensor.shape[axis] for tensor in tensors])[:-1]
    )

    def vjp(grad: Array, _: t.Tuple[bool, ...]) -> t.List[Array | None]:
        return list(np.split(grad, bounds, axis=axis))

    return tape.record(
        np.concatenate([tensor.values for tensor in tensors], axis=axis),
        tensors,
        vjp,
    )


def concat_rows(tensors: t.Sequence[DiffTensor]) -> DiffTensor:
    """Concatenate tensors along axis 0."""
    return concat(tensors, axis=0)


def reshape(x: DiffTensor, shape: t.Tuple[int, ...]) -> DiffTensor:
    """Reshape without copying semantics."""

    def vjp(grad: Array, _: t.Tuple[bool, ...]) -> t.List[Array | None]:
        return [grad.reshape(x.shape)]

    return x.tape.record(x.values.reshape(shape), (x,), vjp)


def transpose(x: DiffTensor, axes: t.Tuple[int, ...]) -> DiffTensor:
    """Permute axes."""
    inverse: t.Tuple[int, ...] = tuple(int(a) for a in np.argsort(axes))

    def vjp(grad: Array, _: t.Tuple[bool, ...]) -> t.List[Array | None]:
        return [grad.transpose(inverse)]

    return x.tape.record(x.values.transpose(axes), (x,), vjp)


def select_column(x: DiffTensor, column: int) -> DiffTensor:
    """Take `x[..., column]`."""

    def vjp(grad: Array, _: t.Tuple[bool, ...]) -> t.List[Array | None]:
        full: Array = np.zeros_like(x.values)
        full[..., column] = grad
        return [full]

    return x.tape.record(x.values[..., column], (x,), vjp)


def pick(
    x: DiffTensor, rows: npt.ArrayLike, cols: npt.ArrayLike
) -> DiffTensor:
    """Take the entries `x[rows[i], cols[i]]` of a 2-d tensor."""
    row_idx = np.asarray(rows, dtype=np.intp)
    col_idx = np.asarray(cols, dtype=np.intp)

    def vjp(grad: Array, _: t.Tuple[bool, ...]) -> t.List[Array | None]:
        full: Array = np.zeros_like(x.values)
        np.add.at(full, (row_idx, col_idx), grad)
        return [full]

    return x.tape.record(x.values[row_idx, col_idx], (x,), vjp)


def total(x: DiffTensor) -> DiffTensor:
    """Sum of all entries, as a 0-d tensor."""

    def vjp(grad: Array, _: t.Tuple[bool, ...]) -> t.List[Array | None]:
        return [np.full(x.shape, grad, dtype=x.values.dtype)]

    return x.tape.record(np.asarray(x.values.sum()), (x,), vjp)


def mean(x: DiffTensor) -> DiffTensor:
    """Mean of all entries, as a 0-d tensor."""
    return scale(total(x), 1.0 / max(x.values.size, 1))


def exp(x: DiffTensor) -> DiffTensor:
    """Elementwise exponential."""
    out: Array = np.exp(x.values)

    def vjp(grad: Array, _: t.Tuple[bool, ...]) -> t.List[Array | None]:
        return [grad * out]

    return x.tape.record(out, (x,), vjp)


def log(x: DiffTensor) -> DiffTensor:
    """Elementwise natural logarithm."""

    def vjp(grad: Array, _: t.Tuple[bool, ...]) -> t.List[Array | None]:
        return [grad / x.values]

    return x.tape.record(np.log(x.values), (x,), vjp)


def square(x: DiffTensor) -> DiffTensor:
    """Elementwise square."""

    def vjp(grad: Array, _: t.Tuple[bool, ...]) -> t.List[Array | None]:
        return [2.0 * grad * x.values]

    return x.tape.record(x.values**2, (x,), vjp)


def softplus(x: DiffTensor) -> DiffTensor:
    """Elementwise `log(1 + exp(x))`, overflow-safe."""

    def vjp(grad: Array, _: t.Tuple[bool, ...]) -> t.List[Array | None]:
        return [grad * expit(x.values)]

    return x.tape.record(np.logaddexp(0.0, x.values), (x,), vjp)


def detach(x: DiffTensor) -> DiffTensor:
    """Copy of the values with no path back to `x`."""
    return x.tape.constant(x.values.copy())


def watch(x: DiffTensor) -> DiffTensor:
    """Identity that is always tracked, so gradients can be read at `x`.

    Used to tap intermediate hidden states when no upstream tensor
    requires gradients (frozen parameters).
    """

    def vjp(grad: Array, _: t.Tuple[bool, ...]) -> t.List[Array | None]:
        return [grad]

    return x.tape.record(x.values, (x,), vjp, force_grad=True)


def straight_through(soft: DiffTensor, hard: npt.ArrayLike) -> DiffTensor:
    """Forward value `hard`, gradient of `soft`."""
    return add_constant(soft, np.asarray(hard) - soft.values)


def _evaluate(
    f: t.Callable[[DiffTensor], DiffTensor], values: Array
) -> float:
    tape = Tape(dtype=np.float64, grad_enabled=False)
    return float(f(tape.leaf(values, requires_grad=False)).values)


def finite_diff_check(
    f: t.Callable[[DiffTensor], DiffTensor],
    point: npt.ArrayLike,
    samples: int = 50,
    step: float = 1e-5,
    eps: float = 1e-4,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare the analytic gradient of `f` with central differences.

    The error at a coordinate is
    `|analytic - numeric| / (|numeric| + eps)`; the worst sampled
    coordinate is returned. Evaluation runs at 64-bit precision.

    Args:
        f (Callable[[DiffTensor], DiffTensor]): Deterministic scalar
            function of one tensor.
        point (ArrayLike): Where to evaluate.
        samples (int): Number of coordinates to check.
        step (float): Central difference half-width.
        eps (float): Denominator guard for near-zero gradients.
        rng (Generator | None): Source for the coordinate sample.

    Returns:
        float: Max relative error, `inf` when `f` produced a NaN.
    """
    base: Array = np.array(point, dtype=np.float64)
    tape = Tape(dtype=np.float64)
    leaf: DiffTensor = tape.leaf(base)
    out: DiffTensor = f(leaf)
    if not np.all(np.isfinite(out.values)):
        LOGGER.warning("finite_diff_check: non-finite function value")
        return math.inf
    tape.backward(out)
    analytic: Array = leaf.grad

    generator: np.random.Generator = rng or np.random.default_rng(0)
    chosen = generator.choice(
        base.size, size=min(samples, base.size), replace=False
    )
    worst: float = 0.0
    for flat in chosen:
        index = np.unravel_index(int(flat), base.shape)
        plus: Array = base.copy()
        plus[index] += step
        minus: Array = base.copy()
        minus[index] -= step
        upper: float = _evaluate(f, plus)
        lower: float = _evaluate(f, minus)
        if not (math.isfinite(upper) and math.isfinite(lower)):
            LOGGER.warning("finite_diff_check: NaN at coordinate %s", index)
            return math.inf
        numeric: float = (upper - lower) / (2.0 * step)
        error: float = abs(float(analytic[index]) - numeric) / (
            abs(numeric) + eps
        )
        worst = max(worst, error)
    return worst
