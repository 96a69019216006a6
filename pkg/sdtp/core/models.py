"""Toy pre-norm decoder-only transformer on the differentiation engine."""

import hashlib
import logging
import math
import typing as t
from dataclasses import dataclass, field

import numpy as np
import numpy.typing as npt

from sdtp.core import diffmath as dm
from sdtp.core.config import SETTINGS
from sdtp.core.diffmath import Array, DiffTensor, Tape
from sdtp.core.errors import SdtpError
from sdtp.core.kv_cache import (
    CacheLayoutError,
    HeavyHitterState,
    KVCache,
    KVCachePolicy,
    KVLayer,
    accumulate_attention,
    bind_budget,
    evict,
)
from sdtp.core.pruning import (
    MaskLengthError,
    StageScorer,
    TokenMask,
    check_schedule,
    keep_count,
    propagate_mask,
    protected_set,
    select_topk,
)
from sdtp.schemas.model import ModelConfig
from sdtp.schemas.schedule import PruneSchedule

LOGGER: logging.Logger = logging.getLogger(__name__)

INIT_STD: float = 0.02
MASK_VALUE: float = -1e9

Weights = t.Mapping[str, DiffTensor]
# (layer, stage input, original positions) -> cumulative key gate
GateHook = t.Callable[
    [int, DiffTensor, npt.NDArray[np.int64]], DiffTensor | None
]


class EmptySequenceError(SdtpError, ValueError):
    """Raised when a forward pass receives no tokens."""

    def __init__(self) -> None:
        super().__init__("token sequence is empty")


class SequenceTooLongError(SdtpError, ValueError):
    """Raised when positions exceed the learned position table."""

    def __init__(self, length: int, max_seq_len: int) -> None:
        self.length = length
        self.max_seq_len = max_seq_len
        super().__init__(
            f"sequence length {length} exceeds max_seq_len {max_seq_len}"
        )


class MissingScorerError(SdtpError, ValueError):
    """Raised when a stage must prune but no keep-score source is given."""

    def __init__(self, stage: int) -> None:
        self.stage = stage
        super().__init__(f"pruning stage {stage} needs a scorer")


class FrozenParameterError(SdtpError, RuntimeError):
    """Raised when an update targets frozen base-model parameters."""

    def __init__(self, name: str) -> None:
        self.name = name
        super().__init__(f"parameter {name!r} is frozen")


@dataclass
class ModelParams:
    """Named parameter arrays of the toy transformer."""

    config: ModelConfig
    arrays: t.Dict[str, Array]
    frozen: bool = True

    @property
    def dtype(self) -> np.dtype:
        """Storage dtype of the parameters."""
        return self.arrays["wte"].dtype

    def checksum(self) -> str:
        """SHA-256 over names and raw bytes, in name order.

        Returns:
            str: Hex digest.
        """
        digest = hashlib.sha256()
        for name in sorted(self.arrays):
            digest.update(name.encode())
            digest.update(np.ascontiguousarray(self.arrays[name]).tobytes())
        return digest.hexdigest()

    def astype(self, dtype: npt.DTypeLike) -> "ModelParams":
        """Copy with every array cast to `dtype`."""
        return ModelParams(
            config=self.config,
            arrays={k: v.astype(dtype) for k, v in self.arrays.items()},
            frozen=self.frozen,
        )

    def watch(
        self,
        tape: Tape,
        trainable: bool = False,
        overrides: t.Mapping[str, DiffTensor] | None = None,
    ) -> t.Dict[str, DiffTensor]:
        """Put every array on `tape`.

        Args:
            tape (Tape): Destination tape.
            trainable (bool): Whether gradients should reach the arrays.
            overrides (Mapping[str, DiffTensor] | None): Tensors used in
                place of the stored arrays (gradient checks).

        Returns:
            Dict[str, DiffTensor]: Tensors by parameter name.
        """
        replaced: t.Mapping[str, DiffTensor] = overrides or {}
        return {
            name: (
                replaced[name]
                if name in replaced
                else tape.leaf(values, requires_grad=trainable, name=name)
            )
            for name, values in self.arrays.items()
        }

    def assign(self, name: str, values: Array) -> None:
        """Overwrite one parameter; refused while frozen."""
        if self.frozen:
            raise FrozenParameterError(name)
        self.arrays[name] = values.astype(self.arrays[name].dtype)


@dataclass
class ForwardResult:
    """Logits plus the stage inputs captured during a forward pass."""

    logits: DiffTensor
    taps: t.Dict[int, DiffTensor] = field(default_factory=dict)


@dataclass
class PrefillResult:
    """Outcome of a physically pruned prefill."""

    logits: Array
    positions: npt.NDArray[np.int64]
    cache: KVCache
    mask: TokenMask
    stage_counts: t.List[int]


def init_model(
    config: ModelConfig, dtype: npt.DTypeLike | None = None
) -> ModelParams:
    """Deterministic scaled-normal initialization from `config.seed`.

    Residual output projections use `0.02 / sqrt(2 * n_layers)`. Values
    are drawn at 64-bit and cast, so every precision sees the same draw.

    Args:
        config (ModelConfig): Model shape.
        dtype (DTypeLike | None): Storage dtype; run-wide default if None.

    Returns:
        ModelParams: Fresh frozen parameters.
    """
    rng = np.random.default_rng(config.seed)
    d, ff = config.d_model, config.d_ff
    proj_std: float = INIT_STD / math.sqrt(2.0 * config.n_layers)

    def normal(shape: t.Tuple[int, ...], std: float = INIT_STD) -> Array:
        return rng.normal(0.0, std, shape)

    arrays: t.Dict[str, Array] = {
        "wte": normal((config.vocab_size, d)),
        "wpe": normal((config.max_seq_len, d)),
    }
    for layer in range(config.n_layers):
        prefix: str = f"h.{layer}."
        arrays[prefix + "ln_1.g"] = np.ones(d)
        arrays[prefix + "ln_1.b"] = np.zeros(d)
        for part in ("q", "k", "v"):
            arrays[prefix + f"attn.w_{part}"] = normal((d, d))
            arrays[prefix + f"attn.b_{part}"] = np.zeros(d)
        arrays[prefix + "attn.w_o"] = normal((d, d), proj_std)
        arrays[prefix + "attn.b_o"] = np.zeros(d)
        arrays[prefix + "ln_2.g"] = np.ones(d)
        arrays[prefix + "ln_2.b"] = np.zeros(d)
        arrays[prefix + "mlp.w_fc"] = normal((d, ff))
        arrays[prefix + "mlp.b_fc"] = np.zeros(ff)
        arrays[prefix + "mlp.w_proj"] = normal((ff, d), proj_std)
        arrays[prefix + "mlp.b_proj"] = np.zeros(d)
    arrays["ln_f.g"] = np.ones(d)
    arrays["ln_f.b"] = np.zeros(d)
    arrays["lm_head"] = normal((d, config.vocab_size))

    target = np.dtype(dtype) if dtype is not None else SETTINGS.dtype
    return ModelParams(
        config=config,
        arrays={name: array.astype(target) for name, array in arrays.items()},
    )


def _attention_bias(
    query_pos: npt.NDArray[np.int64],
    key_pos: npt.NDArray[np.int64],
    key_keep: npt.NDArray[np.bool_] | None,
) -> Array:
    allowed = key_pos[None, :] <= query_pos[:, None]
    if key_keep is not None:
        allowed &= key_keep[None, :] | (key_pos[None, :] == query_pos[:, None])
    return np.where(allowed, 0.0, MASK_VALUE)


def _split_heads(x: DiffTensor, heads: int) -> DiffTensor:
    rows, width = x.shape
    return dm.transpose(
        dm.reshape(x, (rows, heads, width // heads)), (1, 0, 2)
    )


def _merge_heads(x: DiffTensor) -> DiffTensor:
    heads, rows, head_dim = x.shape
    return dm.reshape(dm.transpose(x, (1, 0, 2)), (rows, heads * head_dim))


@dataclass
class BlockOutput:
    """Result of one transformer block."""

    hidden: DiffTensor
    keys: Array
    values: Array
    attention: Array


def run_block(  # pylint: disable=too-many-arguments,too-many-locals
    weights: Weights,
    config: ModelConfig,
    layer: int,
    x: DiffTensor,
    positions: npt.NDArray[np.int64],
    key_keep: npt.NDArray[np.bool_] | None = None,
    gate: DiffTensor | None = None,
    past: KVLayer | None = None,
) -> BlockOutput:
    """Pre-norm block: `x + attn(ln_1(x))`, then `+ mlp(ln_2(.))`.

    Args:
        weights (Weights): Parameter tensors.
        config (ModelConfig): Model shape.
        layer (int): Block index.
        x (DiffTensor): `n x d_model` block input.
        positions (NDArray[int64]): Original position of every row.
        key_keep (NDArray[bool_] | None): Rows usable as keys; a row
            always attends to itself.
        gate (DiffTensor | None): Soft keep weight of every row as a key.
        past (KVLayer | None): Cached entries preceding the rows.

    Returns:
        BlockOutput: New hidden states plus this layer's keys and values.
    """
    prefix: str = f"h.{layer}."
    heads: int = config.n_heads
    tape: Tape = x.tape

    normed = dm.layer_norm(
        x, weights[prefix + "ln_1.g"], weights[prefix + "ln_1.b"]
    )

    def project(part: str) -> DiffTensor:
        return _split_heads(
            dm.add(
                dm.matmul(normed, weights[prefix + f"attn.w_{part}"]),
                weights[prefix + f"attn.b_{part}"],
            ),
            heads,
        )

    q, k, v = project("q"), project("k"), project("v")
    new_keys, new_values = k.values, v.values
    key_pos = positions
    if past is not None and len(past):
        k = dm.concat([tape.constant(past.keys), k], axis=1)
        v = dm.concat([tape.constant(past.values), v], axis=1)
        key_pos = np.concatenate([past.positions, positions])

    scores = dm.add_constant(
        dm.scale(
            dm.matmul(q, dm.transpose(k, (0, 2, 1))),
            1.0 / math.sqrt(config.head_dim),
        ),
        _attention_bias(positions, key_pos, key_keep),
    )
    probs = (
        dm.softmax_rows(scores)
        if gate is None
        else dm.policy_softmax_rows(scores, gate)
    )
    attended = dm.add(
        dm.matmul(
            _merge_heads(dm.matmul(probs, v)), weights[prefix + "attn.w_o"]
        ),
        weights[prefix + "attn.b_o"],
    )
    x = dm.add(x, attended)

    normed = dm.layer_norm(
        x, weights[prefix + "ln_2.g"], weights[prefix + "ln_2.b"]
    )
    hidden = dm.gelu(
        dm.add(
            dm.matmul(normed, weights[prefix + "mlp.w_fc"]),
            weights[prefix + "mlp.b_fc"],
        )
    )
    x = dm.add(
        x,
        dm.add(
            dm.matmul(hidden, weights[prefix + "mlp.w_proj"]),
            weights[prefix + "mlp.b_proj"],
        ),
    )
    return BlockOutput(
        hidden=x,
        keys=new_keys,
        values=new_values,
        attention=probs.values.mean(axis=0),
    )


def _check_tokens(
    config: ModelConfig, tokens: npt.NDArray[np.int64], first_position: int = 0
) -> None:
    if tokens.shape[0] == 0:
        raise EmptySequenceError()
    if first_position + tokens.shape[0] > config.max_seq_len:
        raise SequenceTooLongError(
            first_position + tokens.shape[0], config.max_seq_len
        )


def embed(
    weights: Weights, tokens: npt.NDArray[np.int64], positions: npt.ArrayLike
) -> DiffTensor:
    """Token plus learned absolute position embeddings."""
    return dm.add(
        dm.embedding_gather(weights["wte"], tokens),
        dm.embedding_gather(weights["wpe"], positions),
    )


def unembed(weights: Weights, x: DiffTensor) -> DiffTensor:
    """Final norm and output projection."""
    return dm.matmul(
        dm.layer_norm(x, weights["ln_f.g"], weights["ln_f.b"]),
        weights["lm_head"],
    )


def forward(  # pylint: disable=too-many-arguments,too-many-locals
    params: ModelParams,
    tokens: npt.ArrayLike,
    token_mask: TokenMask | None = None,
    tap_layers: t.Iterable[int] = (),
    gate_hook: GateHook | None = None,
    tape: Tape | None = None,
    weights: Weights | None = None,
) -> ForwardResult:
    """Full-length forward pass; pruning is simulated by attention masking.

    Dropped tokens stop being visible as keys from the layer of the stage
    that dropped them. Their own rows keep being computed and are expected
    to be ignored by the caller.

    Args:
        params (ModelParams): Model parameters.
        tokens (ArrayLike): Token ids, length `N`.
        token_mask (TokenMask | None): Hard per-stage keep vectors.
        tap_layers (Iterable[int]): Layers whose input is captured and
            tracked, so gradients can be read there.
        gate_hook (GateHook | None): Called with the input of every tapped
            layer; a returned length-`N` gate becomes the soft key weight
            for that layer and all later ones.
        tape (Tape | None): Tape to record on; a fresh inference tape at
            the parameters' precision if None.
        weights (Weights | None): Parameter tensors already on `tape`.

    Returns:
        ForwardResult: `N x vocab` logits and the captured stage inputs.
    """
    ids = np.asarray(tokens, dtype=np.int64)
    _check_tokens(params.config, ids)
    if token_mask is not None and token_mask.length != ids.shape[0]:
        raise MaskLengthError(ids.shape[0], token_mask.length)
    if tape is None:
        tape = Tape(dtype=params.dtype, grad_enabled=False)
    if weights is None:
        weights = params.watch(tape)
    positions = np.arange(ids.shape[0], dtype=np.int64)
    taps_wanted = set(tap_layers)

    x = embed(weights, ids, positions)
    gate: DiffTensor | None = None
    taps: t.Dict[int, DiffTensor] = {}
    for layer in range(params.config.n_layers):
        if layer in taps_wanted:
            x = dm.watch(x)
            taps[layer] = x
            hooked = gate_hook(layer, x, positions) if gate_hook else None
            if hooked is not None:
                gate = hooked
        key_keep = token_mask.keep_at(layer) if token_mask else None
        x = run_block(
            weights, params.config, layer, x, positions, key_keep, gate
        ).hidden
    return ForwardResult(logits=unembed(weights, x), taps=taps)


def prefill_pruned(  # pylint: disable=too-many-locals
    params: ModelParams,
    tokens: npt.ArrayLike,
    schedule: PruneSchedule,
    scorers: StageScorer | None = None,
) -> PrefillResult:
    """Prefill that physically removes pruned tokens at every stage.

    Args:
        params (ModelParams): Model parameters.
        tokens (ArrayLike): Prompt token ids.
        schedule (PruneSchedule): Stages and protection rule.
        scorers (StageScorer | None): Keep-score source; required when a
            stage actually prunes.

    Returns:
        PrefillResult: Logits of the surviving rows, their positions, the
            cache of surviving tokens and the per-stage mask history.
    """
    ids = np.asarray(tokens, dtype=np.int64)
    config = params.config
    _check_tokens(config, ids)
    check_schedule(schedule, config.n_layers)
    tape = Tape(dtype=params.dtype, grad_enabled=False)
    weights = params.watch(tape)

    length: int = ids.shape[0]
    protected = protected_set(
        length, schedule.sink_count, schedule.local_fraction
    )
    mask = TokenMask.full(length, protected)
    rows = np.arange(length, dtype=np.int64)
    x = embed(weights, ids, rows)
    layers: t.List[KVLayer] = []
    masses: t.List[npt.NDArray[np.float64]] = []
    counts: t.List[int] = []

    for layer in range(config.n_layers):
        stage = schedule.stage_at(layer)
        if stage is not None:
            ratio: float = schedule.stages[stage].keep_ratio
            target: int = max(keep_count(ratio, length), protected.shape[0])
            full_scores = np.zeros(length)
            kept = rows
            if target < rows.shape[0]:
                if scorers is None:
                    raise MissingScorerError(stage)
                full_scores[rows] = scorers.stage_scores(stage, x.values, rows)
                kept = select_topk(
                    full_scores, ratio, protected, mask.latest()
                )
            vector = np.zeros(length, dtype=bool)
            vector[kept] = True
            mask = propagate_mask(mask, vector, layer)
            if kept.shape[0] < rows.shape[0]:
                x = dm.gather_rows(x, np.searchsorted(rows, kept))
                rows = kept
            counts.append(int(rows.shape[0]))
        out = run_block(weights, config, layer, x, rows)
        x = out.hidden
        layers.append(KVLayer(out.keys, out.values, rows.copy()))
        masses.append(out.attention.sum(axis=0).astype(np.float64))

    cache = KVCache(
        layers=layers,
        heavy_hitters=HeavyHitterState(masses=masses),
        next_position=length,
    )
    return PrefillResult(
        logits=unembed(weights, x).values,
        positions=rows,
        cache=cache,
        mask=mask,
        stage_counts=counts,
    )


def decode_step(
    params: ModelParams,
    cache: KVCache,
    token: int,
    evict_policy: KVCachePolicy | None = None,
) -> t.Tuple[Array, KVCache]:
    """Process one token against the cache.

    Args:
        params (ModelParams): Model parameters.
        cache (KVCache): Prefilled cache, updated in place.
        token (int): Token id at `cache.next_position`.
        evict_policy (KVCachePolicy | None): Eviction applied after the
            step; the budget is bound on first use.

    Returns:
        Tuple[Array, KVCache]: Next-token logits and the cache.
    """
    config = params.config
    if len(cache.layers) != config.n_layers:
        raise CacheLayoutError(config.n_layers, len(cache.layers))
    if evict_policy is not None and evict_policy.active:
        bind_budget(cache, evict_policy)
    position: int = cache.next_position
    ids = np.asarray([token], dtype=np.int64)
    _check_tokens(config, ids, position)

    tape = Tape(dtype=params.dtype, grad_enabled=False)
    weights = params.watch(tape)
    rows = np.asarray([position], dtype=np.int64)
    x = embed(weights, ids, rows)
    for layer in range(config.n_layers):
        past = cache.layers[layer]
        out = run_block(weights, config, layer, x, rows, past=past)
        x = out.hidden
        past.append(out.keys, out.values, position)
        state = cache.heavy_hitters
        state.masses[layer] = np.append(state.masses[layer], 0.0)
        accumulate_attention(state, layer, out.attention[0])
    cache.next_position = position + 1
    if evict_policy is not None:
        evict(cache, evict_policy)
    return unembed(weights, x).values[0], cache
