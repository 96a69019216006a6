"""Per-layer key/value cache and its eviction policies."""

import logging
import math
import typing as t
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import numpy.typing as npt
from pydantic import BaseModel, ConfigDict, Field, model_validator

from sdtp.core.diffmath import Array
from sdtp.core.errors import SdtpError

LOGGER: logging.Logger = logging.getLogger(__name__)


class PolicyKind(str, Enum):
    """Eviction rule."""

    NONE = "none"
    LOCAL = "local"
    HEAVY_HITTER = "heavy_hitter"


POLICY_ALIASES: t.Dict[str, PolicyKind] = {
    "none": PolicyKind.NONE,
    "local": PolicyKind.LOCAL,
    "h2o": PolicyKind.HEAVY_HITTER,
    "heavy_hitter": PolicyKind.HEAVY_HITTER,
}


class BudgetTooSmallError(SdtpError, ValueError):
    """Raised when a cache budget cannot hold the sinks plus one entry."""

    def __init__(self, budget: int, sink_count: int) -> None:
        """Initialize BudgetTooSmallError.

        Args:
            budget (int): Absolute budget in entries.
            sink_count (int): Configured sink entries.
        """
        self.budget = budget
        self.sink_count = sink_count
        super().__init__(
            f"cache budget {budget} must be at least sink_count + 1 = "
            f"{sink_count + 1}"
        )


class CacheLayoutError(SdtpError, ValueError):
    """Raised when a cache does not match the model it is used with."""

    def __init__(self, expected: int, actual: int) -> None:
        self.expected = expected
        self.actual = actual
        super().__init__(
            f"cache has {actual} layers, model has {expected}"
        )


class KVCachePolicy(BaseModel):
    """Decode-time cache budget.

    The budget is a share of the cached prefill length (after pruning)
    unless `budget_tokens` pins it.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: PolicyKind = PolicyKind.NONE
    budget_fraction: float = Field(0.40, gt=0.0, le=1.0)
    budget_tokens: int | None = Field(None, ge=1)
    local_fraction: float = Field(0.5, ge=0.0, le=1.0)
    sink_count: int = Field(4, ge=0)

    @model_validator(mode="after")
    def check_budget(self) -> "KVCachePolicy":
        """Reject pinned budgets that cannot hold the sinks.

        Returns:
            KVCachePolicy: The validated policy.
        """
        if (
            self.kind != PolicyKind.NONE
            and self.budget_tokens is not None
            and self.budget_tokens < self.sink_count + 1
        ):
            raise BudgetTooSmallError(self.budget_tokens, self.sink_count)
        return self

    @classmethod
    def parse(cls, text: str) -> "KVCachePolicy":
        """Build a policy from `kind[:fraction]`, e.g. `h2o:0.4`.

        Args:
            text (str): Policy string.

        Returns:
            KVCachePolicy: The policy.
        """
        name, _, amount = text.partition(":")
        kind: PolicyKind | None = POLICY_ALIASES.get(name.strip().lower())
        if kind is None:
            raise ValueError(
                f"unknown cache policy {name!r}; expected one of "
                f"{', '.join(sorted(POLICY_ALIASES))}"
            )
        if not amount:
            return cls(kind=kind)
        return cls(kind=kind, budget_fraction=float(amount))

    def describe(self) -> str:
        """Short form for reports, e.g. `heavy_hitter:0.4`."""
        if not self.active:
            return self.kind.value
        amount: str = (
            f"{self.budget_tokens}"
            if self.budget_tokens is not None
            else f"{self.budget_fraction:g}"
        )
        return f"{self.kind.value}:{amount}"

    @property
    def active(self) -> bool:
        """Whether eviction ever happens."""
        return self.kind != PolicyKind.NONE

    def absolute_budget(self, prefill_length: int) -> int:
        """Budget in entries for a cache filled with `prefill_length`.

        Args:
            prefill_length (int): Cached prefill entries.

        Returns:
            int: Entries allowed per layer.
        """
        budget: int = (
            self.budget_tokens
            if self.budget_tokens is not None
            else math.ceil(round(self.budget_fraction * prefill_length, 9))
        )
        if budget < self.sink_count + 1:
            raise BudgetTooSmallError(budget, self.sink_count)
        return budget

    def local_count(self, budget: int) -> int:
        """Most-recent entries kept under a heavy-hitter budget."""
        return min(
            budget - min(self.sink_count, budget - 1),
            max(1, int(math.ceil(round(self.local_fraction * budget, 9)))),
        )


@dataclass
class KVLayer:
    """Cached keys and values of one layer, `heads x entries x head_dim`."""

    keys: Array
    values: Array
    positions: npt.NDArray[np.int64]

    def __len__(self) -> int:
        return int(self.positions.shape[0])

    def append(
        self, keys: Array, values: Array, position: int
    ) -> None:
        """Add one entry at the end."""
        self.keys = np.concatenate([self.keys, keys], axis=1)
        self.values = np.concatenate([self.values, values], axis=1)
        self.positions = np.append(self.positions, np.int64(position))

    def take(self, index: npt.NDArray[np.int64]) -> None:
        """Keep only the entries at `index` (ascending)."""
        self.keys = self.keys[:, index]
        self.values = self.values[:, index]
        self.positions = self.positions[index]


@dataclass
class HeavyHitterState:
    """Attention mass received by every cached entry, per layer."""

    masses: t.List[npt.NDArray[np.float64]] = field(default_factory=list)


@dataclass
class KVCache:
    """Single-owner decode state of one generation stream."""

    layers: t.List[KVLayer]
    heavy_hitters: HeavyHitterState
    next_position: int
    budget: int | None = None

    def sizes(self) -> t.List[int]:
        """Entry count of every layer."""
        return [len(layer) for layer in self.layers]


def accumulate_attention(
    state: HeavyHitterState, layer: int, weights: npt.ArrayLike
) -> HeavyHitterState:
    """Add one step's attention weights into a layer's masses.

    Args:
        state (HeavyHitterState): State to update in place.
        layer (int): Layer index.
        weights (ArrayLike): Weight received by each cached entry.

    Returns:
        HeavyHitterState: The same state.
    """
    received = np.asarray(weights, dtype=np.float64)
    current = state.masses[layer]
    if received.shape != current.shape:
        raise ValueError(
            f"layer {layer}: {received.shape[0]} weights for "
            f"{current.shape[0]} cached entries"
        )
    state.masses[layer] = current + received
    return state


def heavy_hitter_keep(
    positions: npt.ArrayLike,
    masses: npt.ArrayLike,
    budget: int,
    sink_count: int,
    local_count: int,
) -> npt.NDArray[np.int64]:
    """Entries surviving a heavy-hitter eviction.

    Sinks (the earliest `sink_count` entries) and the `local_count` most
    recent entries stay; the rest of the budget goes to the largest
    accumulated masses, more recent position winning ties.

    Args:
        positions (ArrayLike): Original position of every entry, ascending.
        masses (ArrayLike): Accumulated attention mass of every entry.
        budget (int): Entries to keep.
        sink_count (int): Leading entries always kept.
        local_count (int): Trailing entries always kept.

    Returns:
        NDArray[int64]: Kept entry indices, ascending.
    """
    pos = np.asarray(positions, dtype=np.int64)
    mass = np.asarray(masses, dtype=np.float64)
    count: int = pos.shape[0]
    if count <= budget:
        return np.arange(count, dtype=np.int64)
    forced = np.zeros(count, dtype=bool)
    forced[: min(sink_count, count)] = True
    forced[count - local_count:] = True
    others = np.flatnonzero(~forced)
    order = np.lexsort((-pos[others], -mass[others]))
    chosen = others[order[: max(0, budget - int(forced.sum()))]]
    return np.sort(np.concatenate([np.flatnonzero(forced), chosen]))


def local_keep(
    count: int, budget: int, sink_count: int
) -> npt.NDArray[np.int64]:
    """Entries surviving a sink-plus-recent eviction."""
    if count <= budget:
        return np.arange(count, dtype=np.int64)
    sinks = np.arange(min(sink_count, budget - 1))
    recent = np.arange(count - (budget - sinks.shape[0]), count)
    return np.concatenate([sinks, recent]).astype(np.int64)


def bind_budget(cache: KVCache, policy: KVCachePolicy) -> KVCache:
    """Fix the absolute budget from the cached prefill length, then evict."""
    if policy.active and cache.budget is None:
        cache.budget = policy.absolute_budget(cache.layers[-1].positions.size)
        LOGGER.debug("cache budget bound to %d entries", cache.budget)
    return evict(cache, policy)


def evict(cache: KVCache, policy: KVCachePolicy) -> KVCache:
    """Shrink every layer over budget according to `policy`.

    Args:
        cache (KVCache): Cache to update in place.
        policy (KVCachePolicy): Eviction rule.

    Returns:
        KVCache: The same cache.
    """
    if not policy.active:
        return cache
    if cache.budget is None:
        return bind_budget(cache, policy)
    budget: int = cache.budget
    for index, layer in enumerate(cache.layers):
        if len(layer) <= budget:
            continue
        if policy.kind == PolicyKind.LOCAL:
            kept = local_keep(len(layer), budget, policy.sink_count)
        else:
            kept = heavy_hitter_keep(
                layer.positions,
                cache.heavy_hitters.masses[index],
                budget,
                policy.sink_count,
                policy.local_count(budget),
            )
        layer.take(kept)
        cache.heavy_hitters.masses[index] = cache.heavy_hitters.masses[
            index
        ][kept]
    return cache
