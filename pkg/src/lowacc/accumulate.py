"""Reference p-bit accumulation engine for integer dot products.

Everything here works on plain Python integers, so partial products and the
exact final sum are never subject to overflow themselves; the accumulator
width ``p`` only governs how intermediate values are checked, clamped or
wrapped. This module is the semantic reference. :mod:`lowacc.batch` is a
vectorised equivalent tested against it.

Accumulation model
------------------
A sequential accumulation of ``v0, v1, ...`` materialises the running sums
``v0, v0+v1, ...``; loading the first value counts as a step, so a single
product wider than ``p`` bits is already an overflow. Every materialised
value outside ``[-2**(p-1), 2**(p-1) - 1]`` is logged as an
:class:`AccumEvent`.

The sorted dot product repeatedly splits the non-zero values by sign, sorts
positives descending and negatives ascending, and adds them pairwise (each
pairwise sum is a materialised value). Unpaired values are carried over.
Once a single value remains, all values share a sign, or ``max_rounds``
rounds have been spent, the remaining values are summed sequentially in list
order. A value that was already materialised is not re-checked when it
starts that final chain.
"""

from __future__ import annotations

import enum
import itertools
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

MIN_ACC_BITS = 2
MAX_ACC_BITS = 64


class Policy(str, enum.Enum):
    EXACT = "exact"
    SATURATE = "saturate"
    WRAP = "wrap"
    SORTED = "sorted"
    SORTED_TILED = "sorted_tiled"
    # saturate, but recompute transient-only dot products at full width
    RESOLVE = "resolve"


class EventKind(str, enum.Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"


class OverflowClass(str, enum.Enum):
    NONE = "none"
    TRANSIENT = "transient"
    PERSISTENT = "persistent"


@dataclass(frozen=True)
class AccumEvent:
    position: int
    value: int
    kind: EventKind


@dataclass(frozen=True)
class AccumConfig:
    """Accumulator width and the arithmetic applied at each accumulation.

    ``clip`` only affects the sorted policies: when set, every materialised
    value is also saturated (sort *and* clip), otherwise the sorted engine
    keeps exact values and just logs events.
    """

    p: int = 32
    policy: Policy = Policy.EXACT
    tile: int | None = None
    max_rounds: int = 8
    clip: bool = False

    def __post_init__(self):
        object.__setattr__(self, "policy", Policy(self.policy))
        if not MIN_ACC_BITS <= self.p <= MAX_ACC_BITS:
            raise ValueError(f"accumulator bits must lie in [{MIN_ACC_BITS}, {MAX_ACC_BITS}], got {self.p}")
        if self.policy is Policy.SORTED_TILED and (self.tile is None or self.tile < 1):
            raise ValueError("tiled policy needs tile >= 1")
        if self.max_rounds < 0:
            raise ValueError("max_rounds must be non-negative")

    @property
    def lo(self) -> int:
        return -(1 << (self.p - 1))

    @property
    def hi(self) -> int:
        return (1 << (self.p - 1)) - 1

    def label(self) -> str:
        name = self.policy.value
        if self.policy is Policy.SORTED_TILED:
            name = f"{name}{self.tile}"
        if self.clip and self.policy in (Policy.SORTED, Policy.SORTED_TILED):
            name += "_clip"
        return name


def acc_range(p: int) -> tuple[int, int]:
    return -(1 << (p - 1)), (1 << (p - 1)) - 1


def fits(value: int, p: int) -> bool:
    lo, hi = acc_range(p)
    return lo <= value <= hi


def wrap(value: int, p: int) -> int:
    """Two's-complement reduction of ``value`` to ``p`` bits."""
    lo = -(1 << (p - 1))
    return ((value - lo) % (1 << p)) + lo


@dataclass
class DotTrace:
    """Exact record of one dot product evaluated left to right."""

    products: list[int]
    final: int
    running: list[int]
    events: list[AccumEvent] = field(default_factory=list)

    @property
    def length(self) -> int:
        return len(self.products)


class SortedOutcome(NamedTuple):
    result: int
    events: list[AccumEvent]
    rounds: int


class TiledOutcome(NamedTuple):
    result: int
    events: list[AccumEvent]
    tile_results: list[int]


def _ints(v) -> list[int]:
    if hasattr(v, "values") and hasattr(v, "params"):
        v = v.values
    return [int(a) for a in np.asarray(v).ravel()]


def _event(position: int, value: int, hi: int) -> AccumEvent:
    kind = EventKind.POSITIVE if value > hi else EventKind.NEGATIVE
    return AccumEvent(position, value, kind)


def dot_exact(w, x, p: int | None = None) -> DotTrace:
    """Exact dot product with left-to-right running sums.

    When ``p`` is given, running sums outside the ``p``-bit range are logged
    as events; nothing is clamped.
    """
    w, x = _ints(w), _ints(x)
    if len(w) != len(x):
        raise ValueError(f"length mismatch: {len(w)} vs {len(x)}")
    products = [a * b for a, b in zip(w, x)]
    running = list(itertools.accumulate(products))
    events = []
    if p is not None:
        lo, hi = acc_range(p)
        events = [_event(i, s, hi) for i, s in enumerate(running) if not lo <= s <= hi]
    return DotTrace(products, sum(products), running, events)


def accumulate(products: Sequence[int], cfg: AccumConfig,
               order: Sequence[int] | None = None) -> tuple[int, list[AccumEvent]]:
    """Accumulate ``products`` in ``order`` under ``cfg``'s arithmetic.

    The sorted policies choose their own order, so ``order`` is ignored for
    them.
    """
    products = _ints(products)
    if cfg.policy is Policy.SORTED:
        res = sorted_dot(products, cfg)
        return res.result, res.events
    if cfg.policy is Policy.SORTED_TILED:
        res = sorted_dot_tiled(products, cfg)
        return res.result, res.events
    if order is None:
        seq = products
    else:
        if sorted(order) != list(range(len(products))):
            raise ValueError("order is not a permutation of the product indices")
        seq = [products[i] for i in order]

    lo, hi = cfg.lo, cfg.hi
    acc = 0
    events = []
    for pos, v in enumerate(seq):
        acc += v
        if acc > hi or acc < lo:
            events.append(_event(pos, acc, hi))
            if cfg.policy in (Policy.SATURATE, Policy.RESOLVE):
                acc = hi if acc > hi else lo
            elif cfg.policy is Policy.WRAP:
                acc = wrap(acc, cfg.p)
    if cfg.policy is Policy.RESOLVE and lo <= sum(seq) <= hi:
        acc = sum(seq)
    return acc, events


class _Chain:
    """Materialises values under one accumulator config, logging events."""

    def __init__(self, cfg: AccumConfig, events: list[AccumEvent], step: int = 0):
        self.lo, self.hi, self.clip = cfg.lo, cfg.hi, cfg.clip
        self.events = events
        self.step = step

    def put(self, v: int) -> int:
        pos = self.step
        self.step += 1
        if v > self.hi or v < self.lo:
            self.events.append(_event(pos, v, self.hi))
            if self.clip:
                v = self.hi if v > self.hi else self.lo
        return v


def _sorted_core(items: list[tuple[int, bool]], max_rounds: int, chain: _Chain,
                 trace: list | None = None) -> tuple[int, int]:
    """Run the sorted pairing loop on ``(value, materialised)`` items.

    When ``trace`` is a list, one dict per pairing round is appended to it.
    """
    vals = [t for t in items if t[0] != 0]
    rounds = 0
    while len(vals) > 1 and rounds < max_rounds:
        pos = sorted((t for t in vals if t[0] > 0), key=lambda t: -t[0])
        neg = sorted((t for t in vals if t[0] < 0), key=lambda t: t[0])
        m = min(len(pos), len(neg))
        if m == 0:
            break
        rounds += 1
        paired = [(chain.put(pos[i][0] + neg[i][0]), True) for i in range(m)]
        rest = pos[m:] if len(pos) > len(neg) else neg[m:]
        if trace is not None:
            trace.append({"round": rounds, "positives": [t[0] for t in pos],
                          "negatives": [t[0] for t in neg], "pairs": [t[0] for t in paired],
                          "carry": [t[0] for t in rest]})
        vals = [t for t in paired if t[0] != 0] + rest

    if not vals:
        return 0, rounds
    acc, done = vals[0]
    if not done:
        acc = chain.put(acc)
    for v, _ in vals[1:]:
        acc = chain.put(acc + v)
    return acc, rounds


def sorted_dot(products: Sequence[int], cfg: AccumConfig, trace: list | None = None) -> SortedOutcome:
    """Sorted dot product over already-formed partial products."""
    events: list[AccumEvent] = []
    result, rounds = _sorted_core([(v, False) for v in _ints(products)], cfg.max_rounds,
                                  _Chain(cfg, events), trace)
    return SortedOutcome(result, events, rounds)


def sorted_dot_tiled(products: Sequence[int], cfg: AccumConfig) -> TiledOutcome:
    """Sorted dot product applied per contiguous tile, then across tile sums."""
    k = cfg.tile if cfg.tile is not None else max(len(products), 1)
    if k < 1:
        raise ValueError("tile length must be >= 1")
    products = _ints(products)
    events: list[AccumEvent] = []
    chain = _Chain(cfg, events)
    tile_results = []
    for start in range(0, len(products), k):
        tile = [(v, False) for v in products[start:start + k]]
        tile_results.append(_sorted_core(tile, cfg.max_rounds, chain)[0])
    result, _ = _sorted_core([(v, True) for v in tile_results], cfg.max_rounds, chain)
    return TiledOutcome(result, events, tile_results)


def classify_result(final: int, n_events: int, p: int) -> OverflowClass:
    if not fits(final, p):
        return OverflowClass.PERSISTENT
    if n_events:
        return OverflowClass.TRANSIENT
    return OverflowClass.NONE


def classify(trace: DotTrace | Sequence[int], p: int,
             order: Sequence[int] | None = None) -> OverflowClass:
    """Persistent if the exact sum leaves the p-bit range, else transient if
    accumulating in ``order`` (natural order by default) overflows."""
    products = trace.products if isinstance(trace, DotTrace) else _ints(trace)
    final = sum(products)
    if not fits(final, p):
        return OverflowClass.PERSISTENT
    _, events = accumulate(products, AccumConfig(p=p), order)
    return OverflowClass.TRANSIENT if events else OverflowClass.NONE


SAFE_ORDER_BUDGET = 10


def exists_safe_order(products: Sequence[int], p: int) -> bool:
    """Exhaustive search for an order whose running sums all fit in p bits."""
    products = _ints(products)
    if len(products) > SAFE_ORDER_BUDGET:
        raise ValueError(f"search limited to {SAFE_ORDER_BUDGET} products, got {len(products)}")
    lo, hi = acc_range(p)
    if not lo <= sum(products) <= hi:
        return False

    def search(acc: int, remaining: list[int]) -> bool:
        if not remaining:
            return True
        for i, v in enumerate(remaining):
            if v in remaining[:i]:
                continue  # same value already tried at this depth
            s = acc + v
            if lo <= s <= hi and search(s, remaining[:i] + remaining[i + 1:]):
                return True
        return False

    return search(0, products)


def a2q_l1_bound(b: int, p: int) -> float:
    """Largest weight L1 norm that cannot overflow p bits against b-bit inputs."""
    if b < 2 or p < 2:
        raise ValueError("bitwidths must be >= 2")
    return ((1 << (p - 1)) - 1) / (1 << (b - 1))


def overflow_threshold(b: int, p: int) -> int:
    """Dot length from which b-bit data may overflow a p-bit accumulator."""
    if p > 2 * b:
        return 1 << (p - 2 * b)
    return 1
