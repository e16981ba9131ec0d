"""N:M semi-structured magnitude pruning.

Convention used throughout: ``n`` is the number of entries *pruned* in every
consecutive group of ``m`` entries along the reduction axis. Groups never
straddle rows; for a weight of shape ``(out, *rest)`` each output unit's
flattened ``rest`` is split into runs of ``m``. A trailing partial group of
``g < m`` entries prunes ``floor(g * n / m)`` of them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .quant import round_half_away


def _as_rows(shape: tuple[int, ...]) -> tuple[int, int]:
    if len(shape) == 0:
        return 1, 1
    if len(shape) == 1:
        return 1, shape[0]
    return shape[0], int(np.prod(shape[1:]))


@dataclass(frozen=True)
class NMSparsePattern:
    """Keep-mask for one tensor with its group geometry."""

    mask: np.ndarray
    n: int
    m: int

    def __post_init__(self):
        if not 0 <= self.n < self.m:
            raise ValueError(f"need 0 <= n < m, got n={self.n}, m={self.m}")
        object.__setattr__(self, "mask", np.asarray(self.mask, dtype=bool))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.mask.shape

    @classmethod
    def dense(cls, shape, m: int = 1) -> "NMSparsePattern":
        return cls(np.ones(shape, dtype=bool), 0, max(m, 1))

    def group_pruned_counts(self) -> np.ndarray:
        """Pruned count per group, shape ``(rows, n_groups)``; padding counts as kept."""
        rows, cols = _as_rows(self.shape)
        flat = self.mask.reshape(rows, cols)
        n_groups = -(-cols // self.m)
        padded = np.ones((rows, n_groups * self.m), dtype=bool)
        padded[:, :cols] = flat
        return (~padded).reshape(rows, n_groups, self.m).sum(axis=2)


def pruned_per_group(n: int, m: int, group_len: int) -> int:
    return (group_len * n) // m


def _prune_rows(mag: np.ndarray, keep: np.ndarray, n: int, m: int) -> np.ndarray:
    """Extend ``keep`` so every group has its quota pruned, smallest |w| first.

    Already-pruned entries stay pruned and count toward the quota. Ties in
    magnitude prune the lower index first.
    """
    rows, cols = mag.shape
    keep = keep.copy()
    for start in range(0, cols, m):
        stop = min(start + m, cols)
        quota = pruned_per_group(n, m, stop - start)
        g_keep = keep[:, start:stop]
        have = (~g_keep).sum(axis=1)
        need = quota - have
        if not np.any(need > 0):
            continue
        # pruned entries sort first, then by magnitude; stable sort breaks ties by index
        key = np.where(g_keep, mag[:, start:stop], -np.inf)
        order = np.argsort(key, axis=1, kind="stable")
        rank = np.empty_like(order)
        np.put_along_axis(rank, order, np.arange(stop - start)[None, :], axis=1)
        keep[:, start:stop] = rank >= np.maximum(have, quota)[:, None]
    return keep


def nm_prune(w, n: int, m: int) -> NMSparsePattern:
    """Prune the ``n`` smallest-magnitude entries of every group of ``m``."""
    if not 0 <= n < m:
        raise ValueError(f"need 0 <= n < m, got n={n}, m={m}")
    w = np.asarray(w, dtype=np.float64)
    rows, cols = _as_rows(w.shape)
    mag = np.abs(w).reshape(rows, cols)
    keep = _prune_rows(mag, np.ones((rows, cols), dtype=bool), n, m)
    return NMSparsePattern(keep.reshape(w.shape), n, m)


def apply_mask(w, pattern: NMSparsePattern) -> np.ndarray:
    w = np.asarray(w)
    if w.shape != pattern.shape:
        raise ValueError(f"shape mismatch: tensor {w.shape} vs mask {pattern.shape}")
    return np.where(pattern.mask, w, np.zeros((), dtype=w.dtype))


def sparsity_of(pattern: NMSparsePattern) -> float:
    if pattern.mask.size == 0:
        return 0.0
    return float((~pattern.mask).sum()) / pattern.mask.size


@dataclass(frozen=True)
class PruneSchedule:
    """Iterative pruning: every ``interval`` epochs add ``increment`` sparsity.

    The per-group pruned count at step ``s`` is
    ``round(min(s * increment, target) * m)`` (ties away from zero), so with
    ``m=16`` and 10% steps the counts go 2, 3, 5, ...
    """

    target: float
    interval: int = 10
    increment: float = 0.1
    m: int = 16

    def __post_init__(self):
        if not 0.0 <= self.target < 1.0:
            raise ValueError(f"target sparsity must lie in [0, 1), got {self.target}")
        if self.interval < 1 or self.m < 1:
            raise ValueError("interval and m must be positive")
        if self.target > 0 and self.increment <= 0:
            raise ValueError("increment must be positive")
        if self.target_n >= self.m:
            raise ValueError(f"target {self.target} prunes every entry of a group of {self.m}")

    @property
    def target_n(self) -> int:
        return int(round_half_away(self.target * self.m))

    @property
    def n_steps(self) -> int:
        if self.target == 0:
            return 0
        return int(np.ceil(self.target / self.increment - 1e-9))

    @property
    def final_epoch(self) -> int:
        """Epoch at which the last pruning step fires."""
        return self.n_steps * self.interval

    def n_at(self, epoch: int) -> int:
        """Per-group pruned count in force from ``epoch`` onward."""
        step = min(epoch // self.interval, self.n_steps)
        if step == 0:
            return 0
        frac = min(step * self.increment, self.target)
        return min(int(round_half_away(frac * self.m)), self.target_n)


def schedule_step(schedule: PruneSchedule, epoch: int, w, prior: NMSparsePattern | None,
                  magnitude=None) -> NMSparsePattern:
    """Advance ``prior`` to the pruning level due at ``epoch``.

    Previously pruned positions stay pruned. ``magnitude`` overrides the
    ranking signal (e.g. quantized codes instead of the real weights); it
    defaults to ``|w|``.
    """
    w = np.asarray(w, dtype=np.float64)
    if prior is None:
        prior = NMSparsePattern.dense(w.shape, schedule.m)
    if prior.shape != w.shape:
        raise ValueError(f"shape mismatch: tensor {w.shape} vs mask {prior.shape}")
    n = max(schedule.n_at(epoch), prior.n if prior.m == schedule.m else 0)
    if n == prior.n and prior.m == schedule.m:
        return prior
    rows, cols = _as_rows(w.shape)
    mag = np.abs(w if magnitude is None else np.asarray(magnitude, dtype=np.float64))
    keep = _prune_rows(mag.reshape(rows, cols), prior.mask.reshape(rows, cols), n, schedule.m)
    return NMSparsePattern(keep.reshape(w.shape), n, schedule.m)
