"""Vectorised accumulation over many dot products at once.

Each function takes an ``(R, K)`` integer array of partial products, one dot
product per row, and returns per-row results and event counts with exactly
the semantics of :mod:`lowacc.accumulate` (natural left-to-right order for
the sequential policies). Products are held in int64; callers must keep
``K * max|product|`` below 2**62.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .accumulate import AccumConfig, OverflowClass, Policy, acc_range

_BIG = np.iinfo(np.int64).max


class BatchOutcome(NamedTuple):
    result: np.ndarray   # (R,) accumulator value after the policy
    events: np.ndarray   # (R,) number of logged events
    exact: np.ndarray    # (R,) exact sum of the products


def _as_products(products) -> np.ndarray:
    a = np.asarray(products)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise ValueError(f"expected (rows, K) products, got shape {a.shape}")
    return a.astype(np.int64, copy=False)


def _out_of_range(a: np.ndarray, p: int) -> np.ndarray:
    lo, hi = acc_range(p)
    if p >= 64:
        return np.zeros(a.shape, dtype=bool)
    return (a < lo) | (a > hi)


def natural_exact(products, p: int) -> BatchOutcome:
    a = _as_products(products)
    run = np.cumsum(a, axis=1)
    exact = run[:, -1] if a.shape[1] else np.zeros(a.shape[0], np.int64)
    return BatchOutcome(exact.copy(), _out_of_range(run, p).sum(axis=1), exact)


def natural_saturate(products, p: int) -> BatchOutcome:
    a = _as_products(products)
    lo, hi = acc_range(p)
    acc = np.zeros(a.shape[0], dtype=np.int64)
    events = np.zeros(a.shape[0], dtype=np.int64)
    for j in range(a.shape[1]):
        acc += a[:, j]
        over = (acc < lo) | (acc > hi)
        if over.any():
            events += over
            np.clip(acc, lo, hi, out=acc)
    return BatchOutcome(acc, events, a.sum(axis=1))


def natural_wrap(products, p: int) -> BatchOutcome:
    a = _as_products(products)
    run = np.cumsum(a, axis=1)
    exact = a.sum(axis=1)
    if p >= 64:
        return BatchOutcome(exact.copy(), np.zeros(a.shape[0], np.int64), exact)
    lo, _ = acc_range(p)
    wrapped = np.mod(run - lo, 1 << p) + lo
    prev = np.concatenate([np.zeros((a.shape[0], 1), np.int64), wrapped[:, :-1]], axis=1)
    events = _out_of_range(prev + a, p).sum(axis=1)
    result = wrapped[:, -1] if a.shape[1] else np.zeros(a.shape[0], np.int64)
    return BatchOutcome(result.copy(), events, exact)


def _final_phase(v: np.ndarray, f: np.ndarray, p: int, clip: bool):
    """Sequential sum of each row's non-zero values in list order."""
    lo, hi = acc_range(p)
    if v.shape[1] == 0:
        return np.zeros(v.shape[0], np.int64), np.zeros(v.shape[0], np.int64)
    nz = v != 0
    run = np.cumsum(v, axis=1)
    total = run[:, -1] if v.shape[1] else np.zeros(v.shape[0], np.int64)
    has = nz.any(axis=1)
    first = np.argmax(nz, axis=1)
    rows = np.arange(v.shape[0])
    skip_first = np.zeros_like(nz)
    skip_first[rows, first] = has & f[rows, first]
    checked = nz & ~skip_first

    mixed = (v > 0).any(axis=1) & (v < 0).any(axis=1)
    if not clip:
        events = (_out_of_range(run, p) & checked).sum(axis=1)
        return total, events
    # same-sign chains saturate to clip(cumsum); mixed chains need a real loop
    events = (_out_of_range(run, p) & checked).sum(axis=1)
    result = np.clip(total, lo, hi)
    if mixed.any():
        idx = np.flatnonzero(mixed)
        acc = np.zeros(idx.size, np.int64)
        ev = np.zeros(idx.size, np.int64)
        sub_v, sub_c = v[idx], checked[idx]
        for j in range(v.shape[1]):
            acc += sub_v[:, j]
            over = sub_c[:, j] & ((acc < lo) | (acc > hi))
            ev += over
            acc = np.where(over, np.clip(acc, lo, hi), acc)
        result[idx] = acc
        events[idx] = ev
    return result, events


def sorted_core(values, materialised, p: int, max_rounds: int = 8, clip: bool = False):
    """Row-wise sorted pairing loop; see :func:`lowacc.accumulate.sorted_dot`.

    Returns ``(result, events, rounds)`` arrays of shape ``(R,)``.
    """
    v = _as_products(values).copy()
    f = np.broadcast_to(np.asarray(materialised, dtype=bool), v.shape).copy()
    n_rows = v.shape[0]
    lo, hi = acc_range(p)
    result = np.zeros(n_rows, np.int64)
    events = np.zeros(n_rows, np.int64)
    rounds = np.zeros(n_rows, np.int64)
    live = np.arange(n_rows)

    while live.size:
        npos = (v > 0).sum(axis=1)
        nneg = (v < 0).sum(axis=1)
        m = np.minimum(npos, nneg)
        done = (npos + nneg <= 1) | (m == 0) | (rounds[live] >= max_rounds)
        if done.any():
            res, ev = _final_phase(v[done], f[done], p, clip)
            result[live[done]] = res
            events[live[done]] += ev
            keep = ~done
            live, v, f, npos, nneg, m = live[keep], v[keep], f[keep], npos[keep], nneg[keep], m[keep]
            if not live.size:
                break
        # stable sorts: ties keep list order
        pos_order = np.argsort(np.where(v > 0, -v, _BIG), axis=1, kind="stable")
        neg_order = np.argsort(np.where(v < 0, v, _BIG), axis=1, kind="stable")
        width = int(np.max(np.maximum(npos, nneg)))
        col = np.arange(width)[None, :]
        pv = np.take_along_axis(v, pos_order[:, :width], axis=1)
        pf = np.take_along_axis(f, pos_order[:, :width], axis=1)
        nv = np.take_along_axis(v, neg_order[:, :width], axis=1)
        nf = np.take_along_axis(f, neg_order[:, :width], axis=1)
        in_pos = col < npos[:, None]
        in_neg = col < nneg[:, None]
        pv, nv = np.where(in_pos, pv, 0), np.where(in_neg, nv, 0)
        paired = col < m[:, None]
        new_v = pv + nv
        new_f = np.where(paired, True, np.where(in_pos, pf, nf) & (in_pos | in_neg))
        over = paired & _out_of_range(new_v, p)
        events[live] += over.sum(axis=1)
        if clip:
            new_v = np.where(over, np.clip(new_v, lo, hi), new_v)
        rounds[live] += 1
        v, f = new_v, new_f
    return result, events, rounds


def sorted_tiled(products, p: int, tile: int, max_rounds: int = 8, clip: bool = False):
    """Tiled sorted dot product; returns ``(result, events, tile_results)``."""
    a = _as_products(products)
    if tile < 1:
        raise ValueError("tile length must be >= 1")
    n_rows, k = a.shape
    n_tiles = max(-(-k // tile), 1)
    padded = np.zeros((n_rows, n_tiles * tile), np.int64)
    padded[:, :k] = a
    tiles = padded.reshape(n_rows * n_tiles, tile)
    t_res, t_ev, _ = sorted_core(tiles, False, p, max_rounds, clip)
    t_res = t_res.reshape(n_rows, n_tiles)
    res, ev, _ = sorted_core(t_res, True, p, max_rounds, clip)
    return res, ev + t_ev.reshape(n_rows, n_tiles).sum(axis=1), t_res


def run_policy(products, cfg: AccumConfig) -> BatchOutcome:
    """Evaluate every row under ``cfg``."""
    a = _as_products(products)
    if cfg.policy is Policy.EXACT:
        return natural_exact(a, cfg.p)
    if cfg.policy is Policy.SATURATE:
        return natural_saturate(a, cfg.p)
    if cfg.policy is Policy.WRAP:
        return natural_wrap(a, cfg.p)
    if cfg.policy is Policy.RESOLVE:
        sat = natural_saturate(a, cfg.p)
        fits = ~_out_of_range(sat.exact, cfg.p)
        return BatchOutcome(np.where(fits, sat.exact, sat.result), sat.events, sat.exact)
    exact = a.sum(axis=1)
    if cfg.policy is Policy.SORTED:
        res, ev, _ = sorted_core(a, False, cfg.p, cfg.max_rounds, cfg.clip)
    else:
        res, ev, _ = sorted_tiled(a, cfg.p, cfg.tile, cfg.max_rounds, cfg.clip)
    return BatchOutcome(res, ev, exact)


CLASS_CODES = {OverflowClass.NONE: 0, OverflowClass.TRANSIENT: 1, OverflowClass.PERSISTENT: 2}


def classify_rows(products, p: int) -> np.ndarray:
    """Natural-order class per row: 0 none, 1 transient, 2 persistent."""
    a = _as_products(products)
    run = np.cumsum(a, axis=1)
    oor = _out_of_range(run, p)
    final = run[:, -1] if a.shape[1] else np.zeros(a.shape[0], np.int64)
    persistent = _out_of_range(final, p)
    transient = ~persistent & oor.any(axis=1)
    return np.where(persistent, 2, np.where(transient, 1, 0))
