"""Experiment harness: overflow profiles, accumulator sweeps, frontiers, reports.

Report files have a fixed column set (see :data:`COLUMNS`). ``transient`` and
``persistent`` count dot products, ``events`` counts individual out-of-range
accumulations and ``dots`` is the denominator for both per-dot counts.
Transience is always judged against natural index order. Accuracy is written
with 6 decimals, sparsity with 6 decimals.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from statistics import NormalDist

import numpy as np

from . import batch
from .accumulate import AccumConfig, Policy
from .errors import PreconditionError
from .fsutil import atomic_write
from .report import OverflowReport

COLUMNS = ("run_id", "sparsity", "b_w", "b_x", "p", "policy", "accuracy",
           "transient", "persistent", "events", "dots")


@dataclass
class SweepRecord:
    run_id: str
    sparsity: float
    b_w: int
    b_x: int
    p: int
    policy: str
    accuracy: float
    report: OverflowReport = field(default_factory=OverflowReport)

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError(f"accuracy must lie in [0, 1], got {self.accuracy}")

    def row(self) -> dict:
        return {"run_id": self.run_id, "sparsity": f"{self.sparsity:.6f}", "b_w": self.b_w,
                "b_x": self.b_x, "p": self.p, "policy": self.policy,
                "accuracy": f"{self.accuracy:.6f}", "transient": self.report.transient,
                "persistent": self.report.persistent, "events": self.report.events,
                "dots": self.report.dots}


def policy_config(policy: str, p: int, tile: int = 256, max_rounds: int = 8) -> AccumConfig:
    """Parse a policy label (as produced by :meth:`AccumConfig.label`)."""
    clip = policy.endswith("_clip")
    name = policy[:-5] if clip else policy
    if name.startswith("sorted_tiled"):
        suffix = name[len("sorted_tiled"):]
        return AccumConfig(p, Policy.SORTED_TILED, int(suffix) if suffix else tile, max_rounds, clip)
    return AccumConfig(p, Policy(name), None, max_rounds, clip)


def profile_model(model, images, labels, p_grid, policies, run_id: str = "model",
                  batch_size: int = 500, tile: int = 256, max_rounds: int = 8) -> list[SweepRecord]:
    """Evaluate ``model`` on every ``(p, policy)`` cell; one record per cell."""
    from .nn.model import evaluate

    if not model.calibrated:
        raise PreconditionError("model has uncalibrated activation observers")
    spec0 = model.weight_specs[0]
    out = []
    for p in p_grid:
        for pol in policies:
            cfg = policy_config(pol, p, tile, max_rounds)
            acc, rep = evaluate(model, images, labels, accum=cfg, batch_size=batch_size)
            out.append(SweepRecord(run_id, model.sparsity(), spec0.w_bits, spec0.x_bits,
                                   p, cfg.label(), acc, rep))
    return out


def config_hash(*parts) -> str:
    """Content address for a training job (model preset, bits, train config)."""
    blob = json.dumps(parts, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def sweep(jobs, train_data, eval_data, p_grid, policies, cache_dir=None,
          tile: int = 256, max_rounds: int = 8) -> list[SweepRecord]:
    """Train (or load from cache) every job, then profile it over the grid.

    Each job is ``(preset, w_bits, x_bits, TrainConfig)``. Trained models are
    cached as containers named by :func:`config_hash`.
    """
    from .container import load_model, save_model
    from .nn.model import build_model, preset
    from .nn.train import train

    records = []
    for name, w_bits, x_bits, cfg in jobs:
        rid = config_hash(name, w_bits, x_bits, cfg.to_dict())
        path = Path(cache_dir) / f"{rid}.pqsm" if cache_dir else None
        if path is not None and path.exists():
            model = load_model(path)
        else:
            m = cfg.prune.m if cfg.prune else 16
            specs, shape = preset(name, w_bits, x_bits)
            model = train(build_model(specs, shape, cfg.seed, m), *train_data, cfg)
            if path is not None:
                save_model(path, model)
        records.extend(profile_model(model, *eval_data, p_grid, policies, run_id=rid,
                                     tile=tile, max_rounds=max_rounds))
    return sorted(records, key=lambda r: (r.run_id, r.p, r.policy))


def pareto_frontier(records) -> list[SweepRecord]:
    """Records not dominated on (lower p, higher accuracy), ordered by (p, -accuracy)."""
    records = list(records)
    if not records:
        raise PreconditionError("pareto_frontier needs at least one record")
    ordered = sorted(records, key=lambda r: (r.p, -r.accuracy, r.run_id, r.policy))
    frontier, best = [], -1.0
    for r in ordered:
        if r.accuracy > best:
            frontier.append(r)
            best = r.accuracy
    return frontier


def report_name(run_id: str, policy: str, p: int) -> str:
    return f"{run_id}_{policy}_p{p}.csv"


def format_records(records, fmt: str = "csv") -> str:
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in records:
            w.writerow(r.row())
        return buf.getvalue()
    if fmt == "jsonl":
        lines = []
        for r in records:
            d = r.row()
            d["report"] = r.report.to_dict()["layers"]
            lines.append(json.dumps(d, sort_keys=True, separators=(",", ":")))
        return "".join(line + "\n" for line in lines)
    raise ValueError(f"unknown report format {fmt!r}")


def emit_report(records, path, fmt: str = "csv") -> Path:
    return atomic_write(path, format_records(records, fmt))


def read_jsonl(path) -> list[SweepRecord]:
    from .report import LayerOverflow

    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            d = json.loads(line)
            rep = OverflowReport([LayerOverflow(**l) for l in d["report"]])
            out.append(SweepRecord(d["run_id"], float(d["sparsity"]), d["b_w"], d["b_x"], d["p"],
                                   d["policy"], float(d["accuracy"]), rep))
    return out


# --- synthetic transient-elimination study --------------------------------

_N01 = NormalDist()


def weight_code_pmf(bits: int = 8, clip: float = 5.0):
    """Codes and probabilities of N(0,1) under symmetric quantization on [-clip, clip]."""
    q = (1 << (bits - 1)) - 1
    scale = 2 * clip / ((1 << bits) - 2)
    edges = np.array([_N01.cdf(e) for e in (np.arange(-q, q + 2) - 0.5) * scale])
    edges[0], edges[-1] = 0.0, 1.0
    return np.arange(-q, q + 1), np.diff(edges)


def act_code_pmf(bits: int = 8, clip: float = 5.0):
    """Codes and probabilities of |N(0,1)| under asymmetric quantization on [0, clip]."""
    q = (1 << bits) - 1
    scale = clip / q
    edges = np.array([2 * _N01.cdf(e) - 1 for e in np.maximum((np.arange(q + 2) - 0.5) * scale, 0)])
    edges[-1] = 1.0
    return np.arange(q + 1), np.diff(edges)


@dataclass
class StudyCell:
    k: int
    p: int
    dots: int = 0
    persistent: int = 0
    transient: int = 0
    fixed_one_round: int = 0
    fixed_full: int = 0
    fixed_tiled: int = 0


@dataclass
class StudyResult:
    cells: list[StudyCell]
    tile: int
    seconds: float

    def _pool(self, attr):
        n = sum(c.transient for c in self.cells)
        return sum(getattr(c, attr) for c in self.cells) / n if n else float("nan")

    @property
    def transients(self) -> int:
        return sum(c.transient for c in self.cells)

    @property
    def one_round_rate(self) -> float:
        return self._pool("fixed_one_round")

    @property
    def full_rate(self) -> float:
        return self._pool("fixed_full")

    @property
    def tiled_rate(self) -> float:
        return self._pool("fixed_tiled")


def transient_study(ks=(256, 512, 1024, 2048, 4096), tile: int = 256, min_transients: int = 10_000,
                    persistent_rate: float = 0.01, bits: int = 8, seed: int = 0,
                    chunk: int = 1 << 22, table_bits: int = 20, time_limit: float | None = None,
                    max_rounds: int = 8) -> StudyResult:
    """Measure how many natural-order transient overflows sorting removes.

    Weights are N(0,1) and activations |N(0,1)|, both clipped at 5 and
    quantized to ``bits``. For each length ``k`` the accumulator is the
    narrowest one whose range covers the two-sided ``persistent_rate``
    quantile of the exact sum under a normal approximation, so overflows are
    rare but not negligible. Products are drawn from the exact product
    distribution discretised to ``2**-table_bits`` probability mass. Every
    ``k`` receives the same product budget per pass; passes repeat until
    ``min_transients`` transient dot products have been collected.
    """
    rng = np.random.default_rng(seed)
    cw, pw = weight_code_pmf(bits)
    cx, px = act_code_pmf(bits)
    prod = (cw[:, None] * cx[None, :]).ravel()
    mass = (pw[:, None] * px[None, :]).ravel()
    order = np.argsort(prod, kind="stable")
    cdf = np.cumsum(mass[order])
    u = (np.arange(1 << table_bits) + 0.5) / (1 << table_bits)
    table = prod[order][np.minimum(np.searchsorted(cdf, u), len(prod) - 1)].astype(np.int32)
    e_w2, e_x2 = float(pw @ cw.astype(float) ** 2), float(px @ cx.astype(float) ** 2)
    z = _N01.inv_cdf(1 - persistent_rate / 2)

    cells = []
    for k in ks:
        sigma = np.sqrt(k * e_w2 * e_x2)
        p = next(p for p in range(bits, 64) if (1 << (p - 1)) - 1 >= z * sigma)
        cells.append(StudyCell(k, p))
    start = time.perf_counter()
    total = 0
    while total < min_transients:
        if time_limit is not None and time.perf_counter() - start > time_limit:
            break
        for c in cells:
            rows = max(chunk // c.k, 1)
            prods = table[rng.integers(0, 1 << table_bits, size=(rows, c.k), dtype=np.uint32)]
            wide = c.k * int(np.abs(table).max()) >= 1 << 31
            run = np.cumsum(prods, axis=1, dtype=np.int64 if wide else np.int32)
            hi, lo = (1 << (c.p - 1)) - 1, -(1 << (c.p - 1))
            final = run[:, -1]
            pers = (final > hi) | (final < lo)
            trans = ~pers & ((run.max(axis=1) > hi) | (run.min(axis=1) < lo))
            c.dots += rows
            c.persistent += int(pers.sum())
            sub = prods[trans].astype(np.int64)
            if not len(sub):
                continue
            _, ev1, _ = batch.sorted_core(sub, False, c.p, max_rounds=1)
            _, evf, _ = batch.sorted_core(sub, False, c.p, max_rounds=max_rounds)
            _, evt, _ = batch.sorted_tiled(sub, c.p, tile, max_rounds)
            c.transient += len(sub)
            c.fixed_one_round += int((ev1 == 0).sum())
            c.fixed_full += int((evf == 0).sum())
            c.fixed_tiled += int((evt == 0).sum())
            total += len(sub)
    return StudyResult(cells, tile, time.perf_counter() - start)
