"""Command-line entry point: ``lowacc [global flags] {train,eval,profile,sweep,dot}``.

Exit codes: 0 success, 2 configuration or argument error, 3 file format or
I/O error, 4 numeric precondition violated.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .errors import ConfigError, FormatError, LowaccError

log = logging.getLogger("lowacc")

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def _load_data(cfg, split: str):
    from .idx import load_idx

    images, labels = cfg.data[f"{split}_images"], cfg.data[f"{split}_labels"]
    for path in (images, labels):
        if not Path(path).exists():
            raise FormatError(f"dataset file not found: {path}")
    return load_idx(images, labels)


def _run_id(model_path: Path) -> str:
    return model_path.stem


def _model_path(cfg) -> Path:
    return Path(cfg.model) if cfg.model else Path(cfg.out) / "model.pqsm"


def cmd_train(cfg) -> int:
    from .container import save_model
    from .fsutil import atomic_write
    from .nn.model import build_model, preset
    from .nn.train import train

    tcfg = cfg.train_config()
    train_set, test_set = _load_data(cfg, "train"), _load_data(cfg, "test")
    specs, shape = preset(cfg.preset, cfg.w_bits, cfg.x_bits, hidden=cfg.hidden)
    model = build_model(specs, shape, seed=cfg.seed, m=tcfg.prune.m if tcfg.prune else 16)
    model.meta["preset"] = cfg.preset
    train(model, *train_set, tcfg, eval_set=test_set)
    path = _model_path(cfg)
    save_model(path, model)
    log_path = path.with_suffix(".log.json")
    atomic_write(log_path, json.dumps(model.meta["history"], indent=1, sort_keys=True) + "\n")
    final = model.meta["history"][-1] if model.meta["history"] else {}
    print(f"model written to {path}; test accuracy {final.get('test_acc', float('nan')):.6f}")
    return 0


def _write_records(cfg, records, name: str | None = None) -> list[Path]:
    from .profile import emit_report, report_name

    out = Path(cfg.out)
    ext = "csv" if cfg.format == "csv" else "jsonl"
    paths = []
    for r in records:
        fname = report_name(r.run_id, r.policy, r.p)
        if ext != "csv":
            fname = fname[:-3] + ext
        paths.append(emit_report([r], out / fname, cfg.format))
    if name:
        paths.append(emit_report(records, out / f"{name}.{ext}", cfg.format))
    return paths


def _load_trained(cfg):
    from .container import load_model

    path = _model_path(cfg)
    if not path.exists():
        raise FormatError(f"model file not found: {path}")
    return path, load_model(path)


def cmd_eval(cfg) -> int:
    from .profile import profile_model

    path, model = _load_trained(cfg)
    test_set = _load_data(cfg, "test")
    p = cfg.p_grid[-1]
    records = profile_model(model, *test_set, [p], cfg.policies, run_id=_run_id(path),
                            tile=cfg.tile, max_rounds=cfg.max_rounds)
    _write_records(cfg, records)
    for r in records:
        print(f"{r.policy:>16} p={r.p:2d} accuracy {r.accuracy:.6f} "
              f"transient {r.report.transient} persistent {r.report.persistent}")
    return 0


def cmd_profile(cfg) -> int:
    from .profile import profile_model

    path, model = _load_trained(cfg)
    test_set = _load_data(cfg, "test")
    records = profile_model(model, *test_set, cfg.p_grid, cfg.policies, run_id=_run_id(path),
                            tile=cfg.tile, max_rounds=cfg.max_rounds)
    paths = _write_records(cfg, records, "profile")
    print(f"{len(records)} reports written to {cfg.out}")
    return 0 if paths else 1


def cmd_sweep(cfg) -> int:
    from .profile import emit_report, pareto_frontier, sweep

    bits = cfg.sweep.get("bits", [[cfg.w_bits, cfg.x_bits]])
    sparsities = cfg.sweep.get("sparsities", [0.0])
    jobs = [(cfg.preset, w, x, cfg.train_config(s)) for w, x in bits for s in sparsities]
    train_set, test_set = _load_data(cfg, "train"), _load_data(cfg, "test")
    records = sweep(jobs, train_set, test_set, cfg.p_grid, cfg.policies,
                    cache_dir=Path(cfg.out) / "cache", tile=cfg.tile, max_rounds=cfg.max_rounds)
    _write_records(cfg, records, "sweep")
    ext = "csv" if cfg.format == "csv" else "jsonl"
    emit_report(pareto_frontier(records), Path(cfg.out) / f"frontier.{ext}", cfg.format)
    print(f"{len(records)} sweep records, frontier written to {cfg.out}")
    return 0


def _parse_ints(text: str, what: str) -> list[int]:
    text = text.strip()
    if not text:
        return []
    try:
        return [int(t) for t in text.replace(" ", "").split(",")]
    except ValueError as exc:
        raise ConfigError(f"malformed {what} vector {text!r}") from exc


def _read_vectors(path: str) -> tuple[str, str]:
    try:
        lines = [l.strip() for l in Path(path).read_text(encoding="utf-8").splitlines()]
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    lines = [l for l in lines if l and not l.startswith("#")]
    if len(lines) != 2:
        raise ConfigError(f"{path}: expected two lines (weights, activations)")
    return lines[0], lines[1]


def cmd_dot(args) -> int:
    from .accumulate import (AccumConfig, Policy, accumulate, acc_range, classify, sorted_dot,
                             sorted_dot_tiled)
    from .profile import policy_config

    w_text, x_text = _read_vectors(args.file) if args.file else (args.w or "", args.x or "")
    w, x = _parse_ints(w_text, "weight"), _parse_ints(x_text, "activation")
    if len(w) != len(x):
        raise ConfigError(f"length mismatch: {len(w)} weights vs {len(x)} activations")
    lo_b, hi_b = acc_range(args.b)
    bad = [v for v in w + x if not lo_b <= v <= hi_b]
    if bad:
        raise ConfigError(f"value {bad[0]} does not fit {args.b}-bit signed codes")
    try:
        cfg = policy_config(args.policy, args.p, tile=args.tile, max_rounds=args.max_rounds)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    products = [a * b for a, b in zip(w, x)]
    lo, hi = cfg.lo, cfg.hi
    print(f"products: {' '.join(map(str, products)) or '(none)'}")
    print(f"policy: {cfg.label()}  p={cfg.p}  range [{lo}, {hi}]")
    if cfg.policy is Policy.SORTED:
        rounds: list = []
        out = sorted_dot(products, cfg, trace=rounds)
        for r in rounds:
            print(f"round {r['round']}: pos {r['positives']} neg {r['negatives']} "
                  f"-> pairs {r['pairs']} carry {r['carry']}")
        result, events = out.result, out.events
    elif cfg.policy is Policy.SORTED_TILED:
        out = sorted_dot_tiled(products, cfg)
        print(f"tile results (k={cfg.tile}): {out.tile_results}")
        result, events = out.result, out.events
    else:
        result, events = accumulate(products, cfg)
        running, acc = [], 0
        for v in products:
            acc += v
            running.append(acc)
        print(f"running sums (exact): {running}")
    for e in events:
        print(f"event at step {e.position}: value {e.value} ({e.kind.value})")
    print(f"events: {len(events)}")
    print(f"exact: {sum(products)}")
    print(f"result: {result}")
    print(f"class: {classify(products, cfg.p).value}")
    return 0


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=d, help="JSON run configuration")
    parser.add_argument("--seed", type=int, default=d, help="override the config seed")
    parser.add_argument("--out", default=d, help="output directory")
    parser.add_argument("--threads", type=int, default=d, help="worker threads for BLAS kernels")
    parser.add_argument("-v", "--verbose", action="store_true",
                        default=argparse.SUPPRESS if suppress else False)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lowacc", description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (("train", "train a preset model and write a container"),
                       ("eval", "evaluate a trained model under each policy"),
                       ("profile", "overflow profile over the accumulator grid"),
                       ("sweep", "train a grid of models and emit sweep + frontier reports")):
        sp = sub.add_parser(name, help=text)
        _global_flags(sp, suppress=True)
        sp.add_argument("--model", help="model container (default <out>/model.pqsm)")
    dot = sub.add_parser("dot", help="print an accumulation trace for one dot product")
    _global_flags(dot, suppress=True)
    dot.add_argument("--w", help="comma-separated weight codes")
    dot.add_argument("--x", help="comma-separated activation codes (offset-corrected)")
    dot.add_argument("--file", help="file with two lines: weights, activations")
    dot.add_argument("--b", type=int, default=8, help="code bitwidth")
    dot.add_argument("--p", type=int, default=16, help="accumulator bitwidth")
    dot.add_argument("--policy", default="sorted")
    dot.add_argument("--tile", type=int, default=256)
    dot.add_argument("--max-rounds", type=int, default=8)
    return parser


def _resolve_config(args):
    from .config import load_config

    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    if getattr(args, "model", None):
        cfg.model = args.model
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads:
        # only effective before numpy loads its BLAS, which the lazy imports allow
        for var in _THREAD_VARS:
            os.environ[var] = str(args.threads)
    try:
        if args.command == "dot":
            return cmd_dot(args)
        cfg = _resolve_config(args)
        commands = {"train": cmd_train, "eval": cmd_eval, "profile": cmd_profile, "sweep": cmd_sweep}
        return commands[args.command](cfg)
    except LowaccError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (ValueError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ConfigError.exit_code


if __name__ == "__main__":
    sys.exit(main())
