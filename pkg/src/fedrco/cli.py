"""Command-line entry point.

    fedrco run   --config cfg.json [--seed N] [--out DIR]
    fedrco audit --suite {rank,condition,descent,drift,all} [--report audits.json]
    fedrco sweep --param t_inv --values 20,50,200,500 [--config cfg.json] [--out DIR]

Exit status: 0 on success, 1 for an invalid configuration, 2 when an audit
does not behave as expected (a check fails or a negative control passes).
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

from .config import ExperimentConfig, load_config
from .errors import ConfigInvalid

EXIT_OK, EXIT_CONFIG, EXIT_AUDIT = 0, 1, 2


def _load(path: Optional[str], seed: Optional[int] = None) -> ExperimentConfig:
    cfg = load_config(path) if path else ExperimentConfig()
    if seed is not None:
        cfg = cfg.replace_path("seed", seed)
    return cfg


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def cmd_run(args) -> int:
    from .experiment import run_experiment

    cfg = _load(args.config, args.seed)

    def show(rec):
        if not args.quiet:
            print(f"round {rec.round:4d}  acc {rec.test_accuracy:.4f}  loss {rec.train_loss:.4f}"
                  f"  resets {rec.hard_resets}  inversions {rec.inversions}", flush=True)

    res = run_experiment(cfg, args.out, on_round=show)
    final = res.accuracies[-1] if res.records else float("nan")
    print(f"{cfg.method} seed={cfg.seed}: final test accuracy {final:.4f}")
    return EXIT_OK


def cmd_audit(args) -> int:
    from .diagnostics import run_suite

    outcomes = run_suite(args.suite, args.seed)
    for o in outcomes:
        status = "ok" if o.ok else "UNEXPECTED"
        print(f"[{status}] {o.label}: passed={o.report.passed} violations="
              f"{o.report.violations}/{o.report.trials} worst_margin={o.report.worst_margin:.4g}")
    if args.report:
        path = Path(args.report)
        existing = json.loads(path.read_text()) if path.exists() and path.stat().st_size else []
        if not isinstance(existing, list):
            existing = [existing]
        existing.append({"suite": args.suite, "seed": args.seed,
                         "results": [o.to_dict() for o in outcomes]})
        path.write_text(json.dumps(existing, indent=2) + "\n")
    return EXIT_OK if all(o.ok for o in outcomes) else EXIT_AUDIT


def cmd_sweep(args) -> int:
    from .experiment import sweep

    cfg = _load(args.config, args.seed)
    values = [_parse_value(v) for v in args.values.split(",") if v.strip()]
    if not values:
        raise ConfigInvalid("--values", "no values given")
    print(f"{args.param:>12}  final_acc  best_acc  inversions  hard_resets")
    for value, res in sweep(cfg, args.param, values, args.out):
        accs = res.accuracies
        print(f"{value!s:>12}  {accs[-1]:.4f}     {max(accs):.4f}    "
              f"{sum(r.inversions for r in res.records):10d}  "
              f"{sum(r.hard_resets for r in res.records):11d}", flush=True)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedrco", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment")
    run.add_argument("--config", help="JSON config (defaults used when omitted)")
    run.add_argument("--seed", type=int)
    run.add_argument("--out", help="output directory for CSV metrics")
    run.add_argument("--quiet", action="store_true", help="only print the final line")
    run.set_defaults(func=cmd_run)

    audit = sub.add_parser("audit", help="run numerical audits")
    audit.add_argument("--suite", choices=["rank", "condition", "descent", "drift", "all"],
                       default="all")
    audit.add_argument("--seed", type=int, default=0)
    audit.add_argument("--report", help="append results to this JSON file")
    audit.set_defaults(func=cmd_audit)

    sw = sub.add_parser("sweep", help="run one experiment per parameter value")
    sw.add_argument("--param", required=True, help="dotted config path or alias (t_inv, alpha, eps)")
    sw.add_argument("--values", required=True, help="comma-separated values")
    sw.add_argument("--config")
    sw.add_argument("--seed", type=int)
    sw.add_argument("--out")
    sw.set_defaults(func=cmd_sweep)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigInvalid, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
