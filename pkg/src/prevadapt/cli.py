"""Command-line interface: run experiments, summarize results, or just
generate datasets.

    prevadapt run --config cfg.json --out results/ [--threads N] [--seeds 0,1]
    prevadapt summarize --in results/
    prevadapt gen --config cfg.json --out data/

Exit code is 0 only if every (method, seed) cell succeeded.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .harness import (
    ExperimentConfig,
    default_config,
    generate_datasets,
    run_experiment,
    summarize,
    write_summary_csv,
)


def load_config(path: str | None) -> ExperimentConfig:
    if path is None:
        return default_config()
    with open(path) as fh:
        return ExperimentConfig.from_dict(json.load(fh))


def _parse_seeds(text: str | None) -> list[int] | None:
    if text is None:
        return None
    return [int(s) for s in text.split(",") if s != ""]


def _print_summary(summary) -> None:
    width = max(len(r["method"]) for r in summary)
    print(f"{'method':<{width}}  {'site':<12}  {'mean_f1':>8}  {'stderr':>8}  seeds  oracle")
    for r in summary:
        print(
            f"{r['method']:<{width}}  {r['site']:<12}  {r['mean_f1']:>8.4f}  "
            f"{r['stderr']:>8.4f}  {r['n_seeds']:>5}  {'yes' if r['oracle_access'] else 'no'}"
        )


def cmd_run(args) -> int:
    config = load_config(args.config)
    out = args.out or config.out_dir
    rows, errors = run_experiment(
        config, out_dir=out, threads=args.threads, seeds=_parse_seeds(args.seeds)
    )
    print(f"wrote {len(rows)} result rows to {Path(out) / 'results.csv'}")
    if rows:
        _print_summary(summarize(out))
    if errors:
        print(f"{len(errors)} cell(s) failed:", file=sys.stderr)
        for method, site, seed, msg in errors:
            print(f"  {method} @ {site} seed {seed}: {msg}", file=sys.stderr)
        return 1
    return 0


def cmd_summarize(args) -> int:
    summary = summarize(args.input)
    out_path = Path(args.input)
    out_path = out_path / "summary.csv" if out_path.is_dir() else out_path.with_name("summary.csv")
    write_summary_csv(out_path, summary)
    _print_summary(summary)
    print(f"wrote {out_path}")
    return 0


def cmd_gen(args) -> int:
    config = load_config(args.config)
    written = generate_datasets(config, args.out)
    print(f"wrote {len(written)} dataset file(s) under {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prevadapt", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run the configured experiment")
    p_run.add_argument("--config", help="experiment config JSON (default: built-in protocol)")
    p_run.add_argument("--out", help="output directory (default: config out_dir)")
    p_run.add_argument("--threads", type=int, default=1, help="parallel seeds")
    p_run.add_argument("--seeds", help="comma-separated seed override, e.g. 0,1,2")
    p_run.set_defaults(func=cmd_run)

    p_sum = sub.add_parser("summarize", help="summarize a results directory")
    p_sum.add_argument("--in", dest="input", required=True, help="results directory or CSV")
    p_sum.set_defaults(func=cmd_summarize)

    p_gen = sub.add_parser("gen", help="generate datasets only")
    p_gen.add_argument("--config", help="experiment config JSON (default: built-in protocol)")
    p_gen.add_argument("--out", required=True, help="output directory")
    p_gen.set_defaults(func=cmd_gen)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
