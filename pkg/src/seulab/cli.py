"""Command line entry point: ``run``, ``report`` and ``fetch-data``.

Exit codes: 0 ok, 1 user error (bad config, missing data, bad records),
2 internal error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import traceback
from pathlib import Path
from typing import List, Optional

from . import datasets
from .config import ConfigError, RunConfig, resolve_output
from .metrics import RunRecord, SchemaError, mixed_score, write_plot_data

EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 1, 2

log = logging.getLogger("seulab")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USER, f"{self.prog}: error: {message}\n")


def _setup_logging(out: Optional[Path] = None, verbose: bool = False) -> None:
    root = logging.getLogger("seulab")
    root.setLevel(logging.DEBUG)
    for h in list(root.handlers):
        root.removeHandler(h)
        h.close()
    console = logging.StreamHandler(sys.stderr)
    console.setLevel(logging.DEBUG if verbose else logging.INFO)
    console.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    console.addFilter(lambda r: r.name != "seulab.progress" or verbose)
    root.addHandler(console)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        fh = logging.FileHandler(out / "run.log", mode="w")
        fh.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
        fh.addFilter(lambda r: r.name != "seulab.progress")
        root.addHandler(fh)
        progress = logging.FileHandler(out / "progress.jsonl", mode="w")
        progress.setFormatter(logging.Formatter("%(message)s"))
        progress.addFilter(lambda r: r.name == "seulab.progress")
        root.addHandler(progress)


def cmd_run(args) -> int:
    from .baselines import run_sgd_baseline
    from .pipeline import run_sequence
    from .tasks import build_sequence
    from .training import use_cpu_determinism

    cfg = RunConfig.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.cache:
        cfg.cache = args.cache
    out = resolve_output(cfg, args.out)
    _setup_logging(out, args.verbose)
    # CPU is the only supported device; determinism is always on
    use_cpu_determinism()
    cfg.dump(out / "config.yaml")
    seq = build_sequence({**cfg.sequence, "seed": cfg.sequence.get("seed", cfg.seed)}, cfg.cache)
    log.info("running %s on %d tasks (%s), output %s", cfg.method, len(seq), seq.descriptor, out)
    snapshot = cfg.to_dict()
    if cfg.method == "seu":
        record, _ = run_sequence(seq, cfg.seu, seed=cfg.seed, out_dir=out, config_snapshot=snapshot)
    else:
        record, _ = run_sgd_baseline(seq, cfg.train, seed=cfg.seed, trunk=cfg.baseline, out_dir=out,
                                     config_snapshot=snapshot)
    log.info("final average accuracy %.2f%%, %d parameters, MS %.3f", record.final_average_accuracy(),
             record.final_param_count(), record.ms_trajectory[-1])
    return EXIT_OK


def report_rows(records: List[RunRecord], labels: List[str]) -> List[dict]:
    rows = []
    for label, rec in zip(labels, records):
        acc = rec.final_average_accuracy()
        n = rec.final_param_count()
        rows.append({"run": label, "method": rec.method, "seed": rec.seed, "tasks": rec.n_tasks,
                     "acc": acc, "num_m": n / 1e6, "ms": mixed_score(acc, n), "complete": rec.complete})
    return rows


def format_table(rows: List[dict]) -> str:
    header = f"{'Method':<14}{'Run':<28}{'Acc(%)':>9}{'Num(M)':>11}{'MS':>8}"
    lines = [header, "-" * len(header)]
    for r in rows:
        flag = "" if r["complete"] else "  (incomplete)"
        lines.append(f"{r['method']:<14}{r['run'][-27:]:<28}{r['acc']:>9.2f}{r['num_m']:>11.4f}"
                     f"{r['ms']:>8.3f}{flag}")
    return "\n".join(lines)


def cmd_report(args) -> int:
    if not args.runs:
        raise UsageError("report needs at least one run directory")
    records, labels = [], []
    for d in args.runs:
        records.append(RunRecord.load(d))
        labels.append(str(d).rstrip("/"))
    rows = report_rows(records, labels)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ms_table.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    for i, (label, rec) in enumerate(zip(labels, records)):
        write_plot_data(rec, out, label=f"{i:02d}_{rec.method}_seed{rec.seed}")
    print(format_table(rows))
    return EXIT_OK


def cmd_fetch(args) -> int:
    _setup_logging(None, args.verbose)
    path = datasets.fetch(args.name, args.cache, args.archive)
    print(path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="seulab", description="Lifelong learning with searchable extension units")
    p.add_argument("-v", "--verbose", action="store_true", help="also echo per-round MDL progress")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    r = sub.add_parser("run", help="run an experiment from a YAML config")
    r.add_argument("config")
    r.add_argument("--seed", type=int)
    r.add_argument("--out", help="output directory (overrides config and $SEULAB_OUT)")
    r.add_argument("--cache", help="dataset cache (overrides config and $SEULAB_CACHE)")
    r.add_argument("--cpu", action="store_true", help="CPU deterministic mode (always on)")
    r.set_defaults(func=cmd_run)

    rep = sub.add_parser("report", help="compare run records and emit plot CSVs")
    rep.add_argument("runs", nargs="*")
    rep.add_argument("--out", default="report")
    rep.set_defaults(func=cmd_report)

    f = sub.add_parser("fetch-data", help="download and checksum a dataset into the cache")
    f.add_argument("name", choices=datasets.DATASETS)
    f.add_argument("--cache")
    f.add_argument("--archive", help="local archive file/directory instead of downloading")
    f.set_defaults(func=cmd_fetch)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not getattr(args, "func", None):
        parser.print_usage(sys.stderr)
        return EXIT_USER
    try:
        return args.func(args)
    except (ConfigError, UsageError, SchemaError, datasets.IngestionError, datasets.FetchError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except Exception:
        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
