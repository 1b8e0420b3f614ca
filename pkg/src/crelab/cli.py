"""Command line entry point: ``crelab run | probe | compare``.

Exit codes: 0 success, 1 invalid input, 2 runtime failure, 3 a checked
direction failed (``run --check``).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .diagnostics import boundary_export, evaluate, frozen_encoder_supervised, ubc_probe
from .errors import CompatibilityError, CRELabError, ConfigError, VersionError
from .experiment import (
    ExperimentConfig,
    aggregate,
    build_stream,
    glob_reports,
    load_reports,
    run_grid,
    write_json,
    write_timings_csv,
)
from .model import load_checkpoint

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME, EXIT_DIRECTION = 0, 1, 2, 3

log = logging.getLogger("crelab")


def _apply_overrides(raw: dict, args: argparse.Namespace) -> dict:
    if args.out:
        raw["output_dir"] = args.out
    if args.seeds:
        raw["seeds"] = args.seeds
    if args.variants:
        raw["variants"] = args.variants
    if args.memory_sizes:
        raw["memory_sizes"] = args.memory_sizes
    return raw


def cmd_run(args: argparse.Namespace) -> int:
    try:
        with open(args.config, encoding="utf-8") as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: cannot read config {args.config}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    try:
        cfg = ExperimentConfig.from_dict(_apply_overrides(raw, args))
    except ConfigError as exc:
        print("invalid config:", file=sys.stderr)
        for p in exc.problems:
            print(f"  - {p}", file=sys.stderr)
        return EXIT_INVALID

    results = run_grid(cfg, jobs=args.jobs)
    failed = {k: v for k, v in results.items() if v}
    out = Path(cfg.output_dir)
    reports = load_reports(sorted((out / "reports").glob("*.json")))
    directions = []
    if reports:
        directions = aggregate(reports, out)
        write_timings_csv(out)
        print((out / "summary.md").read_text(encoding="utf-8"))
    for name, err in failed.items():
        print(f"cell {name} failed: {err}", file=sys.stderr)
    if failed:
        return EXIT_RUNTIME
    if args.check and not all(d.passed for d in directions):
        return EXIT_DIRECTION
    return EXIT_OK


def cmd_probe(args: argparse.Namespace) -> int:
    ckpt = Path(args.checkpoint)
    model, meta = load_checkpoint(ckpt)
    if args.config:
        data = ExperimentConfig.load(args.config).data
    elif "data" in meta:
        data = meta["data"]
    else:
        raise ConfigError("checkpoint has no data description; pass --config")
    seed = args.seed if args.seed is not None else int(meta.get("seed", 0))
    stream = build_stream(data, seed)
    k = max(model.head.tasks)
    if k > len(stream) or set(stream.seen_relations(k)) != set(model.head.relations):
        raise CompatibilityError(
            f"checkpoint classes ({model.head.num_classes}) do not match the stream's first {k} tasks"
        )
    train, test = stream.seen_train(k), stream.seen_test(k)
    original, _ = evaluate(model, test, stream.relation_task)
    out = Path(args.out) if args.out else ckpt.with_name(f"{ckpt.stem}.{args.kind}.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    report: dict = {"checkpoint": str(ckpt), "kind": args.kind, "stage": k, "original_accuracy": original}
    if args.kind == "ubc":
        res = ubc_probe(model, train, test, seed=seed, original_accuracy=original)
        res.stage = k
        report["result"] = res.to_dict()
    elif args.kind == "frozen":
        res = frozen_encoder_supervised(model.cfg, model.head.relations, train, test, seed=seed)
        res.stage = k
        report["result"] = res.to_dict()
    else:
        pairs = [tuple(args.pair)] if args.pair else [
            (a, b) for a, b in stream.similar_pairs if a in model.head.index and b in model.head.index
        ]
        if not pairs:
            raise ConfigError("no similar pair is covered by the checkpoint; pass --pair OLD NEW")
        report["pairs"] = []
        for old, new in pairs:
            xs = [x for x in test if x.relation in (old, new)]
            exp = boundary_export(model, old, new, xs)
            csv_path = out.with_name(f"{out.stem}.{old}-{new}.csv")
            exp.write(csv_path, csv_path.with_suffix(".json"))
            report["pairs"].append({"csv": str(csv_path), **exp.sidecar()})
    write_json(report, out)
    print(json.dumps(report, indent=1, sort_keys=True))
    return EXIT_OK


def cmd_compare(args: argparse.Namespace) -> int:
    paths = glob_reports(args.pattern)
    if not paths:
        print(f"error: no reports match {args.pattern!r}", file=sys.stderr)
        return EXIT_INVALID
    reports = load_reports(paths)
    aggregate(reports, args.out)
    print(Path(args.out, "summary.md").read_text(encoding="utf-8"))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="crelab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log per-task progress")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a (variant x memory size x seed) grid from a JSON config")
    r.add_argument("--config", required=True)
    r.add_argument("--jobs", type=int, default=1, help="grid cells run in parallel")
    r.add_argument("--check", action="store_true", help="exit 3 if any FEA direction fails")
    r.add_argument("--out", help="override output_dir")
    r.add_argument("--seeds", type=int, nargs="+")
    r.add_argument("--variants", nargs="+")
    r.add_argument("--memory-sizes", type=int, nargs="+", dest="memory_sizes")
    r.set_defaults(func=cmd_run)

    q = sub.add_parser("probe", help="classifier probes and boundary export on a saved checkpoint")
    q.add_argument("--checkpoint", required=True)
    q.add_argument("--kind", choices=["ubc", "frozen", "boundary"], required=True)
    q.add_argument("--config", help="data source (defaults to the one recorded in the checkpoint)")
    q.add_argument("--seed", type=int)
    q.add_argument("--pair", nargs=2, metavar=("OLD", "NEW"))
    q.add_argument("--out", help="probe report path")
    q.set_defaults(func=cmd_probe)

    c = sub.add_parser("compare", help="aggregate existing reports into grids and a summary")
    c.add_argument("pattern", help="glob for report JSON files (quote it)")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_compare)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, VersionError, CompatibilityError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except CRELabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
