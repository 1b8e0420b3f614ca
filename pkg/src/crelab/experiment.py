"""Experiment grids: config parsing, per-cell execution, aggregation and direction checks.

A config is a JSON file::

    {
      "data": {"synthetic": {...}}            # or {"corpus": "x.jsonl", "n_tasks": 10, ...}
      "train": {"epochs_fa": 10, ...},        # any TrainConfig field except variant/seed/memory_size
      "variants": ["FEA", "A1", "A2", "A3"],
      "seeds": [0, 1, 2, 3, 4],
      "memory_sizes": [10],
      "probes": {"ubc": true, "boundary": true, "frozen": false},
      "checkpoints": true,
      "output_dir": "runs/default"
    }

Each (variant, memory size, seed) cell writes its own report, so cells can run
in parallel and a crash never damages a finished cell.
"""

from __future__ import annotations

import csv
import glob
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import SyntheticConfig, TaskStream, build_task_stream, config_from_dict, generate_synthetic_stream, load_corpus
from .diagnostics import frozen_encoder_supervised
from .errors import ConfigError, VersionError
from .model import save_checkpoint
from .trainer import REPORT_SCHEMA_VERSION, ContinualTrainer, RunReport, TrainConfig, Variant

log = logging.getLogger(__name__)

ACCURACY_COLUMNS = ["variant", "memory_size", "seed", "task", "accuracy"]
TAXONOMY_COLUMNS = ["variant", "memory_size", "seed", "task", "total", "errors", "latter", "former", "inner"]
TIMING_COLUMNS = ["variant", "memory_size", "seed", "task", "seconds"]
CSV_SCHEMA = 1

_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"variant", "seed", "memory_size", "ubc", "boundary"}
_CORPUS_KEYS = {"corpus", "n_tasks", "split", "max_train", "max_test", "seed"}


@dataclass
class ExperimentConfig:
    data: dict = field(default_factory=lambda: {"synthetic": {}})
    train: dict = field(default_factory=dict)
    variants: list[str] = field(default_factory=lambda: ["FEA", "A1", "A2", "A3"])
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    memory_sizes: list[int] = field(default_factory=lambda: [10])
    probes: dict = field(default_factory=lambda: {"ubc": True, "boundary": True, "frozen": False})
    checkpoints: bool = True
    output_dir: str = "runs/default"

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        problems = [f"unknown config key {k!r}" for k in sorted(set(d) - known)]
        cfg = cls(**{k: v for k, v in d.items() if k in known})
        try:
            cfg.validate()
        except ConfigError as exc:
            problems.extend(exc.problems)
        if problems:
            raise ConfigError(problems)
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                raw = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(raw)

    def validate(self) -> None:
        """Collect every problem before raising, so one edit fixes them all."""
        problems: list[str] = []
        if not self.variants:
            problems.append("variants: at least one variant is required")
        for v in self.variants:
            try:
                Variant.parse(v)
            except ConfigError as exc:
                problems.append(f"variants: {exc.problems[0]}")
        if not self.seeds:
            problems.append("seeds: at least one seed is required")
        if any(not isinstance(s, int) or isinstance(s, bool) or s < 0 for s in self.seeds):
            problems.append("seeds: must be non-negative integers")
        if not self.memory_sizes or any(not isinstance(b, int) or b < 1 for b in self.memory_sizes):
            problems.append("memory_sizes: need at least one integer >= 1")
        unknown = set(self.train) - _TRAIN_KEYS
        problems += [f"train: unknown key {k!r}" for k in sorted(unknown)]
        try:
            TrainConfig(**{k: v for k, v in self.train.items() if k in _TRAIN_KEYS}).validate()
        except ConfigError as exc:
            problems += [f"train: {p}" for p in exc.problems]
        except TypeError as exc:
            problems.append(f"train: {exc}")
        problems += _validate_data(self.data)
        unknown_probes = set(self.probes) - {"ubc", "boundary", "frozen"}
        problems += [f"probes: unknown probe {k!r}" for k in sorted(unknown_probes)]
        out = Path(self.output_dir)
        parent = next((p for p in [out, *out.parents] if p.exists()), Path("."))
        if not os.access(parent, os.W_OK):
            problems.append(f"output_dir: {self.output_dir} is not writable")
        if problems:
            raise ConfigError(problems)

    def cells(self) -> list[tuple[str, int, int]]:
        """Grid cells as (variant, memory_size, seed), in a fixed order."""
        return [
            (Variant.parse(v).value, b, s) for v in self.variants for b in self.memory_sizes for s in self.seeds
        ]

    def train_config(self, variant: str, memory_size: int, seed: int) -> TrainConfig:
        return TrainConfig(
            **self.train,
            variant=variant,
            seed=seed,
            memory_size=memory_size,
            ubc=bool(self.probes.get("ubc", True)),
            boundary=bool(self.probes.get("boundary", True)),
        )


def _validate_data(data: dict) -> list[str]:
    if not isinstance(data, dict) or ("synthetic" in data) == ("corpus" in data):
        return ["data: give exactly one of 'synthetic' or 'corpus'"]
    if "synthetic" in data:
        syn = dict(data["synthetic"])
        syn.pop("seed", None)
        try:
            config_from_dict(syn).validate()
        except ConfigError as exc:
            return [f"data.synthetic: {p}" for p in exc.problems]
        except TypeError as exc:
            return [f"data.synthetic: {exc}"]
        return []
    problems = [f"data: unknown corpus key {k!r}" for k in sorted(set(data) - _CORPUS_KEYS)]
    if not Path(data["corpus"]).is_file():
        problems.append(f"data.corpus: file {data['corpus']} not found")
    if int(data.get("n_tasks", 10)) < 1:
        problems.append("data.n_tasks must be >= 1")
    return problems


def build_stream(data: dict, seed: int) -> TaskStream:
    """Materialise the stream for one run seed.

    The data section's own ``seed`` (if given) pins the stream across runs;
    otherwise the stream is regenerated from the run seed.
    """
    if "synthetic" in data:
        syn = dict(data["synthetic"])
        syn.setdefault("seed", seed)
        return generate_synthetic_stream(config_from_dict(syn))
    corpus = load_corpus(data["corpus"])
    return build_task_stream(
        corpus,
        int(data.get("n_tasks", 10)),
        split=tuple(data.get("split", (3, 1, 1))),
        seed=int(data.get("seed", seed)),
        max_train=data.get("max_train"),
        max_test=data.get("max_test"),
    )


def cell_name(variant: str, memory_size: int, seed: int) -> str:
    return f"{variant}_B{memory_size}_s{seed}"


def write_json(obj, path: Path) -> None:
    """Write via a temporary file so readers never see a half-written report."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def run_cell(cfg: ExperimentConfig, variant: str, memory_size: int, seed: int) -> RunReport:
    out = Path(cfg.output_dir)
    name = cell_name(variant, memory_size, seed)
    stream = build_stream(cfg.data, seed)
    tcfg = cfg.train_config(variant, memory_size, seed)
    t0 = time.perf_counter()
    trainer = ContinualTrainer(tcfg, stream)
    report = trainer.run()
    if cfg.probes.get("frozen"):
        k = len(stream)
        report.probes["frozen"] = frozen_encoder_supervised(
            trainer.model.cfg, stream.seen_relations(k), stream.seen_train(k), stream.seen_test(k), seed=seed
        ).to_dict()
    report.config = {"experiment": {"data": cfg.data, "probes": cfg.probes}, "train": asdict(tcfg)}
    write_json(report.to_dict(), out / "reports" / f"{name}.json")
    write_json(
        {"seconds_per_task": report.timings, "total_seconds": time.perf_counter() - t0},
        out / "timings" / f"{name}.json",
    )
    if cfg.checkpoints:
        meta = {"variant": variant, "seed": seed, "memory_size": memory_size, "data": cfg.data}
        save_checkpoint(trainer.model, out / "checkpoints" / f"{name}.ckpt", meta)
    return report


def _run_cell_job(args: tuple[dict, str, int, int]) -> tuple[str, str | None]:
    cfg_dict, variant, b, seed = args
    cfg = ExperimentConfig(**cfg_dict)
    name = cell_name(variant, b, seed)
    try:
        run_cell(cfg, variant, b, seed)
    except Exception as exc:  # keep other cells running; the caller reports failures
        log.exception("cell %s failed", name)
        return name, f"{type(exc).__name__}: {exc}"
    return name, None


def run_grid(cfg: ExperimentConfig, jobs: int = 1) -> dict[str, str | None]:
    """Run every cell; returns {cell name: error message or None}."""
    out = Path(cfg.output_dir)
    for sub in ("reports", "timings", "checkpoints"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    write_json(asdict(cfg), out / "config.resolved.json")
    args = [(asdict(cfg), v, b, s) for v, b, s in cfg.cells()]
    if jobs <= 1:
        results = [_run_cell_job(a) for a in args]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_cell_job, args))
    return dict(results)


# ---------------------------------------------------------------------------
# aggregation


def load_reports(paths: Iterable[str | Path]) -> list[RunReport]:
    reports = []
    for p in sorted(str(x) for x in paths):
        with open(p, encoding="utf-8") as fh:
            d = json.load(fh)
        version = d.get("schema_version")
        if version != REPORT_SCHEMA_VERSION:
            raise VersionError(f"{p}: report schema version {version}, expected {REPORT_SCHEMA_VERSION}")
        reports.append(RunReport.from_dict(d))
    return reports


def glob_reports(pattern: str) -> list[str]:
    return sorted(glob.glob(pattern, recursive=True))


def _key(r: RunReport) -> tuple[str, int]:
    return r.variant, r.memory_size


def _row_label(variant: str, memory_size: int, sizes: set[int]) -> str:
    return variant if len(sizes) == 1 else f"{variant} (B={memory_size})"


def _sorted_keys(reports: Sequence[RunReport]) -> list[tuple[str, int]]:
    order = {v.value: i for i, v in enumerate(Variant)}
    return sorted({_key(r) for r in reports}, key=lambda k: (order.get(k[0], 99), k[0], k[1]))


def _write_csv(path: Path, header: list[str], rows: Iterable[list]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def write_long_csvs(reports: Sequence[RunReport], out: Path) -> None:
    """Per-(variant, B, seed, task) accuracy and taxonomy rows, copied straight from the reports."""
    out.mkdir(parents=True, exist_ok=True)
    reps = sorted(reports, key=lambda r: (r.variant, r.memory_size, r.seed))
    _write_csv(
        out / "accuracy.csv",
        ACCURACY_COLUMNS,
        ([r.variant, r.memory_size, r.seed, t.task, t.accuracy] for r in reps for t in r.tasks),
    )
    _write_csv(
        out / "taxonomy.csv",
        TAXONOMY_COLUMNS,
        (
            [r.variant, r.memory_size, r.seed, t.task, t.taxonomy["total"], t.taxonomy["errors"],
             t.taxonomy["latter"], t.taxonomy["former"], t.taxonomy["inner"]]
            for r in reps for t in r.tasks
        ),
    )


def write_timings_csv(out: Path) -> None:
    rows = []
    for p in sorted((out / "timings").glob("*.json")):
        variant, b, s = p.stem.rsplit("_", 2)
        with open(p, encoding="utf-8") as fh:
            secs = json.load(fh)["seconds_per_task"]
        rows += [[variant, int(b[1:]), int(s[1:]), i + 1, float(x)] for i, x in enumerate(secs)]
    _write_csv(out / "timings.csv", TIMING_COLUMNS, rows)


def accuracy_grid(reports: Sequence[RunReport]) -> tuple[list[str], list[list]]:
    """Rows are variants (per memory size), columns T1..TK; cells are means over seeds."""
    n_tasks = max(len(r.tasks) for r in reports)
    sizes = {r.memory_size for r in reports}
    header = ["variant", "memory_size", "n_seeds"] + [f"T{k}" for k in range(1, n_tasks + 1)]
    rows = []
    for key in _sorted_keys(reports):
        group = [r for r in reports if _key(r) == key]
        cols = []
        for k in range(n_tasks):
            vals = [r.tasks[k].accuracy for r in group if len(r.tasks) > k]
            cols.append(_mean(vals))
        rows.append([_row_label(*key, sizes), key[1], len(group)] + cols)
    return header, rows


def taxonomy_grid(reports: Sequence[RunReport]) -> tuple[list[str], list[list]]:
    """Final-stage latter/former/inner error shares, averaged over seeds."""
    sizes = {r.memory_size for r in reports}
    header = ["variant", "memory_size", "n_seeds", "latter", "former", "inner", "error_rate"]
    rows = []
    for key in _sorted_keys(reports):
        group = [r for r in reports if _key(r) == key]
        tx = [r.tasks[-1].taxonomy for r in group]
        rows.append(
            [_row_label(*key, sizes), key[1], len(group)]
            + [_mean([t[c] for t in tx]) for c in ("latter", "former", "inner", "error_rate")]
        )
    return header, rows


def _mean(vals: Sequence[float]) -> float:
    # a single value is passed through untouched so one-report grids match the report exactly
    if len(vals) == 1:
        return float(vals[0])
    return float(np.mean(vals)) if vals else float("nan")


@dataclass
class Direction:
    name: str
    passed: bool
    detail: str


def check_directions(reports: Sequence[RunReport]) -> list[Direction]:
    """FEA against each ablation on mean final accuracy, and the memory-size trend for FEA."""
    out: list[Direction] = []
    by: dict[tuple[str, int], dict[int, float]] = {}
    for r in reports:
        by.setdefault(_key(r), {})[r.seed] = r.final_accuracy
    sizes = sorted({b for _, b in by})
    main_b = 10 if 10 in sizes else sizes[0]
    fea = by.get(("FEA", main_b))
    if fea:
        for abl in ("A1", "A2", "A3", "A4", "A5"):
            other = by.get((abl, main_b))
            if not other:
                continue
            a, b = float(np.mean(list(fea.values()))), float(np.mean(list(other.values())))
            out.append(Direction(f"FEA > {abl} (B={main_b})", a > b, f"{100 * a:.2f} vs {100 * b:.2f}"))
    fea_sizes = [b for b in sizes if ("FEA", b) in by]
    for lo, hi in zip(fea_sizes, fea_sizes[1:]):
        a, b = float(np.mean(list(by[("FEA", hi)].values()))), float(np.mean(list(by[("FEA", lo)].values())))
        out.append(Direction(f"FEA B={hi} >= B={lo}", a >= b, f"{100 * a:.2f} vs {100 * b:.2f}"))
    return out


def summary_markdown(reports: Sequence[RunReport], directions: Sequence[Direction] | None = None) -> str:
    sizes = {r.memory_size for r in reports}
    lines = ["| variant | seeds | final accuracy (mean ± std) |", "|---|---|---|"]
    for key in _sorted_keys(reports):
        accs = [100 * r.final_accuracy for r in reports if _key(r) == key]
        lines.append(f"| {_row_label(*key, sizes)} | {len(accs)} | {np.mean(accs):.2f} ± {np.std(accs):.2f} |")
    if directions:
        lines += ["", "| direction | result | detail |", "|---|---|---|"]
        lines += [f"| {d.name} | {'PASS' if d.passed else 'FAIL'} | {d.detail} |" for d in directions]
    return "\n".join(lines) + "\n"


def _grid_markdown(header: list[str], rows: list[list]) -> str:
    fmt = lambda v: f"{100 * v:.2f}" if isinstance(v, float) else str(v)  # noqa: E731
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(fmt(v) for v in row) + " |" for row in rows]
    return "\n".join(lines) + "\n"


def aggregate(reports: Sequence[RunReport], out: str | Path) -> list[Direction]:
    """Write long CSVs, the two grids and a markdown summary into ``out``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_long_csvs(reports, out)
    acc_h, acc_rows = accuracy_grid(reports)
    tax_h, tax_rows = taxonomy_grid(reports)
    _write_csv(out / "accuracy_grid.csv", acc_h, acc_rows)
    _write_csv(out / "taxonomy_grid.csv", tax_h, tax_rows)
    directions = check_directions(reports)
    md = [
        f"<!-- csv schema {CSV_SCHEMA}, report schema {REPORT_SCHEMA_VERSION} -->",
        "## Final accuracy",
        "",
        summary_markdown(reports, directions),
        "## Accuracy per task (%)",
        "",
        _grid_markdown(acc_h, acc_rows),
        "## Final-stage error shares (%)",
        "",
        _grid_markdown(tax_h, tax_rows),
    ]
    (out / "summary.md").write_text("\n".join(md), encoding="utf-8")
    return directions
