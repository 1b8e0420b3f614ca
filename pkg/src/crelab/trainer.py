"""Two-stage continual training (fast adaption, then balanced tuning) and its ablations."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .data import Instance, Task, TaskStream
from .diagnostics import (
    boundary_export,
    confusion_pairs,
    error_taxonomy,
    evaluate,
    ubc_probe,
)
from .errors import ConfigError, CoverageError, EmptyDataError
from .memory import MemoryStore, merge_memory, select_memory
from .model import EncoderConfig, RelationModel, encoder_names, pack

log = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1


class Variant(str, Enum):
    FEA = "FEA"
    A1 = "A1"  # remove BT
    A2 = "A2"  # remove FA
    A3 = "A3"  # remove FA and BT
    A4 = "A4"  # up-sampled memory, single stage
    A5 = "A5"  # FA, then up-sampled memory with new data
    SUP = "SUP"  # joint training on everything

    @classmethod
    def parse(cls, name: str) -> "Variant":
        key = name.strip().upper()
        aliases = {"REMOVE_BT": "A1", "REMOVE_FA": "A2", "REMOVE_FA_AND_BT": "A3", "SUPERVISED": "SUP"}
        key = aliases.get(key, key.split("_")[0])
        try:
            return cls(key)
        except ValueError:
            raise ConfigError(f"unknown variant {name!r}") from None


class StageData(str, Enum):
    NONE = "none"
    NEW = "D_k"
    MEMORY = "M_k"
    PREV_AND_NEW = "M_k-1+D_k"
    UPSAMPLED_PREV_AND_NEW = "up(M_k-1)+D_k"


# (stage 1, stage 2) training sets per variant
STAGES: dict[Variant, tuple[StageData, StageData]] = {
    Variant.FEA: (StageData.NEW, StageData.MEMORY),
    Variant.A1: (StageData.NEW, StageData.PREV_AND_NEW),
    Variant.A2: (StageData.PREV_AND_NEW, StageData.MEMORY),
    Variant.A3: (StageData.NONE, StageData.PREV_AND_NEW),
    Variant.A4: (StageData.NONE, StageData.UPSAMPLED_PREV_AND_NEW),
    Variant.A5: (StageData.NEW, StageData.UPSAMPLED_PREV_AND_NEW),
}


@dataclass
class TrainConfig:
    epochs_fa: int = 10
    epochs_bt: int = 10
    batch_size: int = 16
    lr_encoder: float = 1e-3
    lr_head: float = 1e-3
    memory_size: int = 10
    seed: int = 0
    variant: str = "FEA"
    d: int = 32
    blocks: int = 1
    heads: int = 2
    max_len: int = 24
    # diagnostics
    ubc: bool = True
    boundary: bool = True
    eval_between_stages: bool = False

    def validate(self) -> None:
        problems = []
        if self.epochs_fa < 0 or self.epochs_bt < 0:
            problems.append("epochs must be >= 0")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if self.memory_size < 1:
            problems.append("memory_size must be >= 1")
        if self.lr_encoder < 0 or self.lr_head < 0:
            problems.append("learning rates must be >= 0")
        try:
            Variant.parse(self.variant)
        except ConfigError as exc:
            problems.extend(exc.problems)
        if problems:
            raise ConfigError(problems)

    def encoder_config(self, vocab_size: int) -> EncoderConfig:
        return EncoderConfig(vocab_size, d=self.d, blocks=self.blocks, heads=self.heads, max_len=self.max_len)


@dataclass
class StageLog:
    name: str
    data: str
    epochs: int
    steps: int = 0
    label_counts: dict[str, int] = field(default_factory=dict)
    grad_norms: list[float] = field(default_factory=list)


@dataclass
class TaskLog:
    task: int
    accuracy: float
    n_classes: int
    taxonomy: dict
    stages: list[StageLog]
    seconds: float = 0.0
    pre_bt_accuracy: float | None = None
    pre_bt_taxonomy: dict | None = None
    memory_counts: dict[str, int] = field(default_factory=dict)
    boundaries: list[dict] = field(default_factory=list)

    @property
    def bt_grad_norm(self) -> float | None:
        norms = [g for s in self.stages if s.data == StageData.MEMORY.value for g in s.grad_norms]
        return float(np.mean(norms)) if norms else None


@dataclass
class RunReport:
    variant: str
    seed: int
    memory_size: int
    config: dict
    tasks: list[TaskLog] = field(default_factory=list)
    confusion: list[dict] = field(default_factory=list)
    probes: dict = field(default_factory=dict)
    schema_version: int = REPORT_SCHEMA_VERSION

    @property
    def accuracies(self) -> list[float]:
        return [t.accuracy for t in self.tasks]

    @property
    def final_accuracy(self) -> float:
        return self.tasks[-1].accuracy

    @property
    def timings(self) -> list[float]:
        return [t.seconds for t in self.tasks]

    def mean_bt_grad_norm(self, skip_first: bool = True) -> float:
        """Average over tasks of the per-step BT gradient norm (task 1 has no old memory and is skipped by default)."""
        vals = [t.bt_grad_norm for t in self.tasks[1 if skip_first else 0 :] if t.bt_grad_norm is not None]
        return float(np.mean(vals)) if vals else float("nan")

    def to_dict(self, include_timings: bool = False) -> dict:
        tasks = []
        for t in self.tasks:
            d = asdict(t)
            d["bt_grad_norm"] = t.bt_grad_norm
            if not include_timings:
                d.pop("seconds")
            tasks.append(d)
        return {
            "schema_version": self.schema_version,
            "variant": self.variant,
            "seed": self.seed,
            "memory_size": self.memory_size,
            "config": self.config,
            "accuracies": self.accuracies,
            "tasks": tasks,
            "confusion": self.confusion,
            "probes": self.probes,
            "mean_bt_grad_norm": self.mean_bt_grad_norm(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        tasks = []
        for t in d["tasks"]:
            t = dict(t)
            t.pop("bt_grad_norm", None)
            t["stages"] = [StageLog(**s) for s in t["stages"]]
            tasks.append(TaskLog(**t))
        return cls(
            d["variant"], d["seed"], d["memory_size"], d["config"], tasks, d.get("confusion", []),
            d.get("probes", {}), d.get("schema_version", REPORT_SCHEMA_VERSION),
        )


# ---------------------------------------------------------------------------


class ContinualTrainer:
    """Owns one model and one memory for a single run over a task stream."""

    def __init__(self, cfg: TrainConfig, stream: TaskStream):
        cfg.validate()
        self.cfg = cfg
        self.stream = stream
        self.variant = Variant.parse(cfg.variant)
        self.model = RelationModel(cfg.encoder_config(stream.vocab_size), seed=cfg.seed)
        self.memory = MemoryStore(cfg.memory_size)
        self.report = RunReport(self.variant.value, cfg.seed, cfg.memory_size, asdict(cfg))
        self._enc_names = encoder_names(self.model.params)

    # -- optimisation -------------------------------------------------------

    def _lrs(self) -> dict[str, float]:
        lrs = {n: self.cfg.lr_encoder for n in self._enc_names}
        lrs["head.w"] = self.cfg.lr_head
        return lrs

    def train_stage(
        self,
        instances: Sequence[Instance],
        epochs: int,
        name: str,
        data: StageData,
        task: int,
        stage: int,
        record_grad_norms: bool = False,
    ) -> StageLog:
        """Shuffled mini-batch cross-entropy on ``instances`` for ``epochs`` epochs.

        Each stage starts from fresh Adam moments.  The shuffle for every epoch
        comes from its own generator keyed by (seed, task, stage, epoch).
        """
        counts: dict[str, int] = {}
        for x in instances:
            counts[x.relation] = counts.get(x.relation, 0) + 1
        slog = StageLog(name, data.value, epochs, 0, counts)
        if epochs == 0 or not instances:
            return slog
        head = self.model.head
        missing = sorted(set(counts) - set(head.relations))
        if missing:
            raise CoverageError(f"stage data has relations outside the head: {missing}")
        batch = pack(instances, self.model.cfg.max_len)
        labels = np.array([head.index[x.relation] for x in instances], dtype=np.intp)
        params = self.model.params
        params.reset_optimizer()
        params.zero_grad()
        lrs = self._lrs()
        bs = self.cfg.batch_size
        for epoch in range(epochs):
            rng = np.random.default_rng([self.cfg.seed, task, stage, epoch])
            order = rng.permutation(len(instances))
            for start in range(0, len(order), bs):
                rows = order[start : start + bs]
                loss = ad.softmax_cross_entropy(self.model.logits(batch.take(rows)), labels[rows])
                loss.backward()
                if record_grad_norms:
                    slog.grad_norms.append(params.grad_norm())
                ad.adam_step(params, lrs)
                slog.steps += 1
        return slog

    # -- stage data -----------------------------------------------------------

    def _upsampled_memory(self, n_new: int) -> list[Instance]:
        out: list[Instance] = []
        for xs in self.memory.slots.values():
            reps = math.ceil(n_new / len(xs)) if xs else 0
            out.extend(xs * reps)
        return out

    def stage_instances(self, data: StageData, task: Task) -> list[Instance]:
        if data is StageData.NONE:
            return []
        if data is StageData.NEW:
            return list(task.train)
        if data is StageData.MEMORY:
            return self.memory.instances()
        if data is StageData.PREV_AND_NEW:
            return self.memory.instances() + list(task.train)
        if data is StageData.UPSAMPLED_PREV_AND_NEW:
            per_rel = len(task.train) // max(1, len(task.relations))
            return self._upsampled_memory(per_rel) + list(task.train)
        raise ValueError(data)

    def update_memory(self, task: Task) -> None:
        by_rel: dict[str, list[Instance]] = {r: [] for r in task.relations}
        for x in task.train:
            by_rel[x.relation].append(x)
        new = {}
        for j, r in enumerate(task.relations):
            seed = int(np.random.SeedSequence([self.cfg.seed, task.index, j]).generate_state(1)[0])
            new[r] = select_memory(self.model, r, by_rel[r], self.cfg.memory_size, seed=seed)
        self.memory = merge_memory(self.memory, new, task.index)

    # -- per-task driver --------------------------------------------------

    def fast_adaption(self, task: Task) -> StageLog:
        if not task.train:
            raise EmptyDataError(f"task {task.index} has no training data")
        return self.train_stage(task.train, self.cfg.epochs_fa, "fast_adaption", StageData.NEW, task.index, 1)

    def balanced_tuning(self, task: Task) -> StageLog:
        missing = sorted(set(self.model.head.relations) - set(self.memory.relations))
        if missing:
            raise CoverageError(f"memory lacks seen relations: {missing}")
        return self.train_stage(
            self.memory.instances(), self.cfg.epochs_bt, "balanced_tuning", StageData.MEMORY, task.index, 2,
            record_grad_norms=True,
        )

    def run_task(self, task: Task) -> TaskLog:
        unseen = [r for r in task.relations if r in self.model.head.index]
        if unseen:
            raise ConfigError(f"task {task.index} relations already seen: {unseen}")
        t0 = time.perf_counter()
        self.model.extend_head(task.relations, task.index)
        first, second = STAGES[self.variant]
        stages: list[StageLog] = []
        pre_acc = pre_tax = None

        if first is not StageData.NONE:
            stages.append(
                self.train_stage(self.stage_instances(first, task), self.cfg.epochs_fa, "stage1", first, task.index, 1)
            )
        else:
            stages.append(StageLog("stage1", StageData.NONE.value, 0))
        if second is StageData.MEMORY:
            self.update_memory(task)
        if self.cfg.eval_between_stages:
            pre_acc, recs = evaluate(self.model, self.stream.seen_test(task.index), self.stream.relation_task)
            pre_tax = error_taxonomy(recs).to_dict()
        stages.append(
            self.train_stage(
                self.stage_instances(second, task), self.cfg.epochs_bt, "stage2", second, task.index, 2,
                record_grad_norms=second is StageData.MEMORY,
            )
        )
        if second is not StageData.MEMORY:
            self.update_memory(task)
        seconds = time.perf_counter() - t0

        acc, records = evaluate(self.model, self.stream.seen_test(task.index), self.stream.relation_task)
        tlog = TaskLog(
            task.index, acc, self.model.head.num_classes, error_taxonomy(records).to_dict(), stages, seconds,
            pre_acc, pre_tax, self.memory.counts(),
        )
        if self.cfg.boundary:
            tlog.boundaries = self._boundaries(task)
        self._last_records = records
        return tlog

    def _boundaries(self, task: Task) -> list[dict]:
        out = []
        for old, new in self.stream.similar_pairs:
            if self.stream.relation_task[new] != task.index:
                continue
            xs = [x for x in self.stream.seen_test(task.index) if x.relation in (old, new)]
            exp = boundary_export(self.model, old, new, xs)
            out.append(exp.sidecar())
        return out

    def run(self) -> RunReport:
        if self.variant is Variant.SUP:
            return self._run_supervised()
        for task in self.stream.tasks:
            tlog = self.run_task(task)
            log.info("variant=%s seed=%d task=%d acc=%.4f", self.variant.value, self.cfg.seed, task.index, tlog.accuracy)
            self.report.tasks.append(tlog)
        self._finish()
        return self.report

    def _finish(self) -> None:
        k = len(self.stream)
        self.report.confusion = [asdict(p) for p in confusion_pairs(self._last_records, top_n=10)]
        if self.cfg.ubc:
            probe = ubc_probe(
                self.model, self.stream.seen_train(k), self.stream.seen_test(k), seed=self.cfg.seed,
                original_accuracy=self.report.final_accuracy,
            )
            probe.stage = k
            self.report.probes["ubc"] = probe.to_dict()

    def _run_supervised(self) -> RunReport:
        """Joint training on the union of all tasks; the curve scores prefixes with a restricted argmax."""
        t0 = time.perf_counter()
        for task in self.stream.tasks:
            self.model.extend_head(task.relations, task.index)
        train = self.stream.seen_train(len(self.stream))
        stage = self.train_stage(train, self.cfg.epochs_fa, "joint", StageData.NEW, 0, 1)
        seconds = (time.perf_counter() - t0) / len(self.stream)
        for task in self.stream.tasks:
            n_cls = len(self.stream.seen_relations(task.index))
            acc, records = evaluate(self.model, self.stream.seen_test(task.index), self.stream.relation_task, n_cls)
            self.report.tasks.append(
                TaskLog(task.index, acc, n_cls, error_taxonomy(records).to_dict(),
                        [stage] if task.index == 1 else [], seconds)
            )
            self._last_records = records
        self._finish()
        return self.report


def run_stream(stream: TaskStream, cfg: TrainConfig) -> RunReport:
    return ContinualTrainer(cfg, stream).run()
