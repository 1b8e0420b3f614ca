"""Instances, task streams, corpus loading and the synthetic relation generator."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, ParseError, SpanError

# Reserved token ids. Corpus tokens are mapped to ids >= NUM_SPECIAL.
PAD, E11, E12, E21, E22, UNK = range(6)
NUM_SPECIAL = 6
MARKER_IDS = (E11, E12, E21, E22)


@dataclass(frozen=True)
class Instance:
    tokens: tuple[int, ...]
    head: tuple[int, int]
    tail: tuple[int, int]
    relation: str

    def __post_init__(self):
        check_spans(len(self.tokens), self.head, self.tail)
        if not self.relation:
            raise ValueError("relation id must be non-empty")


def check_spans(n: int, head: Sequence[int], tail: Sequence[int]) -> None:
    for name, (s, e) in (("head", head), ("tail", tail)):
        if s > e:
            raise SpanError(f"{name} span ({s}, {e}) is empty")
        if s < 0 or e >= n:
            raise SpanError(f"{name} span ({s}, {e}) out of bounds for {n} tokens")
    if not (head[1] < tail[0] or tail[1] < head[0]):
        raise SpanError(f"head span {tuple(head)} overlaps tail span {tuple(tail)}")


@dataclass(frozen=True)
class Task:
    index: int  # 1-based
    relations: tuple[str, ...]
    train: tuple[Instance, ...]
    val: tuple[Instance, ...]
    test: tuple[Instance, ...]


@dataclass
class TaskStream:
    tasks: list[Task]
    vocab_size: int
    similar_pairs: list[tuple[str, str]] = field(default_factory=list)
    templates: dict[str, tuple[int, ...]] = field(default_factory=dict)

    def __post_init__(self):
        self.relation_task: dict[str, int] = {}
        for task in self.tasks:
            for r in task.relations:
                if r in self.relation_task:
                    raise ConfigError(f"relation {r!r} appears in tasks {self.relation_task[r]} and {task.index}")
                self.relation_task[r] = task.index

    def __len__(self) -> int:
        return len(self.tasks)

    def seen_relations(self, k: int) -> list[str]:
        """Relations introduced by tasks 1..k, in stream order."""
        return [r for t in self.tasks[:k] for r in t.relations]

    def seen_test(self, k: int) -> list[Instance]:
        return [x for t in self.tasks[:k] for x in t.test]

    def seen_train(self, k: int) -> list[Instance]:
        return [x for t in self.tasks[:k] for x in t.train]

    @property
    def relations(self) -> list[str]:
        return self.seen_relations(len(self.tasks))


@dataclass
class Corpus:
    instances: list[Instance]
    relations: list[str]
    vocab: dict[str, int] | None
    vocab_size: int


# ---------------------------------------------------------------------------
# corpus files


def load_corpus(path: str | Path) -> Corpus:
    """Read a JSON-lines instance file.

    Each line holds ``tokens`` (strings or non-negative ints), ``h`` and ``t``
    (inclusive ``[start, end]`` spans) and ``relation``.  String tokens get ids
    in order of first appearance; integer tokens are shifted past the reserved
    ids.  The two styles cannot be mixed within a file.
    """
    instances: list[Instance] = []
    relations: dict[str, None] = {}
    vocab: dict[str, int] = {}
    max_int = -1
    kind = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                raw = obj["tokens"]
                head = tuple(int(v) for v in obj["h"])
                tail = tuple(int(v) for v in obj["t"])
                rel = str(obj["relation"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"malformed instance ({exc})", lineno) from None
            if len(head) != 2 or len(tail) != 2 or not isinstance(raw, list) or not raw or not rel:
                raise ParseError("malformed instance (need non-empty tokens, 2-element h/t, relation)", lineno)
            line_kind = "int" if all(isinstance(tok, int) for tok in raw) else "str"
            if kind is None:
                kind = line_kind
            elif kind != line_kind:
                raise ParseError("mixed integer and string tokens across lines", lineno)
            if line_kind == "int":
                if min(raw) < 0:
                    raise ParseError("negative token id", lineno)
                ids = tuple(NUM_SPECIAL + tok for tok in raw)
                max_int = max(max_int, max(raw))
            else:
                ids = tuple(vocab.setdefault(str(tok), NUM_SPECIAL + len(vocab)) for tok in raw)
            try:
                check_spans(len(ids), head, tail)
            except SpanError as exc:
                raise SpanError(f"line {lineno}: {exc}") from None
            instances.append(Instance(ids, head, tail, rel))
            relations.setdefault(rel)
    if kind == "int":
        return Corpus(instances, list(relations), None, NUM_SPECIAL + max_int + 1)
    return Corpus(instances, list(relations), vocab, NUM_SPECIAL + len(vocab))


def write_corpus(instances: Iterable[Instance], path: str | Path) -> None:
    """Inverse of :func:`load_corpus` for integer-token files."""
    with open(path, "w", encoding="utf-8") as fh:
        for x in instances:
            rec = {
                "tokens": [t - NUM_SPECIAL for t in x.tokens],
                "h": list(x.head),
                "t": list(x.tail),
                "relation": x.relation,
            }
            fh.write(json.dumps(rec) + "\n")


def partition_sizes(n: int, k: int) -> list[int]:
    """Near-equal sizes; the first ``n % k`` parts get one extra."""
    base, extra = divmod(n, k)
    return [base + (1 if i < extra else 0) for i in range(k)]


def build_task_stream(
    corpus: Corpus,
    n_tasks: int,
    split: Sequence[int] = (3, 1, 1),
    seed: int = 0,
    max_train: int | None = None,
    max_test: int | None = None,
) -> TaskStream:
    """Shuffle relations with ``seed`` and cut them into ``n_tasks`` tasks.

    Each relation's instances are shuffled and split train/val/test by the
    integer ``split`` ratio (floor for train and val, remainder to test), then
    optionally capped.
    """
    rels = list(corpus.relations)
    if n_tasks < 1 or n_tasks > len(rels):
        raise ConfigError(f"cannot divide {len(rels)} relations into {n_tasks} tasks")
    if len(split) != 3 or min(split) < 0 or sum(split) <= 0:
        raise ConfigError(f"split ratio must be three non-negative ints, got {tuple(split)}")
    rng = np.random.default_rng(seed)
    order = [rels[i] for i in rng.permutation(len(rels))]
    by_rel: dict[str, list[Instance]] = {r: [] for r in rels}
    for x in corpus.instances:
        by_rel[x.relation].append(x)
    total = sum(split)
    tasks = []
    start = 0
    for k, size in enumerate(partition_sizes(len(order), n_tasks), start=1):
        task_rels = tuple(order[start : start + size])
        start += size
        train, val, test = [], [], []
        for r in task_rels:
            xs = by_rel[r]
            perm = rng.permutation(len(xs))
            n_tr = len(xs) * split[0] // total
            n_va = len(xs) * split[1] // total
            tr = [xs[i] for i in perm[:n_tr]]
            va = [xs[i] for i in perm[n_tr : n_tr + n_va]]
            te = [xs[i] for i in perm[n_tr + n_va :]]
            train += tr[:max_train] if max_train else tr
            val += va
            test += te[:max_test] if max_test else te
        tasks.append(Task(k, task_rels, tuple(train), tuple(val), tuple(test)))
    return TaskStream(tasks, corpus.vocab_size)


# ---------------------------------------------------------------------------
# synthetic streams


@dataclass(frozen=True)
class SyntheticConfig:
    n_relations: int = 40
    n_tasks: int = 10
    train_per_relation: int = 100
    val_per_relation: int = 20
    test_per_relation: int = 20
    vocab_size: int = 200
    seq_len: int = 16
    signature_len: int = 4
    similar_pairs: int = 6
    # optional fixed (older_task, newer_task) per similar pair, 1-based
    pair_placement: tuple[tuple[int, int], ...] | None = None
    noise: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        problems = []
        if self.n_tasks < 1 or self.n_relations % self.n_tasks:
            problems.append(f"n_relations={self.n_relations} not divisible by n_tasks={self.n_tasks}")
        if self.similar_pairs < 0 or 2 * self.similar_pairs > self.n_relations:
            problems.append(f"similar_pairs={self.similar_pairs} needs {2 * self.similar_pairs} relations")
        if self.similar_pairs and self.n_tasks < 2:
            problems.append("similar pairs need at least 2 tasks")
        if self.signature_len < 2:
            problems.append("signature_len must be >= 2")
        if self.seq_len < self.signature_len + 2:
            problems.append(f"seq_len={self.seq_len} too short for signature and two entities")
        if not 0.0 <= self.noise < 1.0:
            problems.append(f"noise={self.noise} outside [0, 1)")
        if min(self.train_per_relation, self.test_per_relation) < 1 or self.val_per_relation < 0:
            problems.append("per-relation instance counts must be positive")
        if self.pair_placement is not None:
            if len(self.pair_placement) != self.similar_pairs:
                problems.append("pair_placement needs one (older, newer) entry per similar pair")
            for a, b in self.pair_placement:
                if not (1 <= a < b <= self.n_tasks):
                    problems.append(f"pair placement ({a}, {b}) must satisfy 1 <= older < newer <= n_tasks")
        n_sig = self.signature_tokens_needed()
        if self.vocab_size - n_sig < 8:
            problems.append(f"vocab_size={self.vocab_size} too small: {n_sig} signature tokens leave <8 background tokens")
        if problems:
            raise ConfigError(problems)

    def signature_tokens_needed(self) -> int:
        s = self.signature_len
        plain = self.n_relations - 2 * self.similar_pairs
        return plain * s + self.similar_pairs * (s + 1)


def _place_relations(cfg: SyntheticConfig, rng: np.random.Generator) -> list[list[int]]:
    """Assign relation indices to tasks; pair members always land in different tasks."""
    per_task = cfg.n_relations // cfg.n_tasks
    tasks: list[list[int]] = [[] for _ in range(cfg.n_tasks)]
    for p in range(cfg.similar_pairs):
        a, b = 2 * p, 2 * p + 1
        if cfg.pair_placement is not None:
            ta, tb = (t - 1 for t in cfg.pair_placement[p])
        else:
            open_tasks = [i for i in range(cfg.n_tasks) if len(tasks[i]) < per_task]
            if len(open_tasks) < 2:
                raise ConfigError("not enough task slots to separate similar pairs")
            ta, tb = sorted(rng.choice(open_tasks, size=2, replace=False).tolist())
        if len(tasks[ta]) >= per_task or len(tasks[tb]) >= per_task:
            raise ConfigError(f"pair placement overfills task {ta + 1} or {tb + 1}")
        tasks[ta].append(a)
        tasks[tb].append(b)
    rest = [2 * cfg.similar_pairs + i for i in rng.permutation(cfg.n_relations - 2 * cfg.similar_pairs)]
    for i in range(cfg.n_tasks):
        while len(tasks[i]) < per_task:
            tasks[i].append(int(rest.pop(0)))
    for t in tasks:
        rng.shuffle(t)
    return tasks


def _sample_instance(
    signature: tuple[int, ...],
    background: np.ndarray,
    cfg: SyntheticConfig,
    rng: np.random.Generator,
) -> tuple[tuple[int, ...], tuple[int, int], tuple[int, int]]:
    L = cfg.seq_len
    tokens = rng.choice(background, size=L)
    h_len, t_len = (int(v) for v in rng.integers(1, 3, size=2))
    while True:
        hs = int(rng.integers(0, L - h_len + 1))
        ts = int(rng.integers(0, L - t_len + 1))
        head, tail = (hs, hs + h_len - 1), (ts, ts + t_len - 1)
        if head[1] < tail[0] or tail[1] < head[0]:
            break
    entity = set(range(head[0], head[1] + 1)) | set(range(tail[0], tail[1] + 1))
    free = [i for i in range(L) if i not in entity]
    if len(free) < len(signature):
        head, tail = (0, 0), (L - 1, L - 1)
        free = list(range(1, L - 1))
    slots = rng.choice(free, size=len(signature), replace=False)
    keep = rng.random(len(signature)) >= cfg.noise
    for slot, tok, kept in zip(slots, signature, keep):
        if kept:
            tokens[slot] = tok
    return tuple(int(t) for t in tokens), head, tail


def generate_synthetic_stream(cfg: SyntheticConfig) -> TaskStream:
    """Build a seeded class-incremental stream with planted similar relation pairs.

    Every relation owns a signature of ``signature_len`` tokens scattered among
    uniformly drawn background tokens; each signature token is independently
    replaced by background with probability ``noise``.  The two members of a
    similar pair share all but one signature token and are placed in different
    tasks.  Relation ``R00``/``R01`` is the first pair, ``R02``/``R03`` the
    second, and so on; within a pair the lower-numbered relation may land in
    either the earlier or the later task.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    s = cfg.signature_len
    perm = NUM_SPECIAL + rng.permutation(cfg.vocab_size)
    n_sig = cfg.signature_tokens_needed()
    sig_pool = [int(t) for t in perm[:n_sig]]
    background = np.sort(perm[n_sig:])
    names = [f"R{i:02d}" for i in range(cfg.n_relations)]
    templates: dict[str, tuple[int, ...]] = {}
    pos = 0
    for p in range(cfg.similar_pairs):
        shared = sig_pool[pos : pos + s - 1]
        templates[names[2 * p]] = tuple(shared + [sig_pool[pos + s - 1]])
        templates[names[2 * p + 1]] = tuple(shared + [sig_pool[pos + s]])
        pos += s + 1
    for i in range(2 * cfg.similar_pairs, cfg.n_relations):
        templates[names[i]] = tuple(sig_pool[pos : pos + s])
        pos += s

    placement = _place_relations(cfg, rng)
    n_per = (cfg.train_per_relation, cfg.val_per_relation, cfg.test_per_relation)
    tasks = []
    for k, rel_ids in enumerate(placement, start=1):
        splits: list[list[Instance]] = [[], [], []]
        rels = tuple(names[i] for i in rel_ids)
        for r in rels:
            for part, count in zip(splits, n_per):
                for _ in range(count):
                    toks, head, tail = _sample_instance(templates[r], background, cfg, rng)
                    part.append(Instance(toks, head, tail, r))
        tasks.append(Task(k, rels, *(tuple(p) for p in splits)))

    stream = TaskStream(tasks, NUM_SPECIAL + cfg.vocab_size, templates=templates)
    pairs = []
    for p in range(cfg.similar_pairs):
        a, b = names[2 * p], names[2 * p + 1]
        old, new = sorted((a, b), key=lambda r: stream.relation_task[r])
        pairs.append((old, new))
    stream.similar_pairs = pairs
    return stream


def config_to_dict(cfg: SyntheticConfig) -> dict:
    d = asdict(cfg)
    if d["pair_placement"] is not None:
        d["pair_placement"] = [list(p) for p in d["pair_placement"]]
    return d


def config_from_dict(d: dict) -> SyntheticConfig:
    d = dict(d)
    if d.get("pair_placement") is not None:
        d["pair_placement"] = tuple(tuple(p) for p in d["pair_placement"])
    unknown = set(d) - set(SyntheticConfig.__dataclass_fields__)
    if unknown:
        raise ConfigError([f"unknown synthetic config key {k!r}" for k in sorted(unknown)])
    return SyntheticConfig(**d)
