"""Evaluation and analysis: error taxonomy, confusion pairs, classifier probes,
memory gradient norms and 2-D decision-boundary exports."""

from __future__ import annotations

import csv
import json
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .data import Instance
from .errors import CoverageError, EmptyDataError
from .model import EncoderConfig, RelationModel, pack

# probe head training (frozen encoder)
PROBE_EPOCHS = 30
PROBE_LR = 1e-3
PROBE_BATCH = 32
# 2-D logistic boundary fit
BOUNDARY_STEPS = 500
BOUNDARY_LR = 0.05


@dataclass(frozen=True)
class PredictionRecord:
    iid: int
    gold: str
    gold_task: int
    pred: str
    pred_task: int

    @property
    def correct(self) -> bool:
        return self.gold == self.pred


def evaluate(
    model: RelationModel,
    instances: Sequence[Instance],
    relation_task: Mapping[str, int],
    n_classes: int | None = None,
) -> tuple[float, list[PredictionRecord]]:
    """Accuracy over ``instances`` and one record per instance.

    ``n_classes`` restricts the argmax to the first head rows (used to score a
    jointly trained head on a prefix of the stream).
    """
    head = model.head
    missing = sorted({x.relation for x in instances} - set(head.relations[:n_classes]))
    if missing:
        raise CoverageError(f"test relations not covered by the head: {missing}")
    if not instances:
        return 0.0, []
    H = model.encode_numpy(pack(instances))
    scores = ad.row_dots_np(H, head.weight.data[:n_classes])
    pred = scores.argmax(axis=1)
    records = []
    for i, (x, p) in enumerate(zip(instances, pred)):
        rel = head.relations[int(p)]
        records.append(PredictionRecord(i, x.relation, relation_task[x.relation], rel, relation_task[rel]))
    acc = sum(r.correct for r in records) / len(records)
    return acc, records


@dataclass
class Taxonomy:
    total: int
    errors: int
    latter_count: int
    former_count: int
    inner_count: int

    @property
    def error_rate(self) -> float:
        return self.errors / self.total if self.total else 0.0

    def _share(self, n: int) -> float:
        return n / self.errors if self.errors else 0.0

    @property
    def latter(self) -> float:
        return self._share(self.latter_count)

    @property
    def former(self) -> float:
        return self._share(self.former_count)

    @property
    def inner(self) -> float:
        return self._share(self.inner_count)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(error_rate=self.error_rate, latter=self.latter, former=self.former, inner=self.inner)
        return d


def error_taxonomy(records: Sequence[PredictionRecord]) -> Taxonomy:
    """Split errors by when the predicted relation appeared relative to the gold one.

    latter: predicted relation came from a later task; former: from an earlier
    task; inner: from the same task.  Shares are fractions of errors.
    """
    latter = former = inner = 0
    for r in records:
        if r.correct:
            continue
        if r.gold_task < r.pred_task:
            latter += 1
        elif r.gold_task > r.pred_task:
            former += 1
        else:
            inner += 1
    return Taxonomy(len(records), latter + former + inner, latter, former, inner)


@dataclass(frozen=True)
class ConfusionPair:
    gold: str
    pred: str
    count: int
    rate: float


def confusion_pairs(records: Sequence[PredictionRecord], top_n: int | None = None) -> list[ConfusionPair]:
    """Most frequent (gold -> predicted) mistakes; rate is relative to the gold relation's test size."""
    support = Counter(r.gold for r in records)
    wrong = Counter((r.gold, r.pred) for r in records if not r.correct)
    ranked = sorted(wrong.items(), key=lambda kv: (-kv[1], kv[0]))
    out = [ConfusionPair(g, p, n, n / support[g]) for (g, p), n in ranked]
    return out[:top_n] if top_n is not None else out


# ---------------------------------------------------------------------------
# probes


@dataclass
class ProbeResult:
    kind: str
    accuracy: float
    original_accuracy: float | None = None
    stage: int | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def train_softmax_head(
    features: np.ndarray,
    labels: np.ndarray,
    n_classes: int,
    seed: int = 0,
    epochs: int = PROBE_EPOCHS,
    lr: float = PROBE_LR,
    batch_size: int = PROBE_BATCH,
) -> np.ndarray:
    """Fit a bias-free linear softmax head on fixed features; returns (n_classes, width)."""
    store = ParamStore()
    w = store.add("w", np.zeros((n_classes, features.shape[1])))
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.intp)
    for epoch in range(epochs):
        rng = np.random.default_rng([seed, epoch])
        order = rng.permutation(len(X))
        for start in range(0, len(X), batch_size):
            rows = order[start : start + batch_size]
            logits = ad.matmul(Tensor(X[rows]), ad.transpose(w, (1, 0)))
            ad.softmax_cross_entropy(logits, y[rows]).backward()
            ad.adam_step(store, lr)
    return w.data.copy()


def _probe_accuracy(model: RelationModel, weight: np.ndarray, test: Sequence[Instance]) -> float:
    H = model.encode_numpy(pack(test))
    gold = np.array([model.head.index[x.relation] for x in test])
    return float((ad.row_dots_np(H, weight).argmax(axis=1) == gold).mean())


def ubc_probe(
    model: RelationModel,
    train: Sequence[Instance],
    test: Sequence[Instance],
    seed: int = 0,
    original_accuracy: float | None = None,
    **head_kwargs,
) -> ProbeResult:
    """Retrain a fresh head on frozen encodings of all training data and score it on ``test``.

    The model itself is not modified.
    """
    head = model.head
    missing = sorted({x.relation for x in list(train) + list(test)} - set(head.relations))
    if missing:
        raise CoverageError(f"probe data has relations outside the head: {missing}")
    H = model.encode_numpy(pack(train))
    y = np.array([head.index[x.relation] for x in train])
    weight = train_softmax_head(H, y, head.num_classes, seed=seed, **head_kwargs)
    return ProbeResult("ubc", _probe_accuracy(model, weight, test), original_accuracy)


def frozen_encoder_supervised(
    cfg: EncoderConfig,
    relations: Sequence[str],
    train: Sequence[Instance],
    test: Sequence[Instance],
    seed: int = 0,
    **head_kwargs,
) -> ProbeResult:
    """Head-only training over a freshly initialised, never-trained encoder."""
    model = RelationModel(cfg, seed=seed)
    model.extend_head(list(relations), 0)
    H = model.encode_numpy(pack(train))
    y = np.array([model.head.index[x.relation] for x in train])
    weight = train_softmax_head(H, y, model.head.num_classes, seed=seed, **head_kwargs)
    return ProbeResult("frozen", _probe_accuracy(model, weight, test))


def memory_gradient_norm(model: RelationModel, instances: Sequence[Instance]) -> float:
    """L2 norm of the full parameter gradient of the mean loss on ``instances``; parameters untouched."""
    saved = {k: t.grad for k, t in model.params.items()}
    model.params.zero_grad()
    labels = np.array([model.head.index[x.relation] for x in instances])
    ad.softmax_cross_entropy(model.logits(pack(instances)), labels).backward()
    norm = model.params.grad_norm()
    for k, t in model.params.items():
        t.grad = saved[k]
    return norm


# ---------------------------------------------------------------------------
# 2-D boundary export


def pca_2d(X: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project onto the top two principal axes; returns (coords, components, mean)."""
    X = np.asarray(X, dtype=np.float64)
    mean = X.mean(axis=0)
    centered = X - mean
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:2]
    # fix the sign so the largest-magnitude loading of each axis is positive
    signs = np.sign(comps[np.arange(len(comps)), np.abs(comps).argmax(axis=1)])
    comps = comps * np.where(signs == 0, 1.0, signs)[:, None]
    coords = centered @ comps.T
    if coords.shape[1] < 2:
        coords = np.pad(coords, ((0, 0), (0, 2 - coords.shape[1])))
    return coords, comps, mean


def fit_logistic_2d(
    coords: np.ndarray, labels: np.ndarray, steps: int = BOUNDARY_STEPS, lr: float = BOUNDARY_LR
) -> tuple[np.ndarray, float]:
    """Binary logistic regression by full-batch Adam; returns (w, b) with class 1 where w.x + b > 0."""
    store = ParamStore()
    W = store.add("w", np.zeros((coords.shape[1], 2)))
    b = store.add("b", np.zeros(2))
    X = Tensor(coords)
    y = np.asarray(labels, dtype=np.intp)
    for _ in range(steps):
        ad.softmax_cross_entropy(ad.linear(X, W, b), y).backward()
        ad.adam_step(store, lr)
    return W.data[:, 1] - W.data[:, 0], float(b.data[1] - b.data[0])


@dataclass
class BoundaryExport:
    old_relation: str
    new_relation: str
    coords: np.ndarray
    gold: list[str]
    predicted: list[str]
    gold_boundary: tuple[list[float], float]
    pred_boundary: tuple[list[float], float]
    gold_boundary_accuracy: float
    skew: float

    def sidecar(self) -> dict:
        return {
            "old_relation": self.old_relation,
            "new_relation": self.new_relation,
            "gold_boundary": {"w": self.gold_boundary[0], "b": self.gold_boundary[1]},
            "pred_boundary": {"w": self.pred_boundary[0], "b": self.pred_boundary[1]},
            "gold_boundary_accuracy": self.gold_boundary_accuracy,
            "skew": self.skew,
        }

    def write(self, csv_path: str | Path, json_path: str | Path | None = None) -> None:
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "y", "gold", "predicted"])
            for (x, y), g, p in zip(self.coords, self.gold, self.predicted):
                w.writerow([repr(float(x)), repr(float(y)), g, p])
        json_path = json_path or Path(csv_path).with_suffix(".json")
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump(self.sidecar(), fh, indent=2, sort_keys=True)


def boundary_export(
    model: RelationModel, old_relation: str, new_relation: str, instances: Sequence[Instance]
) -> BoundaryExport:
    """Project the pair's encodings to 2-D and fit gold and prediction boundaries there.

    ``skew`` is the fraction of ``old_relation`` points that the prediction
    boundary places on the new-relation side.
    """
    for r in (old_relation, new_relation):
        if r not in model.head.index:
            raise CoverageError(f"relation {r!r} not seen by the model")
    xs = [x for x in instances if x.relation in (old_relation, new_relation)]
    if len(xs) != len(instances):
        raise ValueError("boundary export instances must belong to the two relations")
    n_old = sum(x.relation == old_relation for x in xs)
    if n_old < 2 or len(xs) - n_old < 2:
        raise EmptyDataError("boundary export needs at least 2 instances per relation")
    batch = pack(xs)
    H = model.encode_numpy(batch)
    coords, _, _ = pca_2d(H)
    predicted = [model.head.relations[i] for i in ad.row_dots_np(H, model.head.weight.data).argmax(axis=1)]
    gold01 = np.array([x.relation == new_relation for x in xs], dtype=np.intp)
    pred01 = np.array([p == new_relation for p in predicted], dtype=np.intp)
    wg, bg = fit_logistic_2d(coords, gold01)
    wp, bp = fit_logistic_2d(coords, pred01)
    gold_acc = float((((coords @ wg + bg) > 0).astype(np.intp) == gold01).mean())
    old_side = (coords @ wp + bp) > 0
    skew = float(old_side[gold01 == 0].mean())
    return BoundaryExport(
        old_relation,
        new_relation,
        coords,
        [x.relation for x in xs],
        predicted,
        (wg.tolist(), bg),
        (wp.tolist(), bp),
        gold_acc,
        skew,
    )
