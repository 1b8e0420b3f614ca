"""Per-relation exemplar memory and K-means exemplar selection."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import NUM_SPECIAL, Instance
from .errors import DuplicateError, EmptyDataError

KMEANS_MAX_ITER = 100
KMEANS_TOL = 1e-6
KMEANS_N_INIT = 10


@dataclass
class ClusterResult:
    centroids: np.ndarray  # (k, d)
    labels: np.ndarray  # (n,)
    iterations: int
    converged: bool

    def sse(self, points: np.ndarray) -> float:
        diff = np.asarray(points, dtype=np.float64) - self.centroids[self.labels]
        return float((diff * diff).sum())


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centroids[None, :, :]
    return (diff * diff).sum(axis=2)


def _kmeans_pp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    chosen = [int(rng.integers(n))]
    d2 = _sq_dists(points, points[chosen])[:, 0]
    while len(chosen) < k:
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            # every remaining point coincides with a centre
            rest = [i for i in range(n) if i not in chosen]
            idx = int(rest[rng.integers(len(rest))])
        chosen.append(idx)
        d2 = np.minimum(d2, _sq_dists(points, points[[idx]])[:, 0])
    return points[chosen].copy()


def kmeans(
    points: np.ndarray,
    k: int,
    seed: int = 0,
    max_iter: int = KMEANS_MAX_ITER,
    tol: float = KMEANS_TOL,
    n_init: int = KMEANS_N_INIT,
) -> ClusterResult:
    """Best of ``n_init`` Lloyd runs (lowest SSE, earliest on ties), each from a k-means++ start.

    Each run iterates until assignments stop changing or the largest centroid shift
    falls below ``tol``.  On a stable assignment every centroid is the exact
    mean of its points and every point sits with its nearest centroid (ties to
    the lowest centroid index).
    """
    X = np.asarray(points, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    n = len(X)
    if n == 0:
        raise EmptyDataError("kmeans needs at least one point")
    if k < 1 or k > n:
        raise ValueError(f"cluster count k={k} must be in [1, {n}]")
    if n_init < 1:
        raise ValueError("n_init must be >= 1")
    best: ClusterResult | None = None
    best_sse = np.inf
    for rng in (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n_init)):
        result = _lloyd(X, k, rng, max_iter, tol)
        sse = result.sse(X)
        if sse < best_sse:
            best, best_sse = result, sse
    return best


def _lloyd(X: np.ndarray, k: int, rng: np.random.Generator, max_iter: int, tol: float) -> ClusterResult:
    C = _kmeans_pp(X, k, rng)
    labels = _sq_dists(X, C).argmin(axis=1)
    converged = False
    it = 0
    while it < max_iter and not converged:
        it += 1
        C_new = _means(X, labels, C)
        shift = float(np.sqrt(((C_new - C) ** 2).sum(axis=1)).max())
        C = C_new
        new_labels = _sq_dists(X, C).argmin(axis=1)
        converged = bool(np.array_equal(new_labels, labels)) or shift < tol
        labels = new_labels
    C = _means(X, labels, C)
    return ClusterResult(C, labels, it, converged)


def _means(X: np.ndarray, labels: np.ndarray, C: np.ndarray) -> np.ndarray:
    k = len(C)
    out = C.copy()
    counts = np.bincount(labels, minlength=k)
    for j in range(k):
        if counts[j]:
            out[j] = X[labels == j].mean(axis=0)
    for j in np.flatnonzero(counts == 0):
        # empty cluster: move it onto the worst-fit point of a cluster that can spare one
        d_own = ((X - out[labels]) ** 2).sum(axis=1)
        d_own[counts[labels] <= 1] = -1.0
        far = int(d_own.argmax())
        if d_own[far] < 0:
            continue
        counts[labels[far]] -= 1
        counts[j] += 1
        out[j] = X[far]
    return out


def nearest_to_centroids(points: np.ndarray, result: ClusterResult) -> list[int]:
    """Index of the point closest to each centroid within its cluster (ties to the lowest index)."""
    X = np.asarray(points, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    d2 = _sq_dists(X, result.centroids)
    picked: list[int] = []
    taken: set[int] = set()
    for j in range(len(result.centroids)):
        members = np.flatnonzero(result.labels == j)
        pool = [int(i) for i in members if int(i) not in taken]
        if not pool:
            pool = [i for i in range(len(X)) if i not in taken]
        best = min(pool, key=lambda i: (d2[i, j], i))
        picked.append(best)
        taken.add(best)
    return picked


def select_memory(model, relation: str, instances: Sequence[Instance], capacity: int, seed: int = 0) -> list[Instance]:
    """Cluster the relation's encodings into ``min(capacity, n)`` groups and keep each group's most central instance."""
    from .model import pack

    if not instances:
        raise EmptyDataError(f"no instances for relation {relation!r}")
    wrong = [x.relation for x in instances if x.relation != relation]
    if wrong:
        raise ValueError(f"instances labelled {wrong[0]!r} passed for relation {relation!r}")
    k = min(capacity, len(instances))
    H = model.encode_numpy(pack(instances))
    result = kmeans(H, k, seed=seed)
    return [instances[i] for i in nearest_to_centroids(H, result)]


@dataclass
class MemoryStore:
    capacity: int
    slots: dict[str, list[Instance]] = field(default_factory=dict)
    origin: dict[str, int] = field(default_factory=dict)

    @property
    def relations(self) -> list[str]:
        return list(self.slots)

    def __len__(self) -> int:
        return sum(len(v) for v in self.slots.values())

    def instances(self) -> list[Instance]:
        return [x for xs in self.slots.values() for x in xs]

    def counts(self) -> dict[str, int]:
        return {r: len(xs) for r, xs in self.slots.items()}

    def dump(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for r, xs in self.slots.items():
                for x in xs:
                    rec = {
                        "relation": r,
                        "task": self.origin.get(r),
                        "tokens": [t - NUM_SPECIAL for t in x.tokens],
                        "h": list(x.head),
                        "t": list(x.tail),
                    }
                    fh.write(json.dumps(rec) + "\n")


def merge_memory(prev: MemoryStore, new: Mapping[str, Sequence[Instance]], task: int = 0) -> MemoryStore:
    """Union of ``prev`` with exemplar lists for relations it has not seen."""
    clash = [r for r in new if r in prev.slots]
    if clash:
        raise DuplicateError(f"relations already in memory: {clash}")
    slots = {r: list(xs) for r, xs in prev.slots.items()}
    origin = dict(prev.origin)
    for r, xs in new.items():
        if len(xs) > prev.capacity:
            raise ValueError(f"{len(xs)} exemplars for {r!r} exceed capacity {prev.capacity}")
        if any(x.relation != r for x in xs):
            raise ValueError(f"exemplar list for {r!r} contains another relation")
        slots[r] = list(xs)
        origin[r] = task
    return MemoryStore(prev.capacity, slots, origin)
