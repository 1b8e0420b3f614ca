"""Entity-marker relation encoder and an extensible softmax classifier head."""

from __future__ import annotations

import functools
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .data import E11, E12, E21, E22, PAD, Instance, MARKER_IDS
from .errors import CompatibilityError, DuplicateError, LengthError, ShapeError, SpanError, VersionError

CHECKPOINT_MAGIC = b"CRELABCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    d: int = 32
    blocks: int = 1
    heads: int = 2
    ff: int | None = None
    max_len: int = 24
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.d % 2 or self.d % self.heads:
            raise ValueError(f"d={self.d} must be even and divisible by heads={self.heads}")
        if self.vocab_size <= max(MARKER_IDS):
            raise ValueError(f"vocab_size={self.vocab_size} leaves no room for marker tokens")

    @property
    def ff_width(self) -> int:
        return self.ff if self.ff is not None else 2 * self.d

    @property
    def hidden(self) -> int:
        return 2 * self.d


@dataclass(frozen=True)
class MarkedSequence:
    ids: tuple[int, ...]
    e11: int
    e21: int


def insert_entity_markers(x: Instance) -> MarkedSequence:
    """Wrap the head span in [E11]/[E12] and the tail span in [E21]/[E22]."""
    (hs, he), (ts, te) = x.head, x.tail
    n = len(x.tokens)
    if hs > he or ts > te or hs < 0 or ts < 0 or he >= n or te >= n or not (he < ts or te < hs):
        raise SpanError(f"invalid spans head={x.head} tail={x.tail} for {n} tokens")
    opens = {hs: E11, ts: E21}
    closes = {he: E12, te: E22}
    ids: list[int] = []
    e11 = e21 = -1
    for i, tok in enumerate(x.tokens):
        if i in opens:
            if opens[i] == E11:
                e11 = len(ids)
            else:
                e21 = len(ids)
            ids.append(opens[i])
        ids.append(tok)
        if i in closes:
            ids.append(closes[i])
    return MarkedSequence(tuple(ids), e11, e21)


@dataclass
class Batch:
    """Padded marker sequences ready for :func:`encode_batch`."""

    ids: np.ndarray  # (n, L) int
    mask: np.ndarray  # (n, L) bool, True for real tokens
    e11: np.ndarray
    e21: np.ndarray

    def __len__(self) -> int:
        return self.ids.shape[0]

    def take(self, rows: np.ndarray) -> "Batch":
        return Batch(self.ids[rows], self.mask[rows], self.e11[rows], self.e21[rows])


def pack(seqs: Sequence[MarkedSequence | Instance], max_len: int | None = None) -> Batch:
    seqs = [s if isinstance(s, MarkedSequence) else insert_entity_markers(s) for s in seqs]
    width = max((len(s.ids) for s in seqs), default=1)
    if max_len is not None and width > max_len:
        raise LengthError(f"sequence of length {width} exceeds max_len={max_len}")
    ids = np.full((len(seqs), width), PAD, dtype=np.intp)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s.ids)] = s.ids
        mask[i, : len(s.ids)] = True
    e11 = np.array([s.e11 for s in seqs], dtype=np.intp)
    e21 = np.array([s.e21 for s in seqs], dtype=np.intp)
    return Batch(ids, mask, e11, e21)


@functools.lru_cache(maxsize=32)
def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d // 2)[None, :]
    angle = pos / np.power(10000.0, 2 * i / d)
    out = np.zeros((n, d))
    out[:, 0::2] = np.sin(angle)
    out[:, 1::2] = np.cos(angle)
    out.setflags(write=False)
    return out


def init_encoder(cfg: EncoderConfig, rng: np.random.Generator, store: ParamStore | None = None) -> ParamStore:
    """Fresh encoder parameters (embedding, blocks, marker aggregation)."""
    store = store if store is not None else ParamStore()
    d, f, h = cfg.d, cfg.ff_width, cfg.hidden

    def dense(n_in, n_out):
        return rng.normal(0.0, 1.0 / math.sqrt(n_in), size=(n_in, n_out))

    store.add("emb", rng.normal(0.0, 1.0, size=(cfg.vocab_size, d)))
    for b in range(cfg.blocks):
        for name in ("wq", "wk", "wv", "wo"):
            store.add(f"b{b}.{name}", dense(d, d))
            store.add(f"b{b}.{name}_b", np.zeros(d))
        store.add(f"b{b}.ln1_g", np.ones(d))
        store.add(f"b{b}.ln1_b", np.zeros(d))
        store.add(f"b{b}.w1", dense(d, f))
        store.add(f"b{b}.w1_b", np.zeros(f))
        store.add(f"b{b}.w2", dense(f, d))
        store.add(f"b{b}.w2_b", np.zeros(d))
        store.add(f"b{b}.ln2_g", np.ones(d))
        store.add(f"b{b}.ln2_b", np.zeros(d))
    store.add("cat.w", dense(2 * d, h))
    store.add("cat.b", np.zeros(h))
    store.add("cat.ln_g", np.ones(h))
    store.add("cat.ln_b", np.zeros(h))
    return store



def encoder_names(store: ParamStore) -> list[str]:
    return [n for n in store if n != "head.w"]


def _attention(x: Tensor, p: ParamStore, b: int, cfg: EncoderConfig, key_bias: np.ndarray) -> Tensor:
    n, L, d = x.shape
    H = cfg.heads
    dh = d // H

    def proj(name):
        y = ad.linear(x, p[f"b{b}.{name}"], p[f"b{b}.{name}_b"])
        return ad.transpose(ad.reshape(y, (n, L, H, dh)), (0, 2, 1, 3))

    q, k, v = proj("wq"), proj("wk"), proj("wv")
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    scores = ad.add(scores, Tensor(key_bias))
    ctx = ad.matmul(ad.softmax(scores), v)
    ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (n, L, d))
    return ad.linear(ctx, p[f"b{b}.wo"], p[f"b{b}.wo_b"])


def encode_batch(batch: Batch, params: ParamStore, cfg: EncoderConfig) -> Tensor:
    """Representation ``h`` (n, 2d): LayerNorm of the projected [E11; E21] states."""
    n, L = batch.ids.shape
    if L > cfg.max_len:
        raise LengthError(f"sequence length {L} exceeds max_len={cfg.max_len}")
    x = ad.add(ad.embedding(params["emb"], batch.ids), Tensor(sinusoidal_positions(L, cfg.d)))
    key_bias = np.where(batch.mask, 0.0, -1e9)[:, None, None, :]
    for b in range(cfg.blocks):
        x = ad.layer_norm(ad.add(x, _attention(x, params, b, cfg, key_bias)), params[f"b{b}.ln1_g"], params[f"b{b}.ln1_b"], cfg.ln_eps)
        ff = ad.gelu(ad.linear(x, params[f"b{b}.w1"], params[f"b{b}.w1_b"]))
        ff = ad.linear(ff, params[f"b{b}.w2"], params[f"b{b}.w2_b"])
        x = ad.layer_norm(ad.add(x, ff), params[f"b{b}.ln2_g"], params[f"b{b}.ln2_b"], cfg.ln_eps)
    h11 = ad.take_positions(x, batch.e11)
    h21 = ad.take_positions(x, batch.e21)
    z = ad.linear(ad.concat([h11, h21], axis=-1), params["cat.w"], params["cat.b"])
    return ad.layer_norm(z, params["cat.ln_g"], params["cat.ln_b"], cfg.ln_eps)


def encode(seq: MarkedSequence, params: ParamStore, cfg: EncoderConfig) -> np.ndarray:
    """Single-sequence convenience wrapper around :func:`encode_batch`."""
    return encode_batch(pack([seq]), params, cfg).data[0]


# ---------------------------------------------------------------------------
# classifier head


@dataclass
class ClassifierHead:
    weight: Tensor  # (c, hidden)
    relations: list[str] = field(default_factory=list)
    tasks: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.index = {r: i for i, r in enumerate(self.relations)}
        if len(self.index) != len(self.relations):
            raise DuplicateError("duplicate relation ids in classifier head")

    @property
    def num_classes(self) -> int:
        return len(self.relations)

    @property
    def width(self) -> int:
        return self.weight.shape[1]

    @classmethod
    def empty(cls, width: int) -> "ClassifierHead":
        return cls(Tensor(np.zeros((0, width)), requires_grad=True))


def extend_head(head: ClassifierHead, new_relations: Sequence[str], task: int = 0) -> ClassifierHead:
    """Append one zero row per new relation; existing rows are copied unchanged."""
    new_relations = list(new_relations)
    if not new_relations:
        return head
    dup = [r for r in new_relations if r in head.index]
    if dup or len(set(new_relations)) != len(new_relations):
        raise DuplicateError(f"relations already in head or repeated: {dup or new_relations}")
    w = np.concatenate([head.weight.data, np.zeros((len(new_relations), head.width))], axis=0)
    return ClassifierHead(
        Tensor(w, requires_grad=True),
        head.relations + new_relations,
        head.tasks + [task] * len(new_relations),
    )


def head_logits(h: Tensor, head: ClassifierHead) -> Tensor:
    if h.shape[-1] != head.width:
        raise ShapeError(f"representation width {h.shape[-1]} != head width {head.width}")
    return ad.row_dots(h, head.weight)


def predict_proba(h: np.ndarray, head: ClassifierHead) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if h.shape[-1] != head.width:
        raise ShapeError(f"representation width {h.shape[-1]} != head width {head.width}")
    return ad._softmax_np(ad.row_dots_np(h, head.weight.data))


# ---------------------------------------------------------------------------
# full model


class RelationModel:
    """Encoder parameters plus the growing head, sharing one :class:`ParamStore`."""

    def __init__(self, cfg: EncoderConfig, seed: int = 0, params: ParamStore | None = None):
        self.cfg = cfg
        self.params = params if params is not None else init_encoder(cfg, np.random.default_rng(seed))
        if "head.w" in self.params:
            self.head = ClassifierHead(self.params["head.w"])
        else:
            self.head = ClassifierHead.empty(cfg.hidden)
            self.params.add("head.w", self.head.weight)

    def set_head(self, head: ClassifierHead) -> None:
        self.params.replace("head.w", head.weight)
        self.head = head

    def extend_head(self, new_relations: Sequence[str], task: int) -> None:
        self.set_head(extend_head(self.head, new_relations, task))

    def encode(self, batch: Batch) -> Tensor:
        return encode_batch(batch, self.params, self.cfg)

    def logits(self, batch: Batch) -> Tensor:
        return head_logits(self.encode(batch), self.head)

    def encode_numpy(self, batch: Batch, chunk: int = 256) -> np.ndarray:
        parts = [self.encode(batch.take(np.arange(i, min(i + chunk, len(batch))))).data for i in range(0, len(batch), chunk)]
        return np.concatenate(parts, axis=0) if parts else np.zeros((0, self.cfg.hidden))

    def predict_indices(self, batch: Batch) -> np.ndarray:
        scores = ad.row_dots_np(self.encode_numpy(batch), self.head.weight.data)
        return scores.argmax(axis=1)  # first maximum wins ties

    def predict(self, batch: Batch) -> list[str]:
        return [self.head.relations[i] for i in self.predict_indices(batch)]

    def encoder_snapshot(self) -> dict[str, np.ndarray]:
        return {k: self.params[k].data.copy() for k in encoder_names(self.params)}


def predict(seq: MarkedSequence, model: RelationModel) -> str:
    return model.predict(pack([seq]))[0]


# ---------------------------------------------------------------------------
# checkpoints: magic, u64 header length, JSON header, raw little-endian float64


def save_checkpoint(model: RelationModel, path: str | Path, meta: dict | None = None) -> None:
    tensors = []
    offset = 0
    blobs = []
    for name, t in model.params.items():
        arr = np.ascontiguousarray(t.data, dtype="<f8")
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.cfg),
        "relations": model.head.relations,
        "tasks": model.head.tasks,
        "tensors": tensors,
        "meta": meta or {},
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str | Path) -> tuple[RelationModel, dict]:
    with open(path, "rb") as fh:
        if fh.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise CompatibilityError(f"{path} is not a checkpoint file")
        (n,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(n).decode("utf-8"))
        body = fh.read()
    if header.get("version") != CHECKPOINT_VERSION:
        raise VersionError(f"checkpoint version {header.get('version')} != {CHECKPOINT_VERSION}")
    cfg = EncoderConfig(**header["config"])
    store = ParamStore()
    for spec in header["tensors"]:
        count = int(np.prod(spec["shape"])) if spec["shape"] else 1
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=spec["offset"]).reshape(spec["shape"])
        store.add(spec["name"], arr.astype(np.float64))
    model = RelationModel(cfg, params=store)
    model.head = ClassifierHead(store["head.w"], list(header["relations"]), list(header["tasks"]))
    if model.head.weight.shape[0] != len(model.head.relations):
        raise CompatibilityError("head rows do not match stored relation list")
    return model, header.get("meta", {})
