"""Dense float64 tensors with reverse-mode differentiation and Adam.

Every forward op returns a new :class:`Tensor` holding a numpy array and a
closure that pushes the output gradient back to its inputs.  Calling
:meth:`Tensor.backward` on a scalar orders the recorded graph topologically,
runs each closure once, and then releases the graph so it cannot be replayed.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import LabelError, NumericError, ShapeError

DTYPE = np.float64


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_released")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _op: str = ""):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = _op
        self._released = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op or 'leaf'})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every leaf reachable from ``self``."""
        if self._released:
            raise RuntimeError("backward() called twice on the same graph; run a new forward pass first")
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a seed gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        tape = _topological_order(self)
        self.grad = np.asarray(grad, dtype=DTYPE).reshape(self.shape).copy()
        for node in reversed(tape):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        for node in tape:
            if not node.is_leaf:
                node.grad = None
                node._backward = None
                node._parents = ()
                node._released = True
        self._released = True


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen and parent.requires_grad:
                stack.append((parent, False))
    return order


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    # never update stored gradients in place: ``g`` may be shared with another input
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data, _parents=(a, b), _op="add")

    def _backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    out._backward = _backward
    return out


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data, _parents=(a,), _op="neg")
    out._backward = lambda g: _accumulate(a, -g)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data, _parents=(a, b), _op="mul")

    def _backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    out._backward = _backward
    return out


def scale(a: Tensor, s: float) -> Tensor:
    out = Tensor(a.data * s, _parents=(a,), _op="scale")
    out._backward = lambda g: _accumulate(a, g * s)
    return out


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum(), _parents=(a,), _op="sum")
    out._backward = lambda g: _accumulate(a, np.broadcast_to(g, a.shape))
    return out


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.data.size)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * (x + 0.044715 * x2 * x))
    out = Tensor(0.5 * x * (1.0 + t), _parents=(a,), _op="gelu")

    def _backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        _accumulate(a, g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner))

    out._backward = _backward
    return out


# ---------------------------------------------------------------------------
# shape ops


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    out = Tensor(a.data.reshape(shape), _parents=(a,), _op="reshape")
    out._backward = lambda g: _accumulate(a, g.reshape(a.shape))
    return out


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = Tensor(a.data.transpose(axes), _parents=(a,), _op="transpose")
    out._backward = lambda g: _accumulate(a, g.transpose(inverse))
    return out


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis), _parents=tuple(parts), _op="concat")
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def _backward(g):
        for p, piece in zip(parts, np.split(g, bounds, axis=axis)):
            _accumulate(p, piece)

    out._backward = _backward
    return out


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; the gradient scatters back in index order."""
    ids = np.asarray(ids, dtype=np.intp)
    out = Tensor(table.data[ids], _parents=(table,), _op="embedding")

    def _backward(g):
        if not table.requires_grad:
            return
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        _accumulate(table, full)

    out._backward = _backward
    return out


def take_positions(x: Tensor, positions: np.ndarray) -> Tensor:
    """Pick one sequence position per batch row: ``x[i, positions[i], :]``."""
    positions = np.asarray(positions, dtype=np.intp)
    rows = np.arange(x.shape[0])
    out = Tensor(x.data[rows, positions], _parents=(x,), _op="take_positions")

    def _backward(g):
        full = np.zeros_like(x.data)
        full[rows, positions] = g
        _accumulate(x, full)

    out._backward = _backward
    return out


# ---------------------------------------------------------------------------
# linear algebra and normalisation


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w + b`` for a 2-D weight shared across all leading axes of ``x``."""
    if w.data.ndim != 2 or x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"linear dimension mismatch: {x.shape} @ {w.shape} + {b.shape}")
    out = Tensor(np.matmul(x.data, w.data) + b.data, _parents=(x, w, b), _op="linear")

    def _backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        if x.requires_grad:
            _accumulate(x, np.matmul(g, w.data.T))
        if w.requires_grad:
            _accumulate(w, x.data.reshape(-1, w.shape[0]).T @ g2)
        if b.requires_grad:
            _accumulate(b, g2.sum(axis=0))

    out._backward = _backward
    return out


def row_dots_np(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """``x @ w.T`` where every output is reduced on its own.

    A BLAS product may change its summation order with the number of rows of
    ``w``, so appending rows could perturb existing outputs in the last bit.
    Reducing each (input, row) pair separately keeps them bitwise stable.
    """
    return (x[..., None, :] * w).sum(axis=-1)


def row_dots(x: Tensor, w: Tensor) -> Tensor:
    """Differentiable :func:`row_dots_np`: logits of a bias-free linear head with rows ``w``."""
    if w.data.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"row_dots dimension mismatch: {x.shape} against rows {w.shape}")
    out = Tensor(row_dots_np(x.data, w.data), _parents=(x, w), _op="row_dots")

    def _backward(g):
        if x.requires_grad:
            _accumulate(x, np.matmul(g, w.data))
        if w.requires_grad:
            _accumulate(w, g.reshape(-1, g.shape[-1]).T @ x.data.reshape(-1, w.shape[1]))

    out._backward = _backward
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` with numpy batching semantics on the leading axes."""
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    out = Tensor(np.matmul(a.data, b.data), _parents=(a, b), _op="matmul")

    def _backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            if b.data.ndim == 2:
                # weight shared across the batch: fold leading axes into one product
                k = a.shape[-1]
                _accumulate(b, a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1]))
            else:
                _accumulate(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    out._backward = _backward
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis with population variance, then scale and shift."""
    d = x.shape[-1]
    if d < 2:
        raise ValueError(f"layer_norm needs at least 2 features, got {d}")
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm gain/bias shapes {gain.shape}/{bias.shape} do not match width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * rstd
    out = Tensor(xhat * gain.data + bias.data, _parents=(x, gain, bias), _op="layer_norm")

    def _backward(g):
        lead = tuple(range(g.ndim - 1))
        _accumulate(gain, (g * xhat).sum(axis=lead))
        _accumulate(bias, g.sum(axis=lead))
        if x.requires_grad:
            gx = g * gain.data
            dx = rstd * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
            _accumulate(x, dx)

    out._backward = _backward
    return out


def _softmax_np(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(a: Tensor) -> Tensor:
    y = _softmax_np(a.data)
    out = Tensor(y, _parents=(a,), _op="softmax")

    def _backward(g):
        _accumulate(a, y * (g - (g * y).sum(axis=-1, keepdims=True)))

    out._backward = _backward
    return out


def softmax_cross_entropy(logits: Tensor, labels: Sequence[int] | np.ndarray) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    if logits.data.ndim != 2:
        raise ShapeError(f"logits must be 2-D (n, c), got {logits.shape}")
    n, c = logits.shape
    labels = np.asarray(labels, dtype=np.intp)
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    bad = np.flatnonzero((labels < 0) | (labels >= c))
    if bad.size:
        i = int(bad[0])
        raise LabelError(f"label {int(labels[i])} at index {i} outside [0, {c})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    nll = lse - shifted[rows, labels]
    out = Tensor(nll.mean(), _parents=(logits,), _op="cross_entropy")

    def _backward(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, labels] -= 1.0
        _accumulate(logits, p * (g / n))

    out._backward = _backward
    return out


# ---------------------------------------------------------------------------
# parameters and optimisation


class ParamStore:
    """Named trainable tensors plus Adam moment buffers."""

    def __init__(self):
        self.params: OrderedDict[str, Tensor] = OrderedDict()
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value: np.ndarray | Tensor) -> Tensor:
        if isinstance(value, Tensor):
            t = value
            t.requires_grad = True
        else:
            t = Tensor(np.array(value, dtype=DTYPE, copy=True), requires_grad=True)
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def replace(self, name: str, value: np.ndarray | Tensor) -> Tensor:
        """Swap in a resized parameter; moments restart at zero for it."""
        return self.add(name, value)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def items(self):
        return self.params.items()

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def reset_optimizer(self) -> None:
        for name, t in self.params.items():
            self.m[name] = np.zeros_like(t.data)
            self.v[name] = np.zeros_like(t.data)
        self.step = 0

    def grad_norm(self, names: Iterable[str] | None = None) -> float:
        total = 0.0
        for name in names if names is not None else self.params:
            g = self.params[name].grad
            if g is not None:
                total += float(np.dot(g.reshape(-1), g.reshape(-1)))
        return math.sqrt(total)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}


def adam_step(
    params: ParamStore,
    lr: float | Mapping[str, float],
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update, then clear gradients.

    ``lr`` is a single rate or a per-parameter mapping.  Parameters without a
    gradient are skipped.
    """
    if len(params) == 0:
        return
    params.step += 1
    bc1 = 1.0 - beta1**params.step
    bc2 = 1.0 - beta2**params.step
    for name, p in params.params.items():
        g = p.grad
        if g is None:
            continue
        rate = lr if not isinstance(lr, Mapping) else lr[name]
        m = params.m[name]
        v = params.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        if rate != 0.0:
            p.data -= rate * (m / bc1) / (np.sqrt(v / bc2) + eps)
    params.zero_grad()


def grad_check(closure: Callable[[], Tensor], params: ParamStore, h: float = 1e-5, floor: float = 1e-6) -> float:
    """Worst per-coordinate relative error between analytic and central-difference gradients.

    ``closure`` must run a fresh forward pass and return a scalar loss.  The
    relative error is ``|a - n| / max(|a| + |n|, floor)``; ``floor`` keeps
    coordinates whose true gradient is ~0 from amplifying rounding noise.
    """
    if not h > 0:
        raise ValueError(f"finite-difference step must be positive, got {h}")
    params.zero_grad()
    loss = closure()
    if not np.isfinite(loss.data).all():
        raise NumericError("loss is not finite")
    loss.backward()
    analytic = {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for k, t in params.items()}
    params.zero_grad()
    worst = 0.0
    for name, t in params.items():
        flat = t.data.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = closure().item()
            flat[i] = orig - h
            lm = closure().item()
            flat[i] = orig
            if not (math.isfinite(lp) and math.isfinite(lm)):
                raise NumericError(f"non-finite loss while perturbing {name}[{i}]")
            num = (lp - lm) / (2 * h)
            err = abs(a_flat[i] - num) / max(abs(a_flat[i]) + abs(num), floor)
            worst = max(worst, err)
    return worst
