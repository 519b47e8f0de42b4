"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the primitives the models in this package use are provided. Each op
computes its value eagerly and records a closure mapping the upstream
gradient to one gradient per parent.
"""

from __future__ import annotations

import json

import numpy as np
import scipy.sparse as sp

from .errors import BadLabel, BadRate, EmptyInput, IndexOutOfRange, NonFinite, NonScalarLoss, ShapeMismatch
from .rng import SplitMix64


class Tensor:
    __slots__ = ("data", "requires_grad", "parents", "backward_fn", "op", "grad")

    def __init__(self, data, requires_grad: bool = False, parents=(), backward_fn=None, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.grad = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _node(data, parents, backward_fn, op: str) -> Tensor:
    data = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise NonFinite(f"{op} produced a non-finite value")
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, needs, tuple(parents) if needs else (), backward_fn if needs else None, op)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _node(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def neg(a) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return _node(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data
    return _node(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
        "div",
    )


def relu(a) -> Tensor:
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def tanh(a) -> Tensor:
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def exp(a) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def clip(a, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    return _node(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


def maximum(a, b) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "maximum")
    take_a = a.data >= b.data
    return _node(
        np.where(take_a, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)),
        "maximum",
    )


# ---------------------------------------------------------------- linear algebra / shape


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")

    def back(g):
        ga = g @ b.data.T
        a2 = a.data.reshape(-1, a.shape[-1])
        gb = a2.T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _node(a.data @ b.data, (a, b), back, "matmul")


def spmm(s: sp.spmatrix, x) -> Tensor:
    """Constant sparse matrix times tensor."""
    x = as_tensor(x)
    if s.shape[1] != x.shape[0]:
        raise ShapeMismatch(f"spmm: {s.shape} @ {x.shape}")
    st = s.T.tocsr()
    return _node(np.asarray(s @ x.data), (x,), lambda g: (np.asarray(st @ g),), "spmm")


def transpose(a) -> Tensor:
    return _node(a.data.T, (a,), lambda g: (g.T,), "transpose")


def reshape(a, shape) -> Tensor:
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeMismatch(f"concat: {e}") from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _node(out, tensors, lambda g: tuple(np.split(g, sizes, axis=axis)), "concat")


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), back, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    if n == 0:
        raise EmptyInput("mean over an empty axis")
    return mul(sum(a, axis, keepdims), 1.0 / n)


def mean_rows(a) -> Tensor:
    return mean(a, axis=0)


def rows(a, index) -> Tensor:
    """Gather rows (or elements of a vector) by integer index."""
    index = np.asarray(index)
    shape = a.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return _node(a.data[index], (a,), back, "rows")


def pairwise_distance(z) -> Tensor:
    """Euclidean distances between rows; zero-distance pairs get zero gradient."""
    diff = z.data[:, None, :] - z.data[None, :, :]
    d = np.sqrt(np.sum(diff * diff, axis=-1))

    def back(g):
        safe = np.where(d > 0, d, 1.0)
        w = np.where(d > 0, g / safe, 0.0)
        w = w + w.T
        return (np.sum(w[:, :, None] * diff, axis=1),)

    return _node(d, (z,), back, "pairwise_distance")


# ---------------------------------------------------------------- softmax / losses


def softmax(a) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)
    return _node(out, (a,), lambda g: (out * (g - np.sum(g * out, axis=-1, keepdims=True)),), "softmax")


def log_softmax(a) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    sm = np.exp(out)
    return _node(out, (a,), lambda g: (g - sm * np.sum(g, axis=-1, keepdims=True),), "log_softmax")


def cross_entropy(logits, labels, weights=None) -> Tensor:
    """Mean of ``-log softmax(logits)[label]`` over rows (a 1-D input is one row).

    With ``weights`` the mean is weighted: sum(w * nll) / sum(w).
    """
    logits = as_tensor(logits)
    if logits.data.ndim == 1:
        logits = reshape(logits, (1, -1))
    labels = np.atleast_1d(np.asarray(labels))
    n, c = logits.shape
    if c < 2:
        raise ShapeMismatch("cross_entropy needs at least two classes")
    if labels.shape != (n,) or not np.issubdtype(labels.dtype, np.integer) or labels.min() < 0 or labels.max() >= c:
        raise BadLabel(f"labels {labels} invalid for {c} classes")
    lp = log_softmax(logits)
    picked = rows(reshape(lp, (-1,)), np.arange(n) * c + labels)
    if weights is None:
        return neg(mean(picked))
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (n,):
        raise ShapeMismatch(f"{w.shape} weights for {n} rows")
    return neg(sum(mul(picked, w / w.sum())))


def bce(p, target, eps: float = 1e-12) -> Tensor:
    """Mean binary cross-entropy of probabilities ``p`` against 0/1 ``target``."""
    target = np.asarray(target, dtype=np.float64)
    lp = log(clip(p, eps, 1.0))
    l1p = log(clip(1.0 - p, eps, 1.0))
    return neg(mean(add(mul(lp, target), mul(l1p, 1.0 - target))))


# ---------------------------------------------------------------- layers


def dropout(x, rate: float, rng: SplitMix64 | None, training: bool) -> Tensor:
    """Inverted dropout; the mask comes from ``rng``."""
    if not 0.0 <= rate < 1.0:
        raise BadRate(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = rng.uniform(x.data.size).reshape(x.shape) >= rate
    return mul(x, keep / (1.0 - rate))


def conv1d(x, kernels, bias=None) -> Tensor:
    """SAME-padded cross-correlation, stride and dilation 1.

    ``x`` is (seq_len, in_ch) or (batch, seq_len, in_ch); ``kernels`` is
    (out_ch, width, in_ch) with odd width.
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    single = x.data.ndim == 2
    xd = x.data[None] if single else x.data
    if xd.ndim != 3 or kernels.data.ndim != 3:
        raise ShapeMismatch(f"conv1d: x {x.shape}, kernels {kernels.shape}")
    B, L, C = xd.shape
    O, W, Ck = kernels.shape
    if Ck != C or W % 2 == 0:
        raise ShapeMismatch(f"conv1d: kernel {kernels.shape} incompatible with {C} input channels (width must be odd)")
    pad = W // 2
    xp = np.zeros((B, L + 2 * pad, C))
    xp[:, pad : pad + L] = xd
    cols = np.stack([xp[:, k : k + L] for k in range(W)], axis=2).reshape(B * L, W * C)
    kflat = kernels.data.reshape(O, W * C)
    out = cols @ kflat.T
    parents = [x, kernels]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents.append(bias)
    out = out.reshape(B, L, O)

    def back(g):
        g2 = g.reshape(B * L, O)
        gk = (g2.T @ cols).reshape(O, W, C)
        gcols = (g2 @ kflat).reshape(B, L, W, C)
        gxp = np.zeros_like(xp)
        for k in range(W):
            gxp[:, k : k + L] += gcols[:, :, k]
        gx = gxp[:, pad : pad + L]
        grads = [gx[0] if single else gx, gk]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return _node(out[0] if single else out, parents, back, "conv1d")


def max_pool1d(x, size: int = 2) -> Tensor:
    """Window ``size``, stride ``size`` along the sequence axis (floor length)."""
    single = x.data.ndim == 1
    xd = x.data.reshape(1, -1, 1) if single else (x.data[None] if x.data.ndim == 2 else x.data)
    B, L, C = xd.shape
    L2 = L // size
    if L2 == 0:
        raise EmptyInput(f"max_pool1d: length {L} shorter than window {size}")
    win = xd[:, : L2 * size].reshape(B, L2, size, C)
    arg = win.argmax(axis=2)
    out = np.take_along_axis(win, arg[:, :, None, :], axis=2)[:, :, 0, :]

    def back(g):
        gw = np.zeros_like(win)
        np.put_along_axis(gw, arg[:, :, None, :], g.reshape(B, L2, 1, C), axis=2)
        gx = np.zeros_like(xd)
        gx[:, : L2 * size] = gw.reshape(B, L2 * size, C)
        return (gx.reshape(x.shape),)

    shape = (L2,) if single else ((L2, C) if x.data.ndim == 2 else (B, L2, C))
    return _node(out.reshape(shape), (x,), back, "max_pool1d")


def global_max_pool(x) -> Tensor:
    """Max over the sequence/node axis: (L, C) -> (C,), (B, L, C) -> (B, C)."""
    if x.data.size == 0 or x.shape[-2] == 0:
        raise EmptyInput("global_max_pool on empty input")
    axis = x.data.ndim - 2
    arg = np.expand_dims(x.data.argmax(axis=axis), axis)
    out = np.take_along_axis(x.data, arg, axis=axis)

    def back(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, arg, np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _node(np.squeeze(out, axis), (x,), back, "global_max_pool")


def global_mean_pool_rows(x) -> Tensor:
    if x.shape[0] == 0:
        raise EmptyInput("global_mean_pool_rows on empty input")
    return mean_rows(x)


def embedding_lookup(table, indices) -> Tensor:
    """Row gather where index 0 is a frozen all-zero padding row."""
    indices = np.asarray(indices, dtype=np.int64)
    V = table.shape[0]
    if indices.size and (indices.min() < 0 or indices.max() >= V):
        raise IndexOutOfRange(f"embedding index outside [0, {V})")
    out = table.data[indices]
    out[indices == 0] = 0.0

    def back(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, indices, g)
        gt[0] = 0.0
        return (gt,)

    return _node(out, (table,), back, "embedding_lookup")


# ---------------------------------------------------------------- backward


def _topo(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor on the tape."""
    if loss.data.size != 1:
        raise NonScalarLoss(f"loss has shape {loss.shape}")
    order = _topo(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node.parents, node.backward_fn(g)):
            if p.requires_grad:
                grads[id(p)] = grads[id(p)] + pg if id(p) in grads else pg


def grad(loss: Tensor, params) -> list[np.ndarray]:
    """Gradients of a scalar loss for each of ``params`` (zeros if untouched)."""
    params = list(params)
    saved = [p.grad for p in params]
    for p in params:
        p.grad = None
    backward(loss)
    out = [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]
    for p, s in zip(params, saved):
        p.grad = s
    return out


# ---------------------------------------------------------------- optimizer / init


class Adam:
    def __init__(self, params, lr: float = 0.001, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads) -> None:
        grads = list(grads)
        if len(grads) != len(self.params):
            raise ShapeMismatch("one gradient per parameter required")
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if g.shape != p.shape:
                raise ShapeMismatch(f"gradient {g.shape} for parameter {p.shape}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def glorot(rng: SplitMix64, shape, fan_in: int | None = None, fan_out: int | None = None) -> Tensor:
    if fan_in is None:
        fan_in, fan_out = shape[0], shape[-1]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return parameter((rng.uniform(int(np.prod(shape))) * 2.0 - 1.0).reshape(shape) * limit)


# ---------------------------------------------------------------- persistence

FORMAT_VERSION = 1


def params_to_json(kind: str, named: dict[str, Tensor], meta: dict | None = None) -> str:
    doc = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "meta": meta or {},
        "layers": [{"name": k, "shape": list(t.shape)} for k, t in named.items()],
        "weights": [t.data.tolist() for t in named.values()],
    }
    return json.dumps(doc)


def params_from_json(text: str) -> tuple[str, dict[str, Tensor], dict]:
    doc = json.loads(text)
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported weight format {doc.get('format_version')}")
    named = {}
    for layer, w in zip(doc["layers"], doc["weights"]):
        arr = np.array(w, dtype=np.float64).reshape(layer["shape"])
        named[layer["name"]] = parameter(arr)
    return doc["kind"], named, doc["meta"]
