"""GCN and GraphSAGE graph classifiers over centrality node features.

Graphs are batched as one block-diagonal graph: neighbor means use a sparse
row-normalized adjacency and graph pooling a sparse averaging matrix, so an
epoch over the whole training set is a single forward/backward pass.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from . import tensor as T
from .errors import AsymmetricInput, EmptyGraph, ShapeMismatch, SingleClassData
from .rng import SplitMix64

log = logging.getLogger(__name__)

EMBED_DIM = 32
N_FEATURES = 5
DROPOUT = 0.5


@dataclass(eq=False)
class GraphData:
    """One app graph: global node ids, 0/1 adjacency, node feature rows."""

    app_id: str
    nodes: np.ndarray
    adj: np.ndarray
    x: np.ndarray

    @property
    def n(self) -> int:
        return len(self.nodes)

    @cached_property
    def mean_op(self) -> sp.csr_matrix:
        return mean_operator(self.adj)


def normalize_adjacency(A) -> np.ndarray:
    """D^-1/2 A D^-1/2 with isolated nodes mapped to zero rows/cols."""
    A = np.asarray(A, dtype=np.float64)
    if A.shape[0] != A.shape[1] or not np.array_equal(A, A.T):
        raise AsymmetricInput("adjacency must be square and symmetric")
    d = A.sum(axis=1)
    inv = np.where(d > 0, 1.0 / np.sqrt(np.where(d > 0, d, 1.0)), 0.0)
    return A * inv[:, None] * inv[None, :]


def mean_operator(A) -> sp.csr_matrix:
    """Sparse D^-1 A; rows of isolated nodes are zero."""
    A = sp.csr_matrix(A, dtype=np.float64)
    d = np.asarray(A.sum(axis=1)).ravel()
    inv = np.where(d > 0, 1.0 / np.where(d > 0, d, 1.0), 0.0)
    return sp.diags(inv) @ A


def neighbor_mean(A, H: T.Tensor) -> T.Tensor:
    """Mean of neighbor rows of ``H``.

    ``A`` may be a 0/1 array, a precomputed sparse mean operator, or a
    Tensor of soft edge weights; soft rows are divided by max(row sum, 1),
    which equals the plain mean on 0/1 input.
    """
    if isinstance(A, T.Tensor):
        deg = T.maximum(T.sum(A, axis=1, keepdims=True), 1.0)
        return T.div(T.matmul(A, H), deg)
    if not sp.issparse(A):
        A = mean_operator(A)
    return T.spmm(A, H)


def gcn_layer(H, A, W1, W2) -> T.Tensor:
    H = T.as_tensor(H)
    if H.shape[1] != W1.shape[0] or W1.shape != W2.shape:
        raise ShapeMismatch(f"gcn_layer: H {H.shape}, W1 {W1.shape}, W2 {W2.shape}")
    return T.relu(T.add(T.matmul(H, W1), T.matmul(neighbor_mean(A, H), W2)))


def sage_layer(H, A, W1, W2) -> T.Tensor:
    H = T.as_tensor(H)
    if H.shape[1] != W1.shape[0] or W1.shape != W2.shape:
        raise ShapeMismatch(f"sage_layer: H {H.shape}, W1 {W1.shape}, W2 {W2.shape}")
    return T.relu(T.concat([T.matmul(H, W1), T.matmul(neighbor_mean(A, H), W2)], axis=1))


def pool_graph(H) -> T.Tensor:
    H = T.as_tensor(H)
    if H.shape[0] == 0:
        raise EmptyGraph("cannot pool a graph with no nodes")
    return T.mean_rows(H)


@dataclass(eq=False)
class GnnModel:
    kind: str  # "gcn" | "sage"
    layers: list[tuple[T.Tensor, T.Tensor]]
    head_w: T.Tensor
    head_b: T.Tensor
    # per-feature affine scaling applied to raw centralities
    x_shift: np.ndarray = field(default_factory=lambda: np.zeros(N_FEATURES))
    x_scale: np.ndarray = field(default_factory=lambda: np.ones(N_FEATURES))
    history: list[float] = field(default_factory=list)

    def params(self) -> list[T.Tensor]:
        out = []
        for w1, w2 in self.layers:
            out += [w1, w2]
        return out + [self.head_w, self.head_b]

    def named(self) -> dict[str, T.Tensor]:
        d = {}
        for i, (w1, w2) in enumerate(self.layers):
            d[f"layer{i}.W1"] = w1
            d[f"layer{i}.W2"] = w2
        d["head.W"] = self.head_w
        d["head.b"] = self.head_b
        return d

    def copy(self) -> "GnnModel":
        c = lambda t: T.parameter(t.data.copy())  # noqa: E731
        return GnnModel(
            self.kind,
            [(c(a), c(b)) for a, b in self.layers],
            c(self.head_w),
            c(self.head_b),
            self.x_shift.copy(),
            self.x_scale.copy(),
            list(self.history),
        )

    def to_json(self) -> str:
        meta = {"x_shift": self.x_shift.tolist(), "x_scale": self.x_scale.tolist(), "history": self.history}
        return T.params_to_json(f"gnn:{self.kind}", self.named(), meta)

    @classmethod
    def from_json(cls, text: str) -> "GnnModel":
        kind, named, meta = T.params_from_json(text)
        n_layers = sum(1 for k in named if k.endswith(".W1"))
        layers = [(named[f"layer{i}.W1"], named[f"layer{i}.W2"]) for i in range(n_layers)]
        return cls(
            kind.split(":", 1)[1],
            layers,
            named["head.W"],
            named["head.b"],
            np.array(meta["x_shift"]),
            np.array(meta["x_scale"]),
            list(meta.get("history", [])),
        )


def init_gnn(kind: str, seed: int, n_layers: int = 3, in_dim: int = N_FEATURES, hidden: int = EMBED_DIM) -> GnnModel:
    if kind not in ("gcn", "sage"):
        raise ValueError(f"unknown GNN kind {kind!r}")
    rng = SplitMix64(seed).split("gnn-init", kind)
    layers = []
    d_in = in_dim
    d_out = hidden if kind == "gcn" else hidden // 2
    for i in range(n_layers):
        layers.append(
            (
                T.glorot(rng.split(i, "W1"), (d_in, d_out)),
                T.glorot(rng.split(i, "W2"), (d_in, d_out)),
            )
        )
        d_in = hidden
    head_w = T.glorot(rng.split("head"), (hidden, 2))
    head_b = T.parameter(np.zeros(2))
    return GnnModel(kind, layers, head_w, head_b)


def node_embeddings(model: GnnModel, X, A) -> T.Tensor:
    layer = gcn_layer if model.kind == "gcn" else sage_layer
    H = T.as_tensor((np.asarray(X) - model.x_shift) / model.x_scale)
    for w1, w2 in model.layers:
        H = layer(H, A, w1, w2)
    return H


def head(model: GnnModel, emb: T.Tensor, training: bool, rng: SplitMix64 | None) -> T.Tensor:
    h = T.dropout(emb, DROPOUT, rng, training)
    return T.add(T.matmul(h, model.head_w), model.head_b)


def gnn_forward(model: GnnModel, X, A, training: bool = False, rng: SplitMix64 | None = None):
    """Single graph: returns (embedding Tensor of length 32, class probabilities)."""
    emb = pool_graph(node_embeddings(model, X, A))
    logits = head(model, T.reshape(emb, (1, -1)), training, rng)
    return emb, T.softmax(logits).data[0]


# ---------------------------------------------------------------- batching


@dataclass(eq=False)
class Batch:
    x: np.ndarray
    mean_op: sp.csr_matrix
    pool: sp.csr_matrix

    @classmethod
    def of(cls, graphs) -> "Batch":
        graphs = list(graphs)
        sizes = [g.n for g in graphs]
        x = np.concatenate([g.x for g in graphs], axis=0) if graphs else np.zeros((0, N_FEATURES))
        mean_op = sp.block_diag([g.mean_op if g.n else sp.csr_matrix((0, 0)) for g in graphs], format="csr")
        rows, cols, vals = [], [], []
        off = 0
        for gi, n in enumerate(sizes):
            if n == 0:
                log.warning("graph %s has no nodes; its embedding is zero", graphs[gi].app_id)
            rows += [gi] * n
            cols += range(off, off + n)
            vals += [1.0 / n] * n
            off += n
        pool = sp.csr_matrix((vals, (rows, cols)), shape=(len(graphs), off))
        return cls(x, sp.csr_matrix(mean_op), pool)


def batch_logits(model: GnnModel, batch: Batch, training: bool, rng: SplitMix64 | None):
    H = node_embeddings(model, batch.x, batch.mean_op)
    emb = T.spmm(batch.pool, H)
    return emb, head(model, emb, training, rng)


def predict_proba(model: GnnModel, graphs) -> np.ndarray:
    """Malware probability per graph (inference mode)."""
    graphs = list(graphs)
    if not graphs:
        return np.zeros(0)
    _, logits = batch_logits(model, Batch.of(graphs), False, None)
    return T.softmax(logits).data[:, 1]


def embed_graphs(model: GnnModel, graphs) -> np.ndarray:
    graphs = list(graphs)
    if not graphs:
        return np.zeros((0, EMBED_DIM))
    emb, _ = batch_logits(model, Batch.of(graphs), False, None)
    return emb.data


def embed_corpus(model: GnnModel, graphs) -> dict[str, np.ndarray]:
    graphs = list(graphs)
    return dict(zip((g.app_id for g in graphs), embed_graphs(model, graphs)))


def fit_feature_scaling(graphs) -> tuple[np.ndarray, np.ndarray]:
    x = np.concatenate([g.x for g in graphs], axis=0)
    sd = x.std(axis=0)
    return x.mean(axis=0), np.where(sd > 0, sd, 1.0)


def train_gnn(
    graphs,
    labels,
    kind: str = "sage",
    epochs: int = 200,
    seed: int = 0,
    lr: float = 0.001,
    n_layers: int = 3,
    batch_size: int | None = 16,
    model: GnnModel | None = None,
    class_balance: bool = False,
) -> GnnModel:
    """Adam on mean cross-entropy over seeded mini-batches (``batch_size=None``
    trains full-batch). Returns a new model carrying its per-epoch mean loss.

    ``class_balance`` weights each row by n / (2 n_class) so both classes carry
    equal total weight; on balanced labels it changes nothing.
    """
    graphs = list(graphs)
    labels = np.asarray(labels, dtype=np.int64)
    if len(graphs) != len(labels):
        raise ShapeMismatch("one label per graph required")
    if len(set(labels.tolist())) < 2:
        raise SingleClassData("training needs both benign and malware graphs")
    if model is None:
        model = init_gnn(kind, seed, n_layers)
        model.x_shift, model.x_scale = fit_feature_scaling(graphs)
    else:
        model = model.copy()
        model.history = []
    n = len(graphs)
    weights = None
    counts = np.bincount(labels, minlength=2)
    if class_balance and counts[0] != counts[1]:
        weights = (n / (2.0 * counts))[labels]
    bs = n if batch_size is None else max(1, min(batch_size, n))
    full = Batch.of(graphs) if bs == n else None
    opt = T.Adam(model.params(), lr=lr)
    root = SplitMix64(seed).split("gnn-train", kind)
    for epoch in range(epochs):
        order = np.arange(n) if full is not None else root.split("shuffle", epoch).permutation(n)
        losses = []
        for step, start in enumerate(range(0, n, bs)):
            idx = order[start : start + bs]
            batch = full if full is not None else Batch.of(graphs[i] for i in idx)
            _, logits = batch_logits(model, batch, True, root.split("dropout", epoch, step))
            loss = T.cross_entropy(logits, labels[idx], None if weights is None else weights[idx])
            opt.step(T.grad(loss, model.params()))
            losses.append(loss.item() * len(idx))
        model.history.append(float(np.sum(losses) / n))
    return model
