"""Downstream detectors over Permission/Intent bits and graph embeddings:
stacked naive Bayes, CART, random forest and a hybrid CNN, plus metrics.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import LengthMismatch, MissingEmbedding, ShapeMismatch, SingleClassData
from .rng import SplitMix64

log = logging.getLogger(__name__)

N_BINS = 10
ALPHA = 1.0
SEQ_LEN = 64
CNN_EMBED = 64
CNN_FILTERS = 128
CNN_WIDTH = 5
CNN_BLOCKS = 6
CNN_DROPOUT = 0.5


@dataclass(eq=False)
class FeatureRow:
    app_id: str
    pi: np.ndarray
    emb: np.ndarray | None
    label: int


def _stack(rows, with_emb: bool):
    rows = list(rows)
    if not rows:
        raise ShapeMismatch("no rows")
    pi = np.stack([np.asarray(r.pi, dtype=np.float64) for r in rows])
    y = np.array([r.label for r in rows], dtype=np.int64)
    emb = None
    if with_emb:
        missing = [r.app_id for r in rows if r.emb is None]
        if missing:
            raise MissingEmbedding(f"{len(missing)} rows lack a graph embedding, first {missing[0]}")
        emb = np.stack([np.asarray(r.emb, dtype=np.float64) for r in rows])
    return pi, emb, y


def _check_classes(y) -> None:
    if len(set(np.asarray(y).tolist())) < 2:
        raise SingleClassData("training needs both benign and malware rows")


def _has_emb(rows) -> bool:
    return all(r.emb is not None for r in rows)


# ---------------------------------------------------------------- metrics


@dataclass
class Metrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    tn: int
    fn: int
    undefined: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "tp": self.tp,
            "fp": self.fp,
            "tn": self.tn,
            "fn": self.fn,
            "undefined": list(self.undefined),
        }


def compute_metrics(preds, labels) -> Metrics:
    """Malware (1) is the positive class. A metric whose denominator is zero
    is reported as 0.0 and named in ``undefined``."""
    p = np.asarray(preds, dtype=np.int64)
    y = np.asarray(labels, dtype=np.int64)
    if p.shape != y.shape:
        raise LengthMismatch(f"{p.size} predictions for {y.size} labels")
    tp = int(((p == 1) & (y == 1)).sum())
    fp = int(((p == 1) & (y == 0)).sum())
    tn = int(((p == 0) & (y == 0)).sum())
    fn = int(((p == 0) & (y == 1)).sum())
    undefined = []

    def ratio(num, den, name):
        if den == 0:
            undefined.append(name)
            return 0.0
        return num / den

    acc = ratio(tp + tn, len(y), "accuracy")
    prec = ratio(tp, tp + fp, "precision")
    rec = ratio(tp, tp + fn, "recall")
    if "precision" in undefined or "recall" in undefined or prec + rec == 0:
        f1 = 0.0
        undefined.append("f1")
    else:
        f1 = 2 * prec * rec / (prec + rec)
    return Metrics(acc, prec, rec, f1, tp, fp, tn, fn, undefined)


# ---------------------------------------------------------------- naive Bayes


@dataclass
class EqualWidthBins:
    lo: np.ndarray
    hi: np.ndarray
    n_bins: int = N_BINS

    @classmethod
    def fit(cls, X, n_bins: int = N_BINS) -> "EqualWidthBins":
        X = np.asarray(X, dtype=np.float64)
        return cls(X.min(axis=0), X.max(axis=0), n_bins)

    def transform(self, X) -> np.ndarray:
        """Bin index per cell; values outside the fitted range land in the edge bins."""
        X = np.asarray(X, dtype=np.float64)
        width = np.where(self.hi > self.lo, self.hi - self.lo, 1.0)
        b = np.floor((X - self.lo) / width * self.n_bins).astype(np.int64)
        return np.clip(b, 0, self.n_bins - 1)

    def one_hot(self, X) -> np.ndarray:
        b = self.transform(X)
        n, d = b.shape
        out = np.zeros((n, d * self.n_bins))
        out[np.arange(n)[:, None], np.arange(d)[None, :] * self.n_bins + b] = 1.0
        return out


@dataclass
class BernoulliNb:
    log_prior: np.ndarray  # (2,)
    log_p: np.ndarray  # (2, d)
    log_q: np.ndarray  # (2, d), log(1 - p)

    @classmethod
    def fit(cls, X, y, alpha: float = ALPHA) -> "BernoulliNb":
        X = (np.asarray(X) > 0).astype(np.float64)
        prior, p = [], []
        for c in (0, 1):
            Xc = X[y == c]
            prior.append(len(Xc) / len(X))
            p.append((Xc.sum(axis=0) + alpha) / (len(Xc) + 2 * alpha))
        p = np.array(p)
        return cls(np.log(prior), np.log(p), np.log1p(-p))

    def joint(self, X) -> np.ndarray:
        X = (np.asarray(X) > 0).astype(np.float64)
        return self.log_prior + X @ self.log_p.T + (1.0 - X) @ self.log_q.T


@dataclass
class MultinomialNb:
    log_prior: np.ndarray
    log_theta: np.ndarray  # (2, d)

    @classmethod
    def fit(cls, X, y, alpha: float = ALPHA) -> "MultinomialNb":
        X = np.asarray(X, dtype=np.float64)
        prior, theta = [], []
        for c in (0, 1):
            Xc = X[y == c]
            prior.append(len(Xc) / len(X))
            counts = Xc.sum(axis=0) + alpha
            theta.append(counts / counts.sum())
        return cls(np.log(prior), np.log(np.array(theta)))

    def joint(self, X) -> np.ndarray:
        return self.log_prior + np.asarray(X, dtype=np.float64) @ self.log_theta.T


def _posterior(joint: np.ndarray) -> np.ndarray:
    z = joint - joint.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class StackedNbModel:
    """Bernoulli NB on PI bits; with embeddings, a multinomial NB on binned
    embeddings and a final multinomial NB on the binned stage posteriors."""

    pi_stage: BernoulliNb
    emb_bins: EqualWidthBins | None = None
    emb_stage: MultinomialNb | None = None
    final_bins: EqualWidthBins | None = None
    final_stage: MultinomialNb | None = None

    @property
    def uses_emb(self) -> bool:
        return self.emb_stage is not None

    def _stage_probs(self, pi, emb) -> np.ndarray:
        p1 = _posterior(self.pi_stage.joint(pi))
        p2 = _posterior(self.emb_stage.joint(self.emb_bins.one_hot(emb)))
        return np.concatenate([p1, p2], axis=1)

    def predict_proba(self, rows) -> np.ndarray:
        rows = list(rows)
        pi, emb, _ = _stack(rows, self.uses_emb)
        if not self.uses_emb:
            return _posterior(self.pi_stage.joint(pi))
        stage = self._stage_probs(pi, emb)
        return _posterior(self.final_stage.joint(self.final_bins.one_hot(stage)))

    def to_dict(self) -> dict:
        def arr(x):
            return None if x is None else np.asarray(x).tolist()

        d = {"pi_stage": {k: arr(getattr(self.pi_stage, k)) for k in ("log_prior", "log_p", "log_q")}}
        if self.uses_emb:
            d["emb_bins"] = {"lo": arr(self.emb_bins.lo), "hi": arr(self.emb_bins.hi), "n_bins": self.emb_bins.n_bins}
            d["emb_stage"] = {"log_prior": arr(self.emb_stage.log_prior), "log_theta": arr(self.emb_stage.log_theta)}
            d["final_bins"] = {"lo": arr(self.final_bins.lo), "hi": arr(self.final_bins.hi), "n_bins": self.final_bins.n_bins}
            d["final_stage"] = {"log_prior": arr(self.final_stage.log_prior), "log_theta": arr(self.final_stage.log_theta)}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StackedNbModel":
        a = np.array
        m = cls(BernoulliNb(*(a(d["pi_stage"][k]) for k in ("log_prior", "log_p", "log_q"))))
        if "emb_stage" in d:
            m.emb_bins = EqualWidthBins(a(d["emb_bins"]["lo"]), a(d["emb_bins"]["hi"]), d["emb_bins"]["n_bins"])
            m.emb_stage = MultinomialNb(a(d["emb_stage"]["log_prior"]), a(d["emb_stage"]["log_theta"]))
            m.final_bins = EqualWidthBins(a(d["final_bins"]["lo"]), a(d["final_bins"]["hi"]), d["final_bins"]["n_bins"])
            m.final_stage = MultinomialNb(a(d["final_stage"]["log_prior"]), a(d["final_stage"]["log_theta"]))
        return m


def train_stacked_nb(rows, use_emb: bool | None = None) -> StackedNbModel:
    """``use_emb`` defaults to whether every row carries an embedding."""
    rows = list(rows)
    use_emb = _has_emb(rows) if use_emb is None else use_emb
    pi, emb, y = _stack(rows, use_emb)
    _check_classes(y)
    model = StackedNbModel(BernoulliNb.fit(pi, y))
    if not use_emb:
        return model
    model.emb_bins = EqualWidthBins.fit(emb)
    model.emb_stage = MultinomialNb.fit(model.emb_bins.one_hot(emb), y)
    stage = model._stage_probs(pi, emb)
    # probabilities live in [0, 1]; fixed bins keep the final stage independent of the fit range
    model.final_bins = EqualWidthBins(np.zeros(stage.shape[1]), np.ones(stage.shape[1]))
    model.final_stage = MultinomialNb.fit(model.final_bins.one_hot(stage), y)
    return model


def predict_stacked_nb(model: StackedNbModel, row) -> np.ndarray:
    """Class probabilities (benign, malware) for one row."""
    return model.predict_proba([row])[0]


# ---------------------------------------------------------------- trees


def _design(rows, use_emb: bool) -> tuple[np.ndarray, np.ndarray]:
    pi, emb, y = _stack(rows, use_emb)
    return (np.concatenate([pi, emb], axis=1) if use_emb else pi), y


def _gini_split(x: np.ndarray, y: np.ndarray):
    """Best (weighted gini, threshold) for one feature, or None when constant."""
    order = np.argsort(x, kind="stable")
    xs, ys = x[order], y[order]
    n = len(xs)
    change = np.nonzero(xs[1:] != xs[:-1])[0] + 1  # left sizes with a valid cut
    if len(change) == 0:
        return None
    pos = np.cumsum(ys)[change - 1].astype(np.float64)
    nl = change.astype(np.float64)
    nr = n - nl
    pr = (ys.sum() - pos) / nr
    pl = pos / nl
    g = (nl * 2 * pl * (1 - pl) + nr * 2 * pr * (1 - pr)) / n
    k = int(np.argmin(g))
    cut = change[k]
    return float(g[k]), float((xs[cut - 1] + xs[cut]) / 2.0)


@dataclass
class TreeModel:
    """Flat CART: leaf rows have feature -1 and carry the malware fraction."""

    feature: list[int] = field(default_factory=list)
    threshold: list[float] = field(default_factory=list)
    left: list[int] = field(default_factory=list)
    right: list[int] = field(default_factory=list)
    value: list[float] = field(default_factory=list)
    use_emb: bool = False

    def _add(self) -> int:
        for lst, v in ((self.feature, -1), (self.threshold, 0.0), (self.left, -1), (self.right, -1), (self.value, 0.0)):
            lst.append(v)
        return len(self.feature) - 1

    def proba_matrix(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        node = np.zeros(len(X), dtype=np.int64)
        feat = np.array(self.feature)
        thr = np.array(self.threshold)
        left, right = np.array(self.left), np.array(self.right)
        active = feat[node] >= 0
        while active.any():
            i = np.nonzero(active)[0]
            f = feat[node[i]]
            go_left = X[i, f] <= thr[node[i]]
            node[i] = np.where(go_left, left[node[i]], right[node[i]])
            active = feat[node] >= 0
        return np.array(self.value)[node]

    def predict_proba(self, rows) -> np.ndarray:
        X, _ = _design(rows, self.use_emb)
        p = self.proba_matrix(X)
        return np.stack([1 - p, p], axis=1)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("feature", "threshold", "left", "right", "value", "use_emb")}

    @classmethod
    def from_dict(cls, d: dict) -> "TreeModel":
        return cls(**d)


def _grow(X, y, max_depth: int | None, max_features: int | None, rng: SplitMix64 | None, use_emb: bool) -> TreeModel:
    tree = TreeModel(use_emb=use_emb)
    root = tree._add()
    stack = [(root, np.arange(len(y)), 0)]
    d = X.shape[1]
    while stack:
        node, idx, depth = stack.pop()
        yi = y[idx]
        tree.value[node] = float(yi.mean())
        if yi.min() == yi.max() or (max_depth is not None and depth >= max_depth):
            continue
        if max_features is None:
            order = np.arange(d)
        else:
            order = rng.split("split", node).permutation(d)
        best = None
        tried = 0
        for f in order:
            s = _gini_split(X[idx, f], yi)
            if s is None:
                continue
            tried += 1
            if best is None or s[0] < best[0]:
                best = (s[0], s[1], int(f))
            if max_features is not None and tried >= max_features:
                break
        if best is None:
            continue
        _, thr, f = best
        mask = X[idx, f] <= thr
        tree.feature[node], tree.threshold[node] = f, thr
        lo, hi = tree._add(), tree._add()
        tree.left[node], tree.right[node] = lo, hi
        stack.append((hi, idx[~mask], depth + 1))
        stack.append((lo, idx[mask], depth + 1))
    return tree


def train_tree(rows, max_depth: int | None = None, use_emb: bool | None = None) -> TreeModel:
    rows = list(rows)
    use_emb = _has_emb(rows) if use_emb is None else use_emb
    X, y = _design(rows, use_emb)
    _check_classes(y)
    return _grow(X, y, max_depth, None, None, use_emb)


@dataclass
class ForestModel:
    trees: list[TreeModel]
    use_emb: bool = False

    def predict_proba(self, rows) -> np.ndarray:
        """Second column is the malware vote share."""
        X, _ = _design(rows, self.use_emb)
        votes = np.mean([(t.proba_matrix(X) > 0.5) for t in self.trees], axis=0)
        return np.stack([1 - votes, votes], axis=1)

    def to_dict(self) -> dict:
        return {"use_emb": self.use_emb, "trees": [t.to_dict() for t in self.trees]}

    @classmethod
    def from_dict(cls, d: dict) -> "ForestModel":
        return cls([TreeModel.from_dict(t) for t in d["trees"]], d["use_emb"])


def train_forest(rows, n: int = 50, seed: int = 0, max_depth: int | None = None, use_emb: bool | None = None) -> ForestModel:
    rows = list(rows)
    use_emb = _has_emb(rows) if use_emb is None else use_emb
    X, y = _design(rows, use_emb)
    _check_classes(y)
    m = max(1, int(math.sqrt(X.shape[1])))
    root = SplitMix64(seed).split("forest")
    trees = []
    for t in range(n):
        r = root.split("tree", t)
        boot = r.split("bootstrap").integers(0, len(y), len(y))
        trees.append(_grow(X[boot], y[boot], max_depth, m, r, use_emb))
    return ForestModel(trees, use_emb)


def predict(model, row) -> int:
    """Label for one row; vote shares of exactly one half resolve to benign."""
    return int(model.predict_proba([row])[0, 1] > 0.5)


# ---------------------------------------------------------------- hybrid CNN


def pi_sequence(bits, length: int = SEQ_LEN) -> np.ndarray:
    """Vocabulary indices (1-based) of the set bits, ascending, padded with 0."""
    idx = np.nonzero(np.asarray(bits))[0][:length] + 1
    out = np.zeros(length, dtype=np.int64)
    out[: len(idx)] = idx
    return out


@dataclass(eq=False)
class HybridCnnModel:
    table: T.Tensor  # (vocab + 1, 64)
    convs: list[tuple[T.Tensor, T.Tensor]]  # (kernels (128, 5, c_in), bias (128,))
    dense_w: T.Tensor
    dense_b: T.Tensor
    emb_shift: np.ndarray
    emb_scale: np.ndarray
    history: list[float] = field(default_factory=list)

    def params(self) -> list[T.Tensor]:
        out = [self.table]
        for k, b in self.convs:
            out += [k, b]
        return out + [self.dense_w, self.dense_b]

    def named(self) -> dict[str, T.Tensor]:
        d = {"embedding": self.table}
        for i, (k, b) in enumerate(self.convs):
            d[f"conv{i}.kernels"] = k
            d[f"conv{i}.bias"] = b
        d["dense.W"] = self.dense_w
        d["dense.b"] = self.dense_b
        return d

    def to_json(self) -> str:
        meta = {"emb_shift": self.emb_shift.tolist(), "emb_scale": self.emb_scale.tolist(), "history": self.history}
        return T.params_to_json("hybrid-cnn", self.named(), meta)

    @classmethod
    def from_json(cls, text: str) -> "HybridCnnModel":
        _, named, meta = T.params_from_json(text)
        convs = [(named[f"conv{i}.kernels"], named[f"conv{i}.bias"]) for i in range(CNN_BLOCKS)]
        return cls(
            named["embedding"],
            convs,
            named["dense.W"],
            named["dense.b"],
            np.array(meta["emb_shift"]),
            np.array(meta["emb_scale"]),
            list(meta["history"]),
        )

    def predict_proba(self, rows) -> np.ndarray:
        rows = list(rows)
        pi, emb, _ = _stack(rows, True)
        seq = np.stack([pi_sequence(b) for b in pi])
        return T.softmax(cnn_logits(self, seq, emb, False, None)).data


def init_hybrid_cnn(vocab_size: int, emb_dim: int, seed: int) -> HybridCnnModel:
    rng = SplitMix64(seed).split("cnn-init")
    table = T.glorot(rng.split("embedding"), (vocab_size + 1, CNN_EMBED))
    table.data[0] = 0.0
    convs = []
    c_in = CNN_EMBED
    for i in range(CNN_BLOCKS):
        k = T.glorot(rng.split("conv", i), (CNN_FILTERS, CNN_WIDTH, c_in), CNN_WIDTH * c_in, CNN_WIDTH * CNN_FILTERS)
        convs.append((k, T.parameter(np.zeros(CNN_FILTERS))))
        c_in = CNN_FILTERS
    dense_w = T.glorot(rng.split("dense"), (CNN_FILTERS + emb_dim, 2))
    return HybridCnnModel(table, convs, dense_w, T.parameter(np.zeros(2)), np.zeros(emb_dim), np.ones(emb_dim))


def cnn_logits(model: HybridCnnModel, seq: np.ndarray, emb: np.ndarray, training: bool, rng: SplitMix64 | None) -> T.Tensor:
    h = T.embedding_lookup(model.table, seq)
    h = T.dropout(h, CNN_DROPOUT, rng, training)
    for i, (k, b) in enumerate(model.convs):
        h = T.relu(T.conv1d(h, k, b))
        if i < CNN_BLOCKS - 1:
            h = T.max_pool1d(h, 2)
    h = T.global_max_pool(h)
    e = T.Tensor((emb - model.emb_shift) / model.emb_scale)
    return T.add(T.matmul(T.concat([h, e], axis=1), model.dense_w), model.dense_b)


def train_hybrid_cnn(rows, epochs: int = 30, seed: int = 0, batch_size: int = 32, lr: float = 0.001) -> HybridCnnModel:
    """Adam on mean cross-entropy over seeded mini-batches."""
    rows = list(rows)
    pi, emb, y = _stack(rows, True)
    _check_classes(y)
    seq = np.stack([pi_sequence(b) for b in pi])
    model = init_hybrid_cnn(pi.shape[1], emb.shape[1], seed)
    sd = emb.std(axis=0)
    model.emb_shift, model.emb_scale = emb.mean(axis=0), np.where(sd > 0, sd, 1.0)
    opt = T.Adam(model.params(), lr=lr)
    root = SplitMix64(seed).split("cnn-train")
    n = len(y)
    for epoch in range(epochs):
        order = root.split("shuffle", epoch).permutation(n)
        total = 0.0
        for step, start in enumerate(range(0, n, batch_size)):
            idx = order[start : start + batch_size]
            logits = cnn_logits(model, seq[idx], emb[idx], True, root.split("dropout", epoch, step))
            loss = T.cross_entropy(logits, y[idx])
            opt.step(T.grad(loss, model.params()))
            total += loss.item() * len(idx)
        model.history.append(total / n)
    return model


def predict_hybrid_cnn(model: HybridCnnModel, row) -> np.ndarray:
    return model.predict_proba([row])[0]


# ---------------------------------------------------------------- dispatch

CLASSIFIERS = ("stacked_nb", "tree", "forest", "hybrid_cnn")


def train_classifier(name: str, rows, seed: int = 0, use_emb: bool = True, **kw):
    if name == "stacked_nb":
        return train_stacked_nb(rows, use_emb)
    if name == "tree":
        return train_tree(rows, kw.get("max_depth"), use_emb)
    if name == "forest":
        return train_forest(rows, kw.get("n_trees", 50), seed, kw.get("max_depth"), use_emb)
    if name == "hybrid_cnn":
        if not use_emb:
            raise MissingEmbedding("the hybrid CNN needs graph embeddings")
        return train_hybrid_cnn(rows, kw.get("epochs", 30), seed)
    raise ValueError(f"unknown classifier {name!r}")


def model_to_json(name: str, model) -> str:
    if name == "hybrid_cnn":
        return model.to_json()
    return json.dumps({"format_version": T.FORMAT_VERSION, "kind": name, "model": model.to_dict()})


def model_from_json(text: str):
    doc = json.loads(text)
    if doc.get("kind") == "hybrid-cnn":
        return HybridCnnModel.from_json(text)
    cls = {"stacked_nb": StackedNbModel, "tree": TreeModel, "forest": ForestModel}[doc["kind"]]
    return cls.from_dict(doc["model"])
