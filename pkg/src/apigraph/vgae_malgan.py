"""Black-box evasion attack on graph malware detectors with a VGAE generator
and a GraphSAGE substitute detector, plus retraining as a defense.

The generator only ever adds edges: sampled adjacencies are intersected
with the attacker's global co-occurrence graph and unioned with the
original malware adjacency before anything is emitted.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from . import gnn
from . import tensor as T
from .errors import DetectorUnavailable, EmptyBatch, EmptyBenignGraph, NodeMismatch, ShapeMismatch
from .gnn import GnnModel, GraphData
from .graphbuild import CentralityTable, GlobalGraph
from .rng import SplitMix64

log = logging.getLogger(__name__)

LATENT_DIM = 16
HIDDEN_DIM = 32
THRESHOLD = 0.98
LOGVAR_CLAMP = (-10.0, 10.0)


@dataclass(eq=False)
class Graph:
    """Bare API graph: sorted global node ids and a 0/1 adjacency."""

    app_id: str
    nodes: np.ndarray
    adj: np.ndarray

    @property
    def n(self) -> int:
        return len(self.nodes)

    def edges(self) -> set[tuple[int, int]]:
        r, c = np.nonzero(np.triu(self.adj, 1))
        return {(int(self.nodes[i]), int(self.nodes[j])) for i, j in zip(r, c)}


def featurize(g, table: CentralityTable) -> GraphData:
    x = np.stack([table.row(v) for v in g.nodes]) if len(g.nodes) else np.zeros((0, 5))
    return GraphData(g.app_id, np.asarray(g.nodes), np.asarray(g.adj), x)


class Detector(Protocol):
    """What the attacker may touch: labels only (1 = malware)."""

    def predict(self, graphs) -> np.ndarray: ...


class GnnDetector:
    """Black-box wrapper around a trained GNN and the defender's centrality table."""

    def __init__(self, model: GnnModel, table: CentralityTable):
        self._model = model
        self._table = table
        self.queries = 0

    def predict(self, graphs) -> np.ndarray:
        graphs = list(graphs)
        self.queries += len(graphs)
        data = [featurize(g, self._table) for g in graphs]
        return (gnn.predict_proba(self._model, data) > 0.5).astype(np.int64)


# ---------------------------------------------------------------- generator pieces


@dataclass(eq=False)
class GeneratorModel:
    w0: T.Tensor
    w_mu: T.Tensor
    w_sigma: T.Tensor
    x_shift: np.ndarray
    x_scale: np.ndarray
    threshold: float = THRESHOLD

    def params(self) -> list[T.Tensor]:
        return [self.w0, self.w_mu, self.w_sigma]

    def copy(self) -> "GeneratorModel":
        c = lambda t: T.parameter(t.data.copy())  # noqa: E731
        return GeneratorModel(c(self.w0), c(self.w_mu), c(self.w_sigma), self.x_shift.copy(), self.x_scale.copy(), self.threshold)

    def to_json(self) -> str:
        named = {"W0": self.w0, "Wmu": self.w_mu, "Wsigma": self.w_sigma}
        meta = {"x_shift": self.x_shift.tolist(), "x_scale": self.x_scale.tolist(), "threshold": self.threshold}
        return T.params_to_json("vgae-generator", named, meta)

    @classmethod
    def from_json(cls, text: str) -> "GeneratorModel":
        _, named, meta = T.params_from_json(text)
        return cls(
            named["W0"], named["Wmu"], named["Wsigma"], np.array(meta["x_shift"]), np.array(meta["x_scale"]), meta["threshold"]
        )


def init_generator(seed: int, x_shift=None, x_scale=None, in_dim: int = 5) -> GeneratorModel:
    rng = SplitMix64(seed).split("generator-init")
    return GeneratorModel(
        T.glorot(rng.split("W0"), (in_dim, HIDDEN_DIM)),
        T.glorot(rng.split("Wmu"), (HIDDEN_DIM, LATENT_DIM)),
        T.glorot(rng.split("Wsigma"), (HIDDEN_DIM, LATENT_DIM)),
        np.zeros(in_dim) if x_shift is None else np.asarray(x_shift, dtype=np.float64),
        np.ones(in_dim) if x_scale is None else np.asarray(x_scale, dtype=np.float64),
    )


def inject_benign_noise(mal: Graph, benign: Graph, fraction: float, rng: SplitMix64) -> tuple[Graph, np.ndarray]:
    """Union of the malware graph with ceil(fraction * |E_benign|) benign edges.

    Returns the noisy graph (nodes sorted) and the malware adjacency lifted
    into its node order.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"noise fraction must lie in (0, 1], got {fraction}")
    r, c = np.nonzero(np.triu(benign.adj, 1))
    if len(r) == 0:
        raise EmptyBenignGraph(f"benign graph {benign.app_id} has no edges")
    k = math.ceil(fraction * len(r))
    pick = np.sort(rng.sample(len(r), k))
    b_edges = [(int(benign.nodes[r[i]]), int(benign.nodes[c[i]])) for i in pick]
    nodes = np.array(sorted(set(mal.nodes.tolist()) | {v for e in b_edges for v in e}), dtype=np.int64)
    pos = {int(v): i for i, v in enumerate(nodes)}
    a_mal = np.zeros((len(nodes), len(nodes)), dtype=np.int8)
    mi = np.array([pos[int(v)] for v in mal.nodes], dtype=np.int64)
    if len(mi):
        a_mal[np.ix_(mi, mi)] = mal.adj
    adj = a_mal.copy()
    for u, v in b_edges:
        adj[pos[u], pos[v]] = adj[pos[v], pos[u]] = 1
    return Graph(mal.app_id, nodes, adj), a_mal


def encode(gen: GeneratorModel, X, A) -> tuple[T.Tensor, T.Tensor]:
    """mu = Ã relu(Ã X W0) Wmu and logvar = Ã relu(Ã X W0) Wsigma."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] != np.asarray(A).shape[0]:
        raise ShapeMismatch(f"features {X.shape} vs adjacency {np.asarray(A).shape}")
    a_norm = gnn.normalize_adjacency(A)
    xs = (X - gen.x_shift) / gen.x_scale
    hidden = T.relu(T.matmul(T.Tensor(a_norm @ xs), gen.w0))
    ah = T.matmul(T.Tensor(a_norm), hidden)
    return T.matmul(ah, gen.w_mu), T.matmul(ah, gen.w_sigma)


def sample_latent(mu: T.Tensor, logvar: T.Tensor, rng: SplitMix64) -> T.Tensor:
    if mu.shape != logvar.shape:
        raise ShapeMismatch(f"mu {mu.shape} vs logvar {logvar.shape}")
    eps = rng.normal(int(np.prod(mu.shape))).reshape(mu.shape)
    std = T.exp(T.mul(T.clip(logvar, *LOGVAR_CLAMP), 0.5))
    return T.add(mu, T.mul(std, eps))


def decode(Z: T.Tensor, threshold: float = THRESHOLD) -> tuple[T.Tensor, np.ndarray]:
    """Soft edges exp(-||z_i - z_j||) and their hard threshold (strict, no self loops)."""
    P = T.exp(T.neg(T.pairwise_distance(Z)))
    hard = (P.data > threshold).astype(np.int8)
    np.fill_diagonal(hard, 0)
    return P, hard


def relaxed_edges(Z: T.Tensor, threshold: float = THRESHOLD) -> T.Tensor:
    """exp(-k ||z_i - z_j||) with k chosen so the hard threshold maps to 0.5.

    This is P ** k: a monotone reshaping of the decoder's soft edges whose
    0.5 level coincides with emission, so the substitute detector sees
    roughly the graph that would be emitted.
    """
    k = math.log(2.0) / -math.log(threshold)
    return T.exp(T.mul(T.neg(T.pairwise_distance(Z)), k))


def constrain(a_raw, o_sub, a_mal) -> np.ndarray:
    """(a_raw AND O) OR A_mal."""
    a_raw, o_sub, a_mal = (np.asarray(m) != 0 for m in (a_raw, o_sub, a_mal))
    if not (a_raw.shape == o_sub.shape == a_mal.shape):
        raise NodeMismatch(f"shapes {a_raw.shape}, {o_sub.shape}, {a_mal.shape} differ")
    return ((a_raw & o_sub) | a_mal).astype(np.int8)


def kl_divergence(mu: T.Tensor, logvar: T.Tensor) -> T.Tensor:
    """KL(N(mu, exp(logvar)) || N(0, I)) summed over latent dims, averaged over nodes."""
    lv = T.clip(logvar, *LOGVAR_CLAMP)
    per = T.add(T.add(T.neg(lv), T.mul(mu, mu)), T.exp(lv))
    n = mu.shape[0]
    return T.mul(T.sum(T.add(per, -1.0)), 0.5 / n)


def recon_loss(P: T.Tensor, target) -> T.Tensor:
    """Binary cross-entropy of soft edges against the input adjacency over pairs i<j."""
    n = P.shape[0]
    iu = np.triu_indices(n, 1)
    if len(iu[0]) == 0:
        return T.Tensor(0.0)
    flat = T.rows(T.reshape(P, (-1,)), iu[0] * n + iu[1])
    return T.bce(flat, np.asarray(target)[iu])


def soft_adjacency(P: T.Tensor, o_sub, a_mal) -> T.Tensor:
    """max(P * O, A_mal) with a zero diagonal: the differentiable stand-in for Â."""
    mask = np.asarray(o_sub, dtype=np.float64).copy()
    np.fill_diagonal(mask, 0.0)
    return T.maximum(T.mul(P, mask), np.asarray(a_mal, dtype=np.float64))


def substitute_prob(sd: GnnModel, X, A) -> T.Tensor:
    """Substitute detector's malware probability for one graph (inference mode)."""
    emb = gnn.pool_graph(gnn.node_embeddings(sd, X, A))
    logits = gnn.head(sd, T.reshape(emb, (1, -1)), False, None)
    return T.rows(T.reshape(T.softmax(logits), (-1,)), [1])


# ---------------------------------------------------------------- losses


def _group_mean_nll(probs: T.Tensor, malware_mask: np.ndarray, eps: float = 1e-12) -> T.Tensor:
    terms = []
    benign = np.nonzero(~malware_mask)[0]
    mal = np.nonzero(malware_mask)[0]
    if len(benign):
        terms.append(T.neg(T.mean(T.log(T.clip(T.add(T.neg(T.rows(probs, benign)), 1.0), eps, 1.0)))))
    if len(mal):
        terms.append(T.neg(T.mean(T.log(T.clip(T.rows(probs, mal), eps, 1.0)))))
    out = terms[0]
    for t in terms[1:]:
        out = T.add(out, t)
    return out


def sd_loss(sd: GnnModel, benign_graphs, adv_graphs, detector_labels, training: bool = False, rng=None) -> T.Tensor:
    """-mean_benign log(1 - D) - mean_{adv flagged} log D.

    Adversarial graphs the black box calls benign join the benign group.
    """
    benign_graphs, adv_graphs = list(benign_graphs), list(adv_graphs)
    detector_labels = np.asarray(detector_labels, dtype=np.int64)
    if len(adv_graphs) != len(detector_labels):
        raise ShapeMismatch("one detector label per adversarial graph required")
    if not benign_graphs and not adv_graphs:
        raise EmptyBatch("substitute detector loss needs at least one graph")
    graphs = benign_graphs + adv_graphs
    is_mal = np.concatenate([np.zeros(len(benign_graphs), dtype=bool), detector_labels == 1])
    _, logits = gnn.batch_logits(sd, gnn.Batch.of(graphs), training, rng)
    probs = T.reshape(T.rows(T.transpose(T.softmax(logits)), [1]), (-1,))
    return _group_mean_nll(probs, is_mal)


def bb_loss(probs: T.Tensor, detector_labels) -> T.Tensor | None:
    """mean log D over adversarial graphs the black box flags; None when none are flagged."""
    flagged = np.nonzero(np.asarray(detector_labels) == 1)[0]
    if len(flagged) == 0:
        return None
    return T.mean(T.log(T.clip(T.rows(probs, flagged), 1e-12, 1.0)))


# ---------------------------------------------------------------- samples


@dataclass(eq=False)
class AdversarialSample:
    source: str
    nodes: np.ndarray
    adj: np.ndarray  # Â, 0/1
    soft: np.ndarray  # P from the decoder
    mal_adj: np.ndarray  # original malware adjacency lifted to ``nodes``
    n_added_nodes: int
    n_added_edges: int

    @property
    def app_id(self) -> str:
        return self.source

    @property
    def n(self) -> int:
        return len(self.nodes)

    def graph(self) -> Graph:
        return Graph(self.source, self.nodes, self.adj)


def validate_sample(sample: AdversarialSample, mal: Graph, global_graph: GlobalGraph) -> bool:
    """Exact semantic-preservation check: keeps every malware edge, adds only global-graph edges."""
    adv = sample.graph().edges()
    orig = mal.edges()
    if not orig <= adv:
        return False
    valid = global_graph.edges()
    return (adv - orig) <= valid


@dataclass(eq=False)
class Generated:
    sample: AdversarialSample
    P: T.Tensor
    P_mean: T.Tensor
    mu: T.Tensor
    logvar: T.Tensor
    noisy: Graph
    o_sub: np.ndarray
    x: np.ndarray


def generate_one(gen: GeneratorModel, mal: Graph, benign: Graph, view: "AttackerView", fraction: float, rng: SplitMix64) -> Generated:
    """Inject noise, encode, decode and constrain one malware graph.

    The emitted adjacency is decoded from the posterior mean; ``P`` (kept for
    the reconstruction loss) is decoded from a reparameterized sample and
    ``P_mean`` (the substitute detector's relaxed input) from the mean via
    :func:`relaxed_edges`.
    """
    noisy, a_mal = inject_benign_noise(mal, benign, fraction, rng.split("noise"))
    x = np.stack([view.table.row(v) for v in noisy.nodes])
    mu, logvar = encode(gen, x, noisy.adj)
    Z = sample_latent(mu, logvar, rng.split("eps"))
    P, _ = decode(Z, gen.threshold)
    _, raw = decode(mu, gen.threshold)
    P_mean = relaxed_edges(mu, gen.threshold)
    o_sub = view.global_graph.restrict(noisy.nodes)
    adj = constrain(raw, o_sub, a_mal)
    sample = AdversarialSample(
        mal.app_id,
        noisy.nodes,
        adj,
        P_mean.data,
        a_mal,
        int(noisy.n - mal.n),
        int((adj.sum() - a_mal.sum()) // 2),
    )
    return Generated(sample, P, P_mean, mu, logvar, noisy, o_sub, x)


def generate_adversarial(gen: GeneratorModel, malware_graphs, benign_pool, view: "AttackerView", seed: int, fraction: float = 0.5):
    """One adversarial sample per malware graph, each with a benign donor drawn from ``benign_pool``."""
    benign_pool = [b for b in benign_pool if b.adj.any()]
    if not benign_pool:
        raise EmptyBenignGraph("benign pool has no graph with edges")
    root = SplitMix64(seed).split("generate")
    out = []
    for g in malware_graphs:
        r = root.split(g.app_id)
        donor = benign_pool[int(r.split("donor").integers(0, len(benign_pool), 1)[0])]
        out.append(generate_one(gen, g, donor, view, fraction, r).sample)
    return out


# ---------------------------------------------------------------- training


@dataclass
class AttackConfig:
    max_epochs: int = 50
    patience: int = 20
    noise_fraction: float = 0.5
    seed: int = 0
    scenario: str = "full_data"  # full_data | partial_data | combined_model
    fraction: float = 1.0  # share of the training data the attacker holds
    substitute: str = "sage"  # sage (3 layers) | gcn (2 layers)
    sd_steps: int = 20
    lr: float = 0.005

    def validate(self) -> None:
        if self.scenario not in ("full_data", "partial_data", "combined_model"):
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if not 0.0 < self.fraction <= 1.0:
            raise ValueError("fraction must lie in (0, 1]")
        if not 0.0 < self.noise_fraction <= 1.0:
            raise ValueError("noise_fraction must lie in (0, 1]")


@dataclass(eq=False)
class AttackerView:
    """The attacker's data: its own global graph and centrality table plus its
    benign and malware training graphs."""

    global_graph: GlobalGraph
    table: CentralityTable
    benign: list[Graph]
    malware: list[Graph]


@dataclass(eq=False)
class AttackResult:
    generator: GeneratorModel
    substitute: GnnModel
    history: list[dict] = field(default_factory=list)
    best_epoch: int = -1


def _sd_model(kind: str, seed: int, view: AttackerView) -> GnnModel:
    n_layers = 3 if kind == "sage" else 2
    sd = gnn.init_gnn(kind, seed, n_layers)
    all_x = np.concatenate([featurize(g, view.table).x for g in view.benign + view.malware])
    sd.x_shift = all_x.mean(axis=0)
    sd.x_scale = np.where(all_x.std(axis=0) > 0, all_x.std(axis=0), 1.0)
    return sd


def generator_loss(gen_out: Generated, sd: GnnModel, flagged: bool) -> T.Tensor:
    """L_BB (when the black box flags the sample) + BCE reconstruction + KL."""
    s = gen_out.sample
    soft = soft_adjacency(gen_out.P_mean, gen_out.o_sub, s.mal_adj)
    loss = T.add(recon_loss(gen_out.P, gen_out.noisy.adj), kl_divergence(gen_out.mu, gen_out.logvar))
    if flagged:
        d = substitute_prob(sd, gen_out.x, soft)
        loss = T.add(loss, bb_loss(d, [1]))
    return loss


def train_attack(detector: Detector, view: AttackerView, config: AttackConfig) -> AttackResult:
    """Alternate substitute-detector and generator updates against a label-only detector."""
    config.validate()
    if detector is None or not hasattr(detector, "predict"):
        raise DetectorUnavailable("attack needs a detector exposing predict()")
    if not view.malware or not view.benign:
        raise EmptyBatch("attacker view needs malware and benign graphs")
    root = SplitMix64(config.seed).split("attack")
    sd = _sd_model(config.substitute, config.seed, view)
    gen = init_generator(config.seed, sd.x_shift, sd.x_scale)
    sd_opt = T.Adam(sd.params(), lr=config.lr)
    gen_opt = T.Adam(gen.params(), lr=config.lr)
    benign_feats = [featurize(b, view.table) for b in view.benign]
    donors = [b for b in view.benign if b.adj.any()]
    if not donors:
        raise EmptyBenignGraph("no benign graph with edges to draw noise from")

    result = AttackResult(gen.copy(), sd.copy())
    best = math.inf
    stale = 0
    for epoch in range(config.max_epochs):
        er = root.split("epoch", epoch)
        # the recall measured below belongs to the generator as it enters the epoch
        snapshot = gen.copy()
        # (a) generate, label with the black box, fit the substitute
        samples = generate_adversarial(gen, view.malware, donors, view, mix_seed(er, "phase-a"), config.noise_fraction)
        labels = np.asarray(detector.predict([s.graph() for s in samples]), dtype=np.int64)
        recall = float(labels.mean())
        adv_feats = [featurize(s.graph(), view.table) for s in samples]
        for step in range(config.sd_steps):
            loss_d = sd_loss(sd, benign_feats, adv_feats, labels, True, er.split("sd-dropout", step))
            sd_opt.step(T.grad(loss_d, sd.params()))
        # (b) regenerate per malware graph and step the generator
        order = er.split("order").permutation(len(view.malware))
        gen_losses = []
        for i in order:
            mal = view.malware[i]
            r = er.split("phase-b", mal.app_id)
            donor = donors[int(r.split("donor").integers(0, len(donors), 1)[0])]
            out = generate_one(gen, mal, donor, view, config.noise_fraction, r)
            flagged = bool(detector.predict([out.sample.graph()])[0] == 1)
            loss_g = generator_loss(out, sd, flagged)
            gen_opt.step(T.grad(loss_g, gen.params()))
            gen_losses.append(loss_g.item())
        result.history.append(
            {"epoch": epoch, "sd_loss": loss_d.item(), "gen_loss": float(np.mean(gen_losses)), "detector_recall_adv": recall}
        )
        log.info("attack epoch %d: recall on generated %.4f", epoch, recall)
        if recall < best:
            best, stale = recall, 0
            result.generator, result.substitute, result.best_epoch = snapshot, sd.copy(), epoch
        else:
            stale += 1
            if stale >= config.patience:
                break
    return result


def mix_seed(rng: SplitMix64, key) -> int:
    return rng.split(key).state


# ---------------------------------------------------------------- defense


def retrain_defense(
    train_graphs,
    train_labels,
    adv_samples,
    table: CentralityTable,
    kind: str = "sage",
    epochs: int = 50,
    seed: int = 0,
    base_model: GnnModel | None = None,
    **kw,
) -> GnnModel:
    """Retrain the detector on the original training graphs plus adversarial
    samples labeled malware.

    With ``base_model`` training continues from the pre-attack detector;
    without it the detector is trained from scratch, which with no
    adversarial samples reproduces baseline training. When samples are
    added, rows are class-balanced so the extra malware does not shift the
    decision threshold against benign apps.
    """
    adv_samples = list(adv_samples)
    kw.setdefault("class_balance", bool(adv_samples))
    graphs = list(train_graphs) + [featurize(s.graph(), table) for s in adv_samples]
    labels = list(train_labels) + [1] * len(adv_samples)
    return gnn.train_gnn(graphs, labels, kind, epochs, seed, model=base_model, **kw)
