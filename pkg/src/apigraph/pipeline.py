"""End-to-end stages shared by the command line and the test harness:
feature extraction, detector training, the attack scenarios and the
retraining defense. Every stage is a pure function of its inputs and seed.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np

from . import classifiers as C
from . import gnn
from .corpus import Corpus, PiVocabulary, build_pi_vocab, stratified_split, vectorize_pi
from .errors import SpecInvalid
from .gnn import GnnModel, GraphData
from .graphbuild import (
    ApiVocabulary,
    CentralityTable,
    GlobalGraph,
    LocalGraph,
    SelectedApis,
    build_api_vocab,
    build_centrality_table,
    build_global_graph,
    build_local_graph,
    count_api_features,
    node_features,
    select_top_apis,
)
from .rng import SplitMix64
from .vgae_malgan import (
    AdversarialSample,
    AttackConfig,
    AttackerView,
    AttackResult,
    GeneratorModel,
    GnnDetector,
    Graph,
    featurize,
    generate_adversarial,
    retrain_defense,
    train_attack,
    validate_sample,
)

log = logging.getLogger(__name__)

DEFAULTS: dict = {
    "seed": 42,
    "paths": {"out": "run", "corpus": None},
    "corpus": {},
    "split_ratio": 0.7,
    "k_select": 7000,
    "gnn": {"kind": "sage", "epochs": 200, "batch_size": 16, "lr": 0.001},
    "classifier": {"pi_only": "stacked_nb", "pi_ge": "hybrid_cnn", "cnn_epochs": 30, "n_trees": 50, "max_depth": None},
    "attack": {
        "scenario": "full_data",
        "fraction": 0.3,
        "max_epochs": 50,
        "patience": 20,
        "noise_fraction": 0.5,
        "substitute": "sage",
        "sd_steps": 20,
        "lr": 0.005,
    },
    "defense": {"epochs": 50, "warm_start": True, "lr": 0.0003},
}


def merge_config(user: dict | None) -> dict:
    """Defaults overlaid with ``user``; unknown keys are rejected."""
    out = copy.deepcopy(DEFAULTS)

    def walk(dst, src, path):
        for k, v in src.items():
            if k not in dst:
                raise SpecInvalid(f"unknown config key {path + k!r}")
            if isinstance(dst[k], dict) and k != "corpus":
                if not isinstance(v, dict):
                    raise SpecInvalid(f"config key {path + k!r} must be a mapping")
                walk(dst[k], v, path + k + ".")
            else:
                dst[k] = v

    walk(out, user or {}, "")
    if out["attack"]["scenario"] not in ("full_data", "partial_data", "combined_model"):
        raise SpecInvalid(f"unknown attack scenario {out['attack']['scenario']!r}")
    if out["gnn"]["kind"] not in ("sage", "gcn"):
        raise SpecInvalid(f"unknown gnn kind {out['gnn']['kind']!r}")
    for key in ("pi_only", "pi_ge"):
        if out["classifier"][key] not in C.CLASSIFIERS:
            raise SpecInvalid(f"unknown classifier {out['classifier'][key]!r}")
    if out["classifier"]["pi_only"] == "hybrid_cnn":
        raise SpecInvalid("the hybrid CNN needs graph embeddings and cannot be the PI-only model")
    return out


def sub_seed(seed: int, *keys) -> int:
    return SplitMix64(seed).split(*keys).state


# ---------------------------------------------------------------- features


@dataclass(eq=False)
class Prepared:
    corpus: Corpus
    vocab: ApiVocabulary
    selected: SelectedApis
    pi_vocab: PiVocabulary
    train_local: list[LocalGraph]
    test_local: list[LocalGraph]
    global_graph: GlobalGraph
    table: CentralityTable
    train_data: list[GraphData]
    test_data: list[GraphData]
    y_train: np.ndarray
    y_test: np.ndarray

    @property
    def train_apps(self):
        return self.corpus.train()

    @property
    def test_apps(self):
        return self.corpus.test()


def prepare(corpus: Corpus, k_select: int = 7000) -> Prepared:
    train, test = corpus.train(), corpus.test()
    vocab = build_api_vocab(corpus)
    y_train = np.array([a.y for a in train], dtype=np.int64)
    y_test = np.array([a.y for a in test], dtype=np.int64)
    selected = select_top_apis(count_api_features(train, vocab), y_train, k_select)
    train_local = [build_local_graph(a, vocab, selected) for a in train]
    test_local = [build_local_graph(a, vocab, selected) for a in test]
    O = build_global_graph(train_local, selected)
    table = build_centrality_table(O)

    def data(g):
        return GraphData(g.app_id, g.nodes, g.adj, node_features(g, table))

    return Prepared(
        corpus,
        vocab,
        selected,
        build_pi_vocab(corpus),
        train_local,
        test_local,
        O,
        table,
        [data(g) for g in train_local],
        [data(g) for g in test_local],
        y_train,
        y_test,
    )


def feature_rows(apps, pi_vocab: PiVocabulary, embeddings: dict[str, np.ndarray] | None) -> list[C.FeatureRow]:
    return [
        C.FeatureRow(a.app_id, vectorize_pi(a, pi_vocab), None if embeddings is None else embeddings[a.app_id], a.y)
        for a in apps
    ]


# ---------------------------------------------------------------- training


@dataclass(eq=False)
class Trained:
    gnn: GnnModel
    embeddings: dict[str, np.ndarray]
    pi_only: object
    pi_ge: object
    metrics: dict
    test_prob: np.ndarray  # pi_ge malware probability on the test split


def train_gnn_model(prep: Prepared, cfg: dict) -> GnnModel:
    g = cfg["gnn"]
    return gnn.train_gnn(
        prep.train_data, prep.y_train, g["kind"], g["epochs"], cfg["seed"], g["lr"], batch_size=g["batch_size"]
    )


def train_classifiers(prep: Prepared, model: GnnModel, cfg: dict):
    c = cfg["classifier"]
    emb = gnn.embed_corpus(model, prep.train_data + prep.test_data)
    kw = {"epochs": c["cnn_epochs"], "n_trees": c["n_trees"], "max_depth": c["max_depth"]}
    seed = sub_seed(cfg["seed"], "classifier")
    tr_plain = feature_rows(prep.train_apps, prep.pi_vocab, None)
    te_plain = feature_rows(prep.test_apps, prep.pi_vocab, None)
    tr_emb = feature_rows(prep.train_apps, prep.pi_vocab, emb)
    te_emb = feature_rows(prep.test_apps, prep.pi_vocab, emb)
    pi_only = C.train_classifier(c["pi_only"], tr_plain, seed, use_emb=False, **kw)
    pi_ge = C.train_classifier(c["pi_ge"], tr_emb, seed, use_emb=True, **kw)
    p_only = pi_only.predict_proba(te_plain)[:, 1]
    p_ge = pi_ge.predict_proba(te_emb)[:, 1]
    return emb, pi_only, pi_ge, p_only, p_ge


def run_train(prep: Prepared, cfg: dict) -> Trained:
    model = train_gnn_model(prep, cfg)
    emb, pi_only, pi_ge, p_only, p_ge = train_classifiers(prep, model, cfg)
    p_gnn = gnn.predict_proba(model, prep.test_data)
    c = cfg["classifier"]
    metrics = {
        "pi_only": {"classifier": c["pi_only"], **C.compute_metrics(p_only > 0.5, prep.y_test).to_dict()},
        "pi_ge": {"classifier": c["pi_ge"], **C.compute_metrics(p_ge > 0.5, prep.y_test).to_dict()},
        "gnn": {"classifier": cfg["gnn"]["kind"], **C.compute_metrics(p_gnn > 0.5, prep.y_test).to_dict()},
    }
    return Trained(model, emb, pi_only, pi_ge, metrics, p_ge)


# ---------------------------------------------------------------- attack


class CombinedDetector:
    """GNN embedding plus hybrid classifier; permission/intent bits are looked
    up by app id and pass through unperturbed."""

    def __init__(self, model: GnnModel, table: CentralityTable, classifier, pi_by_app: dict[str, np.ndarray]):
        self._model = model
        self._table = table
        self._classifier = classifier
        self._pi = pi_by_app
        self.queries = 0

    def predict(self, graphs) -> np.ndarray:
        graphs = list(graphs)
        self.queries += len(graphs)
        emb = gnn.embed_graphs(self._model, [featurize(g, self._table) for g in graphs])
        rows = [C.FeatureRow(g.app_id, self._pi[g.app_id], e, 1) for g, e in zip(graphs, emb)]
        return (self._classifier.predict_proba(rows)[:, 1] > 0.5).astype(np.int64)


def make_detector(prep: Prepared, model: GnnModel, scenario: str, classifier=None):
    if scenario == "combined_model":
        pi = {a.app_id: vectorize_pi(a, prep.pi_vocab) for a in prep.corpus.apps}
        return CombinedDetector(model, prep.table, classifier, pi)
    return GnnDetector(model, prep.table)


def _graph(g) -> Graph:
    return Graph(g.app_id, g.nodes, g.adj)


def attacker_view(prep: Prepared, cfg: dict) -> AttackerView:
    """The attacker's data. Under partial_data it holds a label-stratified
    share of the training apps and recomputes its own global graph and
    centrality table from them."""
    a = cfg["attack"]
    local = prep.train_local
    labels = prep.y_train
    O, table = prep.global_graph, prep.table
    if a["scenario"] == "partial_data":
        apps = prep.train_apps
        keep = stratified_split(apps, a["fraction"], sub_seed(cfg["seed"], "partial-view"))
        idx = [i for i, app in enumerate(apps) if keep[app.app_id] == "train"]
        local = [local[i] for i in idx]
        labels = labels[idx]
        O = build_global_graph(local, prep.selected)
        table = build_centrality_table(O)
    benign = [_graph(g) for g, y in zip(local, labels) if y == 0]
    malware = [_graph(g) for g, y in zip(local, labels) if y == 1]
    return AttackerView(O, table, benign, malware)


def attack_config(cfg: dict) -> AttackConfig:
    a = cfg["attack"]
    return AttackConfig(
        max_epochs=a["max_epochs"],
        patience=a["patience"],
        noise_fraction=a["noise_fraction"],
        seed=sub_seed(cfg["seed"], "attack"),
        scenario=a["scenario"],
        fraction=a["fraction"] if a["scenario"] == "partial_data" else 1.0,
        substitute=a["substitute"],
        sd_steps=a["sd_steps"],
        lr=a["lr"],
    )


def test_malware(prep: Prepared) -> list[Graph]:
    return [_graph(g) for g, y in zip(prep.test_local, prep.y_test) if y == 1]


@dataclass(eq=False)
class Attacked:
    result: AttackResult
    samples: list[AdversarialSample]
    labels_before: np.ndarray
    labels_after: np.ndarray
    report: dict


def generate_for(gen: GeneratorModel, graphs, view: AttackerView, cfg: dict, purpose: str):
    return generate_adversarial(
        gen, graphs, view.benign, view, sub_seed(cfg["seed"], "generate", purpose), cfg["attack"]["noise_fraction"]
    )


def run_attack(prep: Prepared, detector, cfg: dict) -> Attacked:
    view = attacker_view(prep, cfg)
    result = train_attack(detector, view, attack_config(cfg))
    mal = test_malware(prep)
    samples = generate_for(result.generator, mal, view, cfg, "test")
    before = np.asarray(detector.predict(mal), dtype=np.int64)
    after = np.asarray(detector.predict([s.graph() for s in samples]), dtype=np.int64)
    valid = [validate_sample(s, m, prep.global_graph) and validate_sample(s, m, view.global_graph) for s, m in zip(samples, mal)]
    report = {
        "scenario": cfg["attack"]["scenario"],
        "fraction": cfg["attack"]["fraction"] if cfg["attack"]["scenario"] == "partial_data" else 1.0,
        "original_recall": float(before.mean()) if len(before) else 0.0,
        "attacked_recall": float(after.mean()) if len(after) else 0.0,
        "n_samples": len(samples),
        "best_epoch": result.best_epoch,
        "epochs_run": len(result.history),
        "mean_added_nodes": float(np.mean([s.n_added_nodes for s in samples])) if samples else 0.0,
        "mean_added_edges": float(np.mean([s.n_added_edges for s in samples])) if samples else 0.0,
        "semantics_preserved": bool(all(valid)),
    }
    return Attacked(result, samples, before, after, report)


# ---------------------------------------------------------------- defense


@dataclass(eq=False)
class Defended:
    gnn: GnnModel
    classifier: object | None
    report: dict


def run_defense(prep: Prepared, trained_gnn: GnnModel, pi_ge, generator: GeneratorModel, cfg: dict) -> Defended:
    """Retrain on the training split plus adversarial versions of the training
    malware, then score clean test data and a fresh adversarial test batch."""
    scenario = cfg["attack"]["scenario"]
    d = cfg["defense"]
    view = attacker_view(prep, cfg)
    train_mal = [_graph(g) for g, y in zip(prep.train_local, prep.y_train) if y == 1]
    adv_train = generate_for(generator, train_mal, view, cfg, "defense-train")
    adv_test = generate_for(generator, test_malware(prep), view, cfg, "defense-test")
    hardened = retrain_defense(
        prep.train_data,
        prep.y_train,
        adv_train,
        prep.table,
        cfg["gnn"]["kind"],
        d["epochs"],
        sub_seed(cfg["seed"], "defense"),
        base_model=trained_gnn if d["warm_start"] else None,
        lr=d["lr"],
        batch_size=cfg["gnn"]["batch_size"],
    )
    classifier = None
    if scenario == "combined_model":
        emb = gnn.embed_corpus(hardened, prep.train_data + prep.test_data)
        adv_emb = gnn.embed_graphs(hardened, [featurize(s.graph(), prep.table) for s in adv_train])
        by_id = prep.corpus.by_id()
        rows = feature_rows(prep.train_apps, prep.pi_vocab, emb)
        rows += [C.FeatureRow(s.source, vectorize_pi(by_id[s.source], prep.pi_vocab), e, 1) for s, e in zip(adv_train, adv_emb)]
        c = cfg["classifier"]
        kw = {"epochs": c["cnn_epochs"], "n_trees": c["n_trees"], "max_depth": c["max_depth"]}
        classifier = C.train_classifier(c["pi_ge"], rows, sub_seed(cfg["seed"], "defense-classifier"), use_emb=True, **kw)
    before = make_detector(prep, trained_gnn, scenario, pi_ge)
    after = make_detector(prep, hardened, scenario, classifier)
    test_graphs = [_graph(g) for g in prep.test_local]
    adv_graphs = [s.graph() for s in adv_test]
    report = {
        "scenario": scenario,
        "clean": C.compute_metrics(after.predict(test_graphs), prep.y_test).to_dict(),
        "pre_attack_clean": C.compute_metrics(before.predict(test_graphs), prep.y_test).to_dict(),
        "adversarial_recall": float(np.mean(after.predict(adv_graphs))) if adv_graphs else 0.0,
        "adversarial_recall_before_defense": float(np.mean(before.predict(adv_graphs))) if adv_graphs else 0.0,
        "n_adversarial_train": len(adv_train),
    }
    report["pre_attack_recall"] = report["pre_attack_clean"]["recall"]
    return Defended(hardened, classifier, report)
