import numpy as np
import pytest
import scipy.sparse as sp

from apigraph.corpus import AppRecord, CodeBlock, Corpus
from apigraph.errors import UnknownNode
from apigraph.graphbuild import (
    CentralityTable,
    GlobalGraph,
    LocalGraph,
    SelectedApis,
    build_api_vocab,
    build_centrality_table,
    build_global_graph,
    build_local_graph,
    centrality,
    centrality_all,
    count_api_features,
    node_features,
    read_edge_list,
    regression_weights,
    select_top_apis,
    write_edge_list,
)
from apigraph.rng import SplitMix64
from helpers import brute_centrality, random_graph


def _app(app_id, blocks, label="benign"):
    return AppRecord(app_id, label, tuple(CodeBlock(i, tuple(b)) for i, b in enumerate(blocks)))


def _all_selected(vocab):
    ids = tuple(range(len(vocab)))
    return SelectedApis(ids, {i: 1.0 for i in ids})


def test_api_vocab_sorted_train_only():
    c = Corpus((_app("a", [["b", "a"]]), _app("t", [["z"]])), {"a": "train", "t": "test"})
    vocab = build_api_vocab(c)
    assert vocab.index == {"a": 0, "b": 1}
    assert len(build_api_vocab(Corpus((_app("t", [["z"]]),), {"t": "test"}))) == 0


def test_count_api_features():
    c = Corpus((_app("a", [["a", "b"], ["a", "c"]]),), {"a": "train"})
    vocab = build_api_vocab(c)
    counts = count_api_features([_app("x", [["a", "a", "b"]]), _app("y", [["q"]])], vocab)
    assert counts.tolist() == [[2, 1, 0], [0, 0, 0]]
    assert counts.dtype.kind == "i" and counts.min() >= 0


def test_select_correlated_api():
    rng = SplitMix64(5)
    labels = np.array([0, 1, 0, 1, 1, 0])
    counts = rng.integers(0, 3, 60).reshape(6, 10)
    counts[:, 4] = labels
    sel = select_top_apis(counts, labels, k=1)
    # closed-form ridge-free normal equations on standardized columns
    X = (counts - counts.mean(0)) / np.where(counts.std(0) > 0, counts.std(0), 1)
    w = np.linalg.lstsq(X, labels - labels.mean(), rcond=None)[0]
    assert sel.ids == (4,) == (int(np.argmax(np.abs(w))),)


def test_select_all_and_zero_column():
    counts = np.array([[1, 0, 2], [0, 0, 0], [1, 0, 1], [1, 0, 0], [1, 0, 0], [0, 0, 1]])
    labels = np.array([1, 0, 1, 0, 1, 0])
    sel = select_top_apis(counts, labels, k=10)
    assert len(sel) == 3
    assert sel.ids[-1] == 1 and sel.weight[1] == 0.0
    assert sel.weight[0] > 0 and sel.weight[2] > 0
    w = [sel.weight[i] for i in sel.ids]
    assert w == sorted(w, reverse=True)
    assert regression_weights(counts, labels)[1] == 0.0
    perm = [3, 0, 5, 1, 4, 2]
    assert set(select_top_apis(counts[perm], labels[perm], k=2).ids) == set(select_top_apis(counts, labels, k=2).ids)


def test_local_graph_triangle_and_path():
    c = Corpus((_app("a", [["x", "y", "z"]]),), {"a": "train"})
    vocab = build_api_vocab(c)
    g = build_local_graph(c.apps[0], vocab, _all_selected(vocab))
    assert g.edges() == {(0, 1), (0, 2), (1, 2)}
    path = build_local_graph(_app("b", [["x", "y"], ["y", "z"]]), vocab, _all_selected(vocab))
    assert path.edges() == {(0, 1), (1, 2)}
    assert np.array_equal(path.adj, path.adj.T) and not np.diag(path.adj).any()


def test_local_graph_unselected_is_empty():
    c = Corpus((_app("a", [["x", "y"]]),), {"a": "train"})
    vocab = build_api_vocab(c)
    g = build_local_graph(c.apps[0], vocab, SelectedApis((), {}))
    assert g.n == 0


def test_global_graph_union():
    c = Corpus((_app("a", [["x", "y"]]), _app("b", [["y", "z"]])), {"a": "train", "b": "train"})
    vocab = build_api_vocab(c)
    sel = _all_selected(vocab)
    locals_ = [build_local_graph(a, vocab, sel) for a in c.apps]
    O = build_global_graph(locals_, sel)
    assert O.edges() == {(0, 1), (1, 2)}
    for g in locals_:
        assert g.edges() <= O.edges()
    assert build_global_graph([], sel).adj.nnz == 0


def test_edge_list_roundtrip():
    n, edges = read_edge_list(write_edge_list([(2, 0), (1, 2)], 3))
    assert n == 3 and edges == [(0, 2), (1, 2)]


def test_centrality_path():
    A = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]])
    assert centrality(A, "degree") == {0: 0.5, 1: 1.0, 2: 0.5}
    bc = centrality(A, "betweenness")
    assert bc[1] == pytest.approx(1.0) and bc[0] == 0.0
    assert centrality(A, "closeness")[0] == pytest.approx(2 / 3)


def test_centrality_triangle():
    A = np.ones((3, 3)) - np.eye(3)
    assert np.allclose(list(centrality(A, "eigenvector").values()), 1 / np.sqrt(3), atol=1e-4)
    assert np.allclose(list(centrality(A, "pagerank").values()), 1 / 3)


def test_centrality_edgeless_and_singleton():
    assert set(centrality(np.zeros((4, 4)), "degree").values()) == {0.0}
    assert centrality(np.zeros((1, 1)), "pagerank") == {0: 0.0}
    with pytest.raises(ValueError):
        centrality(np.zeros((2, 2)), "katz")


def test_centrality_invariants_vs_oracle():
    rng = SplitMix64(11)
    for k in range(40):
        n = rng.randint(2, 8)
        A = random_graph(rng.split(k), n, rng.random())
        got = centrality_all(A)
        assert np.abs(got - brute_centrality(A)).max() < 1e-6
        assert np.all((got[:, :3] >= 0) & (got[:, :3] <= 1 + 1e-12))
        assert np.linalg.norm(got[:, 3]) == pytest.approx(1.0)
        assert got[:, 4].sum() == pytest.approx(1.0)


def test_node_features_lookup():
    table = CentralityTable(np.array([3, 5]), np.array([[0.1, 0, 0.2, 0.3, 0.05], [1, 1, 1, 1, 1.0]]))
    g1 = LocalGraph("a", np.array([3, 5]), np.zeros((2, 2), dtype=np.int8))
    g2 = LocalGraph("b", np.array([3]), np.zeros((1, 1), dtype=np.int8))
    assert node_features(g1, table)[0].tolist() == [0.1, 0, 0.2, 0.3, 0.05]
    assert np.array_equal(node_features(g1, table)[0], node_features(g2, table)[0])
    with pytest.raises(UnknownNode):
        node_features(LocalGraph("c", np.array([4]), np.zeros((1, 1), dtype=np.int8)), table)


def test_centrality_table_csv_roundtrip():
    A = random_graph(SplitMix64(2), 6, 0.5)
    table = build_centrality_table(GlobalGraph(np.arange(10, 16), sp.csr_matrix(A)))
    back = CentralityTable.from_csv(table.to_csv())
    assert np.array_equal(back.ids, table.ids) and np.array_equal(back.values, table.values)
