"""API vocabulary, regression-based API selection, local/global co-occurrence
graphs and the five centrality measures used as node features."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass
from functools import cached_property
from itertools import combinations

import numpy as np
import scipy.sparse as sp

from .corpus import AppRecord, Corpus
from .errors import DegenerateDesign, NonConvergence, UnknownNode

log = logging.getLogger(__name__)

MEASURES = ("degree", "betweenness", "closeness", "eigenvector", "pagerank")
RIDGE = 1e-6


@dataclass(frozen=True)
class ApiVocabulary:
    names: tuple[str, ...]

    @cached_property
    def index(self) -> dict[str, int]:
        return {n: i for i, n in enumerate(self.names)}

    def __len__(self) -> int:
        return len(self.names)


def build_api_vocab(corpus: Corpus) -> ApiVocabulary:
    names = {call for app in corpus.train() for b in app.blocks for call in b.calls}
    return ApiVocabulary(tuple(sorted(names)))


def count_api_features(apps, vocab: ApiVocabulary) -> np.ndarray:
    counts = np.zeros((len(apps), len(vocab)), dtype=np.int64)
    index = vocab.index
    for r, app in enumerate(apps):
        for b in app.blocks:
            for call in b.calls:
                j = index.get(call)
                if j is not None:
                    counts[r, j] += 1
    return counts


@dataclass(frozen=True)
class SelectedApis:
    ids: tuple[int, ...]  # descending |weight|, ties by ascending id
    weight: dict[int, float]

    @cached_property
    def sorted_ids(self) -> np.ndarray:
        return np.array(sorted(self.ids), dtype=np.int64)

    @cached_property
    def position(self) -> dict[int, int]:
        return {int(g): p for p, g in enumerate(self.sorted_ids)}

    def __len__(self) -> int:
        return len(self.ids)


def regression_weights(counts: np.ndarray, labels: np.ndarray, ridge: float = RIDGE) -> np.ndarray:
    """Ridge least-squares coefficients of the 0/1 label on standardized counts.

    Zero-variance columns get weight 0. Uses the dual normal equations when
    there are more columns than rows.
    """
    X = np.asarray(counts, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if X.size == 0 or not np.any(X):
        raise DegenerateDesign("all API counts are zero")
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    live = sd > 0
    Z = np.zeros_like(X)
    Z[:, live] = (X[:, live] - mu[live]) / sd[live]
    yc = y - y.mean()
    n, d = Z.shape
    if d <= n:
        beta = np.linalg.solve(Z.T @ Z + ridge * np.eye(d), Z.T @ yc)
    else:
        beta = Z.T @ np.linalg.solve(Z @ Z.T + ridge * np.eye(n), yc)
    beta[~live] = 0.0
    return beta


def select_top_apis(counts: np.ndarray, labels, k: int = 7000, ridge: float = RIDGE) -> SelectedApis:
    if k < 1:
        raise ValueError("k must be >= 1")
    counts = np.asarray(counts)
    labels = np.asarray(labels)
    if counts.shape[0] != labels.shape[0]:
        raise ValueError("counts rows must match labels")
    w = np.abs(regression_weights(counts, labels, ridge))
    # quantized magnitude so float noise cannot reorder genuine ties
    key = np.round(w * 1e9).astype(np.int64)
    order = sorted(range(len(w)), key=lambda j: (-key[j], j))[: min(k, len(w))]
    return SelectedApis(tuple(int(j) for j in order), {int(j): float(w[j]) for j in order})


# ---------------------------------------------------------------- graphs


@dataclass(frozen=True, eq=False)
class LocalGraph:
    app_id: str
    nodes: np.ndarray  # sorted global API ids
    adj: np.ndarray  # symmetric 0/1, zero diagonal

    @property
    def n(self) -> int:
        return len(self.nodes)

    def edges(self) -> set[tuple[int, int]]:
        """Edges as global-id pairs (i < j)."""
        r, c = np.nonzero(np.triu(self.adj, 1))
        return {(int(self.nodes[i]), int(self.nodes[j])) for i, j in zip(r, c)}


def build_local_graph(app: AppRecord, vocab: ApiVocabulary, selected: SelectedApis) -> LocalGraph:
    index = vocab.index
    keep = selected.position
    block_ids = []
    present: set[int] = set()
    for b in app.blocks:
        ids = sorted({index[c] for c in b.calls if c in index and index[c] in keep})
        block_ids.append(ids)
        present.update(ids)
    nodes = np.array(sorted(present), dtype=np.int64)
    pos = {int(g): i for i, g in enumerate(nodes)}
    adj = np.zeros((len(nodes), len(nodes)), dtype=np.int8)
    for ids in block_ids:
        for a, b in combinations(ids, 2):
            adj[pos[a], pos[b]] = adj[pos[b], pos[a]] = 1
    return LocalGraph(app.app_id, nodes, adj)


@dataclass(frozen=True, eq=False)
class GlobalGraph:
    ids: np.ndarray  # sorted selected global ids; row/col order of adj
    adj: sp.csr_matrix

    @cached_property
    def position(self) -> dict[int, int]:
        return {int(g): p for p, g in enumerate(self.ids)}

    @property
    def n(self) -> int:
        return len(self.ids)

    def edges(self) -> set[tuple[int, int]]:
        coo = sp.triu(self.adj, 1).tocoo()
        return {(int(self.ids[i]), int(self.ids[j])) for i, j in zip(coo.row, coo.col)}

    def restrict(self, nodes) -> np.ndarray:
        """Dense 0/1 sub-adjacency over global ids ``nodes`` (ids absent from the
        graph get empty rows)."""
        pos = self.position
        idx = np.array([pos.get(int(g), -1) for g in nodes], dtype=np.int64)
        out = np.zeros((len(idx), len(idx)), dtype=np.int8)
        ok = np.nonzero(idx >= 0)[0]
        if len(ok):
            sub = self.adj[idx[ok]][:, idx[ok]].toarray()
            out[np.ix_(ok, ok)] = (sub > 0).astype(np.int8)
        return out


def build_global_graph(local_graphs, selected: SelectedApis) -> GlobalGraph:
    ids = selected.sorted_ids
    pos = selected.position
    rows, cols = [], []
    for g in local_graphs:
        r, c = np.nonzero(g.adj)
        rows.extend(pos[int(g.nodes[i])] for i in r)
        cols.extend(pos[int(g.nodes[j])] for j in c)
    n = len(ids)
    adj = sp.csr_matrix((np.ones(len(rows), dtype=np.int8), (rows, cols)), shape=(n, n))
    adj.sum_duplicates()
    adj.data[:] = 1
    adj.setdiag(0)
    adj.eliminate_zeros()
    return GlobalGraph(ids, adj.astype(np.int8))


def write_edge_list(edges, n_nodes: int) -> str:
    lines = [f"nodes {n_nodes}"]
    lines += [f"{i} {j}" for i, j in sorted((min(a, b), max(a, b)) for a, b in edges)]
    return "\n".join(lines) + "\n"


def read_edge_list(text: str) -> tuple[int, list[tuple[int, int]]]:
    lines = text.splitlines()
    head = lines[0].split()
    if len(head) != 2 or head[0] != "nodes":
        raise ValueError("edge list must start with 'nodes <n>'")
    return int(head[1]), [tuple(int(x) for x in ln.split()) for ln in lines[1:] if ln.strip()]


# ---------------------------------------------------------------- centrality


def _as_csr(adj) -> sp.csr_matrix:
    if isinstance(adj, GlobalGraph):
        adj = adj.adj
    A = sp.csr_matrix(adj, dtype=np.float64)
    A.data[:] = 1.0
    A.setdiag(0)
    A.eliminate_zeros()
    return A


def _bfs_chunk(A: sp.csr_matrix, sources: np.ndarray):
    """Level-synchronous BFS from several sources at once.

    Returns (dist, sigma): hop distances (-1 unreachable) and shortest-path
    counts, each shaped (len(sources), n).
    """
    n = A.shape[0]
    m = len(sources)
    dist = np.full((m, n), -1, dtype=np.int64)
    sigma = np.zeros((m, n))
    rows = np.arange(m)
    dist[rows, sources] = 0
    sigma[rows, sources] = 1.0
    frontier = np.zeros((m, n))
    frontier[rows, sources] = 1.0
    level = 0
    while frontier.any():
        level += 1
        reach = np.asarray((A.T @ frontier.T).T)  # path counts into next level
        new = (reach > 0) & (dist < 0)
        dist[new] = level
        frontier = np.where(new, reach, 0.0)
        sigma += frontier
    return dist, sigma


def _betweenness_closeness(A: sp.csr_matrix, chunk: int = 256):
    n = A.shape[0]
    bc = np.zeros(n)
    close = np.zeros(n)
    for start in range(0, n, chunk):
        src = np.arange(start, min(n, start + chunk))
        dist, sigma = _bfs_chunk(A, src)
        delta = np.zeros_like(sigma)
        maxd = dist.max() if dist.size else 0
        for d in range(maxd, 0, -1):
            at_next = dist == d
            coeff = np.where(at_next, (1.0 + delta) / np.where(at_next, sigma, 1.0), 0.0)
            pulled = np.asarray((A @ coeff.T).T)
            at_d = dist == d - 1
            delta += np.where(at_d, sigma * pulled, 0.0)
        delta[np.arange(len(src)), src] = 0.0
        bc += delta.sum(axis=0)
        reach = (dist > 0).sum(axis=1)
        tot = np.where(dist > 0, dist, 0).sum(axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            c = np.where(tot > 0, reach / np.where(tot > 0, tot, 1) * reach / (n - 1), 0.0)
        close[src] = c
    bc /= 2.0  # undirected: each pair counted from both ends
    if n > 2:
        bc /= (n - 1) * (n - 2) / 2.0
    else:
        bc[:] = 0.0
    return bc, close


def _eigenvector(A: sp.csr_matrix, tol: float = 1e-10, max_iter: int = 10000) -> np.ndarray:
    # iterate on A + I: same eigenvectors, and no oscillation on bipartite graphs
    n = A.shape[0]
    x = np.full(n, 1.0 / np.sqrt(n))
    for _ in range(max_iter):
        y = A @ x + x
        y /= np.linalg.norm(y)
        if np.max(np.abs(y - x)) < tol:
            return y
        x = y
    raise NonConvergence(f"eigenvector centrality did not converge in {max_iter} iterations")


def _pagerank(A: sp.csr_matrix, damping: float = 0.85, tol: float = 1e-10, max_iter: int = 10000) -> np.ndarray:
    n = A.shape[0]
    deg = np.asarray(A.sum(axis=1)).ravel()
    dangling = deg == 0
    inv = np.where(dangling, 0.0, 1.0 / np.where(dangling, 1.0, deg))
    x = np.full(n, 1.0 / n)
    for _ in range(max_iter):
        y = damping * (A.T @ (x * inv) + x[dangling].sum() / n) + (1.0 - damping) / n
        if np.abs(y - x).sum() < tol:
            return y
        x = y
    raise NonConvergence(f"pagerank did not converge in {max_iter} iterations")


def centrality_all(adj) -> np.ndarray:
    """All five measures as an (n, 5) array in ``MEASURES`` column order."""
    A = _as_csr(adj)
    n = A.shape[0]
    if n <= 1:
        return np.zeros((n, 5))
    deg = np.asarray(A.sum(axis=1)).ravel() / (n - 1)
    bc, close = _betweenness_closeness(A)
    return np.column_stack([deg, bc, close, _eigenvector(A), _pagerank(A)])


def centrality(graph, measure: str) -> dict[int, float]:
    """One measure keyed by node id (global ids for a GlobalGraph, else 0..n-1)."""
    if measure not in MEASURES:
        raise ValueError(f"unknown centrality measure {measure!r}")
    A = _as_csr(graph)
    n = A.shape[0]
    ids = graph.ids if isinstance(graph, GlobalGraph) else np.arange(n)
    if n <= 1:
        return {int(i): 0.0 for i in ids}
    if measure == "degree":
        vals = np.asarray(A.sum(axis=1)).ravel() / (n - 1)
    elif measure in ("betweenness", "closeness"):
        bc, close = _betweenness_closeness(A)
        vals = bc if measure == "betweenness" else close
    elif measure == "eigenvector":
        vals = _eigenvector(A)
    else:
        vals = _pagerank(A)
    return {int(i): float(v) for i, v in zip(ids, vals)}


@dataclass(frozen=True, eq=False)
class CentralityTable:
    ids: np.ndarray
    values: np.ndarray  # (n, 5), MEASURES column order

    @cached_property
    def position(self) -> dict[int, int]:
        return {int(g): p for p, g in enumerate(self.ids)}

    def __contains__(self, api_id) -> bool:
        return int(api_id) in self.position

    def row(self, api_id: int) -> np.ndarray:
        p = self.position.get(int(api_id))
        if p is None:
            raise UnknownNode(f"API id {api_id} has no centrality entry")
        return self.values[p]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("id",) + MEASURES)
        for g, row in zip(self.ids, self.values):
            w.writerow([int(g)] + [repr(float(v)) for v in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "CentralityTable":
        rows = list(csv.reader(io.StringIO(text)))
        if tuple(rows[0]) != ("id",) + MEASURES:
            raise ValueError("unexpected centrality CSV header")
        body = rows[1:]
        ids = np.array([int(r[0]) for r in body], dtype=np.int64)
        vals = np.array([[float(x) for x in r[1:]] for r in body]).reshape(len(body), 5)
        return cls(ids, vals)


def build_centrality_table(graph: GlobalGraph) -> CentralityTable:
    return CentralityTable(graph.ids.copy(), centrality_all(graph.adj))


def node_features(graph: LocalGraph, table: CentralityTable) -> np.ndarray:
    if graph.n == 0:
        return np.zeros((0, 5))
    return np.stack([table.row(g) for g in graph.nodes])
