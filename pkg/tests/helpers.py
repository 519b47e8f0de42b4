"""Shared oracles for the test suite: finite differences and brute-force
graph centrality on small graphs."""

from __future__ import annotations

from itertools import combinations

import numpy as np

from apigraph import tensor as T
from apigraph.rng import SplitMix64


def max_rel_error(loss_fn, params, h: float = 1e-5, n_points: int = 20, seed: int = 0) -> float:
    """Worst relative error between the tape gradient and central differences
    at ``n_points`` random coordinates across ``params``.

    ``loss_fn`` rebuilds the graph from the current parameter data and returns
    a scalar Tensor.
    """
    params = list(params)
    analytic = T.grad(loss_fn(), params)
    sizes = np.array([p.data.size for p in params])
    rng = SplitMix64(seed).split("gradcheck")
    flat = rng.integers(0, int(sizes.sum()), n_points)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for f in flat:
        k = int(np.searchsorted(offsets, f, side="right") - 1)
        i = int(f - offsets[k])
        p = params[k]
        orig = p.data.flat[i]
        p.data.flat[i] = orig + h
        up = loss_fn().item()
        p.data.flat[i] = orig - h
        down = loss_fn().item()
        p.data.flat[i] = orig
        num = (up - down) / (2 * h)
        ana = analytic[k].flat[i]
        err = abs(num - ana) / max(1e-8, abs(num) + abs(ana))
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------- centrality oracle


def random_graph(rng: SplitMix64, n: int, p: float) -> np.ndarray:
    A = np.zeros((n, n), dtype=np.int8)
    for i, j in combinations(range(n), 2):
        if rng.random() < p:
            A[i, j] = A[j, i] = 1
    return A


def floyd_warshall(A: np.ndarray) -> np.ndarray:
    n = len(A)
    d = np.where(A > 0, 1.0, np.inf)
    np.fill_diagonal(d, 0.0)
    for k in range(n):
        d = np.minimum(d, d[:, [k]] + d[[k], :])
    return d


def all_shortest_paths(A: np.ndarray, d: np.ndarray, s: int, t: int) -> list[list[int]]:
    """Every shortest s-t path, by exhaustive extension along decreasing distance."""
    if not np.isfinite(d[s, t]):
        return []
    paths = [[s]]
    while paths and paths[0][-1] != t:
        nxt = []
        for path in paths:
            u = path[-1]
            for w in range(len(A)):
                if A[u, w] and d[w, t] == d[u, t] - 1:
                    nxt.append(path + [w])
        paths = nxt
    return paths


def brute_centrality(A: np.ndarray) -> np.ndarray:
    """(n, 5) degree, betweenness, closeness, eigenvector, pagerank by direct
    definitions: path enumeration, a dense eigendecomposition and a dense
    linear solve."""
    A = np.asarray(A, dtype=np.float64)
    n = len(A)
    if n <= 1:
        return np.zeros((n, 5))
    deg = A.sum(axis=1) / (n - 1)

    d = floyd_warshall(A)
    bc = np.zeros(n)
    for s, t in combinations(range(n), 2):
        paths = all_shortest_paths(A, d, s, t)
        for v in range(n):
            if v in (s, t) or not paths:
                continue
            bc[v] += sum(v in p for p in paths) / len(paths)
    bc = bc / ((n - 1) * (n - 2) / 2) if n > 2 else np.zeros(n)

    close = np.zeros(n)
    for v in range(n):
        reach = [u for u in range(n) if u != v and np.isfinite(d[v, u])]
        if reach:
            r = len(reach)
            close[v] = r / d[v, reach].sum() * r / (n - 1)

    # limit of power iteration on A + I from the uniform start: projection of
    # the start vector onto the dominant eigenspace
    w, V = np.linalg.eigh(A + np.eye(n))
    top = V[:, w > w.max() - 1e-9]
    x0 = np.full(n, 1.0 / np.sqrt(n))
    eig = top @ (top.T @ x0)
    eig /= np.linalg.norm(eig)

    # PageRank fixed point with dangling mass spread uniformly
    out_deg = A.sum(axis=1)
    S = np.zeros((n, n))
    for j in range(n):
        S[:, j] = A[j] / out_deg[j] if out_deg[j] > 0 else 1.0 / n
    pr = np.linalg.solve(np.eye(n) - 0.85 * S, np.full(n, 0.15 / n))
    return np.column_stack([deg, bc, close, eig, pr])


# ---------------------------------------------------------------- acceptance log

ACCEPTANCE: dict[int, str] = {}


def record_criterion(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
