"""Sector discovery from hidden-unit receptive fields.

Each hidden unit's normalised weight profile |W_j| / max |W_j| picks out the
obligors it responds to most strongly; obligors above 1 - epsilon in the same
profile are joined into a clique, edge weights count the hidden units that
agree, and greedy modularity maximisation groups the resulting graph.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.special import comb

from .errors import DataError
from .rbm import RbmParameters

DEFAULT_EPSILON_GRID = np.geomspace(0.01, 0.5, 50)


@dataclass(frozen=True)
class ReceptiveField:
    hidden_index: int
    magnitudes: np.ndarray | None  # None when the weight row is all zero

    @property
    def defined(self) -> bool:
        return self.magnitudes is not None


def receptive_fields(params: RbmParameters) -> list[ReceptiveField]:
    out = []
    for j, row in enumerate(np.abs(params.weights)):
        peak = row.max()
        out.append(ReceptiveField(j, row / peak if peak > 0 else None))
    return out


def _field_matrix(fields) -> np.ndarray:
    rows = [f.magnitudes for f in fields if f.defined]
    if not rows:
        return np.zeros((0, 0))
    return np.vstack(rows)


@dataclass
class SectorGraph:
    weights: np.ndarray  # symmetric integer matrix, zero diagonal
    epsilon: float

    @property
    def n(self) -> int:
        return self.weights.shape[0]

    def edges(self):
        """(l, k, weight) with l < k for every edge."""
        rows, cols = np.nonzero(np.triu(self.weights, 1))
        return [(int(r), int(c), int(self.weights[r, c])) for r, c in zip(rows, cols)]

    def write_edgelist(self, path, ids=None) -> None:
        names = ids if ids is not None else list(range(self.n))
        with open(path, "w") as fh:
            for l, k, w in self.edges():
                fh.write(f"{names[l]} {names[k]} {w}\n")


def build_graph(fields, epsilon: float, n: int | None = None) -> SectorGraph:
    """Clique graph: hidden unit j joins every pair in {i : field_j(i) > 1 - epsilon}."""
    if not 0 < epsilon < 1:
        raise ValueError("epsilon must lie in (0, 1)")
    f = _field_matrix(fields)
    if n is None:
        if f.size == 0:
            raise DataError("no defined receptive fields; pass n explicitly")
        n = f.shape[1]
    if f.size == 0:
        return SectorGraph(np.zeros((n, n), dtype=np.int64), epsilon)
    members = (f > 1 - epsilon).astype(np.int64)
    w = members.T @ members
    np.fill_diagonal(w, 0)
    return SectorGraph(w, epsilon)


@dataclass
class Partition:
    labels: np.ndarray  # block id per vertex; block ids are the smallest member vertex
    modularity: float

    @property
    def blocks(self) -> list[list[int]]:
        out = {}
        for v, b in enumerate(self.labels):
            out.setdefault(int(b), []).append(v)
        return [out[k] for k in sorted(out)]

    @property
    def count(self) -> int:
        return len(self.blocks)

    def singletons(self) -> list[int]:
        return [b[0] for b in self.blocks if len(b) == 1]

    def write_csv(self, path, ids=None) -> None:
        names = ids if ids is not None else list(range(len(self.labels)))
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["obligor", "block"])
            for name, b in zip(names, self.labels):
                out.writerow([name, int(b)])


def modularity(weights, labels, resolution: float = 1.0) -> float:
    """Weighted Newman modularity sum_c [L_c / m - gamma (K_c / 2m)^2]."""
    w = np.asarray(weights, dtype=np.float64)
    labels = np.asarray(labels)
    m = w.sum() / 2
    if m == 0:
        return 0.0
    k = w.sum(axis=1)
    q = 0.0
    for c in np.unique(labels):
        idx = labels == c
        q += w[np.ix_(idx, idx)].sum() / (2 * m) - resolution * (k[idx].sum() / (2 * m)) ** 2
    return float(q)


def detect_communities(graph: SectorGraph) -> Partition:
    """Clauset-Newman-Moore greedy agglomeration (resolution 1).

    Repeatedly merges the pair of adjacent communities with the largest
    modularity gain, while that gain is positive. Gains are compared as exact
    integers, 2 (2m w_ab - K_a K_b), so ties are real ties; they go to the
    pair whose smallest vertex ids come first.
    """
    n = graph.n
    if n == 0:
        raise DataError("graph has no vertices")
    w = np.asarray(graph.weights, dtype=np.int64).copy()
    two_m = int(w.sum())
    labels = np.arange(n)
    if two_m == 0:
        return Partition(labels, 0.0)
    alive = list(range(n))  # community index -> representative, ordered by smallest member
    k = w.sum(axis=1).astype(np.int64)
    while len(alive) > 1:
        sub = w[np.ix_(alive, alive)]
        kk = k[alive]
        gain = 2 * (two_m * sub - np.outer(kk, kk))
        mask = np.triu(sub > 0, 1)
        if not mask.any():
            break
        gain = np.where(mask, gain, np.iinfo(np.int64).min)
        flat = int(np.argmax(gain))  # row-major: first maximum has the smallest ids
        i, j = divmod(flat, len(alive))
        if gain[i, j] <= 0:
            break
        a, b = alive[i], alive[j]
        w[a, :] += w[b, :]
        w[:, a] += w[:, b]
        w[a, a] = 0
        w[b, :] = 0
        w[:, b] = 0
        k[a] += k[b]
        labels[labels == b] = a
        alive.pop(j)
    return Partition(labels, modularity(graph.weights, labels))


def adjusted_rand_index(labels_a, labels_b) -> float:
    a = np.unique(np.asarray(labels_a), return_inverse=True)[1]
    b = np.unique(np.asarray(labels_b), return_inverse=True)[1]
    if a.size != b.size:
        raise DataError("label vectors differ in length")
    table = np.zeros((a.max() + 1, b.max() + 1), dtype=np.int64)
    np.add.at(table, (a, b), 1)
    index = comb(table, 2).sum()
    rows = comb(table.sum(axis=1), 2).sum()
    cols = comb(table.sum(axis=0), 2).sum()
    total = comb(a.size, 2)
    expected = rows * cols / total if total else 0.0
    best = 0.5 * (rows + cols)
    if best == expected:
        return 1.0
    return float((index - expected) / (best - expected))


def recovery_score(partition: Partition, truth) -> float:
    """ARI against ``truth`` after discarding vertices in singleton blocks."""
    keep = np.ones(len(partition.labels), dtype=bool)
    keep[partition.singletons()] = False
    if keep.sum() < 2:
        return 0.0
    return adjusted_rand_index(partition.labels[keep], np.asarray(truth)[keep])


@dataclass
class SweepResult:
    epsilons: np.ndarray
    counts: np.ndarray
    modularities: np.ndarray
    selected: float
    partition: Partition
    graph: SectorGraph

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["epsilon", "communities", "modularity"])
            for e, c, q in zip(self.epsilons, self.counts, self.modularities):
                out.writerow([repr(float(e)), int(c), repr(float(q))])

    def has_interior_minimum(self) -> bool:
        """Minimum count is attained strictly inside the grid with larger counts on both sides."""
        c = self.counts
        lo = c.min()
        hits = np.flatnonzero(c == lo)
        return bool(c[: hits[0]].size and c[hits[-1] + 1:].size and c[0] > lo and c[-1] > lo)


def sweep_epsilon(params_or_fields, epsilon_grid=DEFAULT_EPSILON_GRID) -> SweepResult:
    """Build and partition the graph for each epsilon; pick the fewest communities.

    Ties go to higher modularity, then to the smaller epsilon.
    """
    grid = np.asarray(epsilon_grid, dtype=np.float64)
    if grid.size == 0 or np.any(np.diff(grid) <= 0) or grid[0] <= 0 or grid[-1] >= 1:
        raise ValueError("epsilon grid must be strictly increasing inside (0, 1)")
    if isinstance(params_or_fields, RbmParameters):
        fields = receptive_fields(params_or_fields)
        n = params_or_fields.n_visible
    else:
        fields = list(params_or_fields)
        n = None
    results = []
    for eps in grid:
        g = build_graph(fields, eps, n)
        results.append((g, detect_communities(g)))
    counts = np.array([p.count for _, p in results])
    mods = np.array([p.modularity for _, p in results])
    best = min(range(grid.size), key=lambda i: (counts[i], -mods[i], grid[i]))
    graph, partition = results[best]
    return SweepResult(grid, counts, mods, float(grid[best]), partition, graph)
