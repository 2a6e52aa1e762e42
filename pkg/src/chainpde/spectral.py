"""Spectral clustering of the chainlet graph and Fiedler ordering of clusters."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.sparse.csgraph import connected_components

from .chainlet_data import ALL_BUCKETS, N_BUCKETS, ChainletBucket, _open_rows, _parse_int, bucket_grid_coords
from .errors import DataError, DisconnectedSupergraph, IngestError, ParameterError

KMEANS_MAX_ITER = 300
KMEANS_TOL = 1e-9


def _weights(graph) -> np.ndarray:
    return np.asarray(getattr(graph, "weights", graph), dtype=np.float64)


def laplacian(graph, kind: str = "unnormalized") -> np.ndarray:
    """L = D - W, or I - D^-1/2 W D^-1/2 with isolated nodes left as identity rows."""
    w = _weights(graph)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise ValueError("weight matrix must be square")
    if (w < 0).any():
        raise ValueError("graph weights must be nonnegative")
    if not np.array_equal(w, w.T):
        raise ValueError("graph weights must be symmetric")
    deg = w.sum(axis=1)
    if kind == "unnormalized":
        return np.diag(deg) - w
    if kind == "symmetric":
        inv_sqrt = np.zeros_like(deg)
        pos = deg > 0
        inv_sqrt[pos] = 1.0 / np.sqrt(deg[pos])
        return np.eye(w.shape[0]) - inv_sqrt[:, None] * w * inv_sqrt[None, :]
    raise ValueError(f"unknown laplacian kind {kind!r}")


def eigh_checked(mat: np.ndarray):
    """Symmetric eigendecomposition, ascending, with a residual check on every pair."""
    vals, vecs = np.linalg.eigh(mat)
    scale = max(np.abs(mat).sum(axis=1).max(), np.finfo(float).tiny)
    resid = np.abs(mat @ vecs - vecs * vals[None, :]).max() if mat.size else 0.0
    if resid > 1e-8 * scale:
        raise ArithmeticError(f"eigensolver residual {resid:.3g} exceeds tolerance")
    return vals, vecs


@dataclass(frozen=True, eq=False)
class Clustering:
    k: int
    assignment: np.ndarray
    seed: int = 0

    def __post_init__(self):
        a = np.asarray(self.assignment, dtype=np.int64)
        if a.ndim != 1:
            raise DataError("assignment must be one-dimensional")
        if a.size and (a.min() < 0 or a.max() >= self.k):
            raise DataError("cluster ids must lie in [0, k)")
        if np.unique(a).size != self.k:
            raise DataError("every cluster id must be used at least once")
        a.setflags(write=False)
        object.__setattr__(self, "assignment", a)

    def members(self, cluster_id: int) -> np.ndarray:
        return np.nonzero(self.assignment == cluster_id)[0]

    def __eq__(self, other):
        if not isinstance(other, Clustering):
            return NotImplemented
        return self.k == other.k and np.array_equal(self.assignment, other.assignment)


@dataclass(frozen=True, eq=False)
class ClusterEmbedding:
    """Clusters ordered along a line at unit spacing, positions 1..n."""

    order: tuple[int, ...]

    def __post_init__(self):
        order = tuple(int(c) for c in self.order)
        if sorted(order) != list(range(len(order))):
            raise DataError("embedding order must be a permutation of 0..n-1")
        object.__setattr__(self, "order", order)

    @property
    def n(self) -> int:
        return len(self.order)

    @property
    def positions(self) -> np.ndarray:
        return np.arange(1, self.n + 1, dtype=np.float64)

    @property
    def L1(self) -> float:
        return 1.0

    @property
    def L2(self) -> float:
        return float(self.n)

    def position_of(self, cluster_id: int) -> float:
        return float(self.order.index(cluster_id) + 1)

    def reversed(self) -> "ClusterEmbedding":
        return ClusterEmbedding(self.order[::-1])

    def __eq__(self, other):
        return isinstance(other, ClusterEmbedding) and self.order == other.order


def kmeans(points: np.ndarray, k: int, seed: int = 0, max_iter: int = KMEANS_MAX_ITER, tol: float = KMEANS_TOL):
    """Lloyd iterations from a seeded farthest-point start.

    The first centre is drawn with ``seed``; each further centre is the point
    farthest from the ones chosen so far (lowest index on ties).
    """
    x = np.asarray(points, dtype=np.float64)
    n = x.shape[0]
    if not 1 <= k <= n:
        raise ParameterError(f"k={k} must lie in [1, {n}]")
    rng = np.random.default_rng(seed)
    chosen = [int(rng.integers(n))]
    dmin = ((x - x[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        nxt = int(np.argmax(dmin))
        chosen.append(nxt)
        dmin = np.minimum(dmin, ((x - x[nxt]) ** 2).sum(axis=1))
    centers = x[chosen].copy()
    labels = np.zeros(n, dtype=np.int64)
    for _ in range(max_iter):
        d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        labels = np.argmin(d2, axis=1)
        new = centers.copy()
        for c in range(k):
            mask = labels == c
            if mask.any():
                new[c] = x[mask].mean(axis=0)
            else:
                # refill an empty cluster with the worst-served point
                far = int(np.argmax(d2[np.arange(n), labels]))
                new[c] = x[far]
                labels[far] = c
        shift = np.sqrt(((new - centers) ** 2).sum(axis=1)).max()
        centers = new
        if shift < tol:
            break
    d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    labels = np.argmin(d2, axis=1)
    # Lloyd can still leave a centre without points; force every label in use
    for c in range(k):
        if not (labels == c).any():
            counts = np.bincount(labels, minlength=k)
            donors = np.nonzero(counts[labels] > 1)[0]
            far = donors[int(np.argmax(d2[donors, labels[donors]]))]
            labels[far] = c
    return labels, centers


def _relabel_by_first_member(labels: np.ndarray) -> np.ndarray:
    uniq, first = np.unique(labels, return_index=True)
    lut = np.empty(uniq.max() + 1, dtype=np.int64)
    lut[uniq[np.argsort(first)]] = np.arange(uniq.size)
    return lut[labels]


def spectral_cluster(graph, k: int = 10, seed: int = 0, kind: str = "symmetric", coords=None) -> Clustering:
    """Normalized spectral clustering (Ng-Jordan-Weiss) on the non-isolated nodes.

    Isolated nodes join the cluster of their nearest non-isolated node in
    Manhattan distance on ``coords`` (the (inputs, outputs) grid for the
    400-bucket graph, the node index otherwise), lower cluster id on ties.
    Cluster ids are numbered by their lowest non-isolated member.
    """
    w = _weights(graph)
    n = w.shape[0]
    if coords is None:
        coords = bucket_grid_coords() if n == N_BUCKETS else np.arange(n)[:, None]
    coords = np.asarray(coords)
    active = np.nonzero(w.sum(axis=1) > 0)[0]
    if k < 1:
        raise ParameterError("k must be positive")
    if k == 1:
        return Clustering(1, np.zeros(n, dtype=np.int64), seed)
    if k > active.size:
        raise ParameterError(f"k={k} exceeds the {active.size} non-isolated nodes")
    sub = w[np.ix_(active, active)]
    lap = laplacian(sub, kind)
    _, vecs = eigh_checked(lap)
    u = vecs[:, :k]
    if kind == "symmetric":
        norms = np.linalg.norm(u, axis=1)
        u = u / np.where(norms > 0, norms, 1.0)[:, None]
    sub_labels, _ = kmeans(u, k, seed)
    sub_labels = _relabel_by_first_member(sub_labels)
    labels = np.full(n, -1, dtype=np.int64)
    labels[active] = sub_labels
    act_coords = coords[active]
    for node in np.setdiff1d(np.arange(n), active):
        dist = np.abs(act_coords - coords[node]).sum(axis=1)
        labels[node] = sub_labels[dist == dist.min()].min()
    return Clustering(k, labels, seed)


def cluster_supergraph(graph, clustering: Clustering) -> np.ndarray:
    """k x k matrix of summed edge weight between clusters, zero diagonal."""
    w = _weights(graph)
    a = clustering.assignment
    if a.shape[0] != w.shape[0]:
        raise DataError("clustering does not match graph size")
    ind = np.zeros((w.shape[0], clustering.k))
    ind[np.arange(w.shape[0]), a] = 1.0
    sg = ind.T @ w @ ind
    sg = 0.5 * (sg + sg.T)
    np.fill_diagonal(sg, 0.0)
    return sg


def fiedler_embedding(supergraph) -> ClusterEmbedding:
    w = _weights(supergraph)
    n = w.shape[0]
    if n == 1:
        return ClusterEmbedding((0,))
    ncomp, comp = connected_components(w > 0, directed=False)
    if ncomp > 1:
        raise DisconnectedSupergraph([np.nonzero(comp == c)[0] for c in range(ncomp)])
    _, vecs = eigh_checked(laplacian(w, "unnormalized"))
    v = vecs[:, 1].copy()
    mag = np.abs(v)
    lead = int(np.nonzero(mag >= mag.max() * (1 - 1e-9))[0].min())
    if v[lead] < 0:
        v = -v
    key = np.round(v, 12)
    order = np.lexsort((np.arange(n), key))
    return ClusterEmbedding(tuple(int(i) for i in order))


def algebraic_connectivity(supergraph) -> float:
    vals, _ = eigh_checked(laplacian(_weights(supergraph), "unnormalized"))
    return float(vals[1]) if vals.size > 1 else 0.0


def write_clustering(clustering: Clustering, path) -> None:
    if clustering.assignment.shape[0] != N_BUCKETS:
        raise ValueError("clustering export needs all 400 buckets")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["inputs", "outputs", "cluster_id"])
        for b, c in zip(ALL_BUCKETS, clustering.assignment):
            w.writerow([b.inputs, b.outputs, int(c)])


def read_clustering(path) -> Clustering:
    fh, reader, cols = _open_rows(path, ("inputs", "outputs", "cluster_id"))
    a = np.full(N_BUCKETS, -1, dtype=np.int64)
    with fh:
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            b = ChainletBucket(
                _parse_int(row[cols["inputs"]], "inputs", lineno, path),
                _parse_int(row[cols["outputs"]], "outputs", lineno, path),
            )
            if not (1 <= b.inputs <= 20 and 1 <= b.outputs <= 20):
                raise IngestError("bucket outside the 20x20 grid", line=lineno, path=path)
            a[b.index] = _parse_int(row[cols["cluster_id"]], "cluster_id", lineno, path)
    if (a < 0).any():
        raise IngestError(f"clustering covers only {(a >= 0).sum()} of 400 buckets", path=path)
    return Clustering(int(a.max()) + 1, a)


def write_embedding(embedding: ClusterEmbedding, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cluster_id", "position"])
        for pos, c in enumerate(embedding.order, start=1):
            w.writerow([c, pos])


def read_embedding(path) -> ClusterEmbedding:
    fh, reader, cols = _open_rows(path, ("cluster_id", "position"))
    rows = []
    with fh:
        for lineno, row in enumerate(reader, start=2):
            if row:
                rows.append(
                    (
                        _parse_int(row[cols["position"]], "position", lineno, path),
                        _parse_int(row[cols["cluster_id"]], "cluster_id", lineno, path),
                    )
                )
    rows.sort()
    if [p for p, _ in rows] != list(range(1, len(rows) + 1)):
        raise DataError(f"{path}: positions must be 1..n at unit spacing")
    return ClusterEmbedding(tuple(c for _, c in rows))
