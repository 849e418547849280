"""Spatial layout of a finite population.

Units live at real-valued locations and are compared with the Chebyshev
(max-coordinate) metric.  This module owns the population container, the
neighbor index used by every kernel sum, contiguity matrices and the
population CSV format.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

__all__ = [
    "Population",
    "SpatialWeights",
    "NeighborIndex",
    "chebyshev_distance",
    "chebyshev_matrix",
    "generate_uniform_population",
    "pairwise_neighbors",
    "cluster_pairs",
    "build_contiguity",
    "build_cluster_contiguity",
    "write_population_csv",
    "read_population_csv",
]


def chebyshev_distance(a, b) -> float:
    """Max over coordinates of ``|a_l - b_l|``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b)))


def chebyshev_matrix(coords: np.ndarray, other: np.ndarray | None = None) -> np.ndarray:
    """Dense matrix of Chebyshev distances (rows of ``coords`` vs rows of ``other``)."""
    coords = np.atleast_2d(np.asarray(coords, dtype=float))
    other = coords if other is None else np.atleast_2d(np.asarray(other, dtype=float))
    out = np.zeros((coords.shape[0], other.shape[0]))
    for col in range(coords.shape[1]):
        np.maximum(out, np.abs(coords[:, col, None] - other[None, :, col]), out=out)
    return out


@dataclass(frozen=True)
class Population:
    """Fixed finite population: locations plus sampling-cluster labels.

    ``cluster_label`` holds labels in ``1..num_clusters``; ``cluster_index``
    is the zero-based version used for array indexing.
    """

    coords: np.ndarray
    cluster_label: np.ndarray
    num_clusters: int
    max_cluster_size: int = 3

    def __post_init__(self):
        coords = np.atleast_2d(np.asarray(self.coords, dtype=float))
        labels = np.asarray(self.cluster_label, dtype=np.int64)
        if coords.shape[0] != labels.shape[0]:
            raise ValueError("coords and cluster_label lengths differ")
        if not np.all(np.isfinite(coords)):
            raise ValueError("coordinates must be finite")
        if labels.size and (labels.min() < 1 or labels.max() > self.num_clusters):
            raise ValueError("cluster labels must lie in 1..num_clusters")
        sizes = np.bincount(labels - 1, minlength=self.num_clusters)
        if np.any(sizes == 0):
            raise ValueError("every cluster must be non-empty")
        if sizes.max(initial=0) > self.max_cluster_size:
            raise ValueError(
                f"cluster of size {sizes.max()} exceeds max_cluster_size={self.max_cluster_size}"
            )
        coords.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "cluster_label", labels)

    @property
    def size(self) -> int:
        return self.coords.shape[0]

    @property
    def dim(self) -> int:
        return self.coords.shape[1]

    @property
    def cluster_index(self) -> np.ndarray:
        return self.cluster_label - 1

    @property
    def cluster_sizes(self) -> np.ndarray:
        return np.bincount(self.cluster_index, minlength=self.num_clusters)


def generate_uniform_population(
    M: int, cluster_size: int = 3, seed: int = 0, order: str = "x"
) -> Population:
    """Draw ``M`` locations uniformly on the square ``[0, sqrt(M)]^2``.

    Units are indexed either in draw order (``order="draw"``) or by
    ascending first coordinate (``order="x"``, the default).  Clusters are
    consecutive runs of ``cluster_size`` units in that index order; the last
    cluster is shorter when ``cluster_size`` does not divide ``M``.
    """
    if M < 1:
        raise ValueError("M must be at least 1")
    if cluster_size < 1:
        raise ValueError("cluster_size must be at least 1")
    if order not in ("x", "draw"):
        raise ValueError(f"unknown unit order {order!r}")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    side = np.sqrt(M)
    coords = rng.uniform(0.0, side, size=(M, 2))
    if order == "x":
        coords = coords[np.argsort(coords[:, 0], kind="stable")]
    labels = np.arange(M) // cluster_size + 1
    return Population(coords, labels, int(labels[-1]), max_cluster_size=cluster_size)


@dataclass(frozen=True)
class NeighborIndex:
    """All unordered unit pairs ``i < j`` within a Chebyshev radius.

    Pairs are sorted by distance so that the pairs within any smaller radius
    form a prefix (see :meth:`count_within`).
    """

    i: np.ndarray
    j: np.ndarray
    dist: np.ndarray
    n: int
    radius: float

    def count_within(self, r: float) -> int:
        return int(np.searchsorted(self.dist, r, side="right"))

    def lists(self) -> list[np.ndarray]:
        """Per-unit sorted neighbor lists (both directions of every pair)."""
        src = np.concatenate([self.i, self.j])
        dst = np.concatenate([self.j, self.i])
        order = np.lexsort((dst, src))
        src, dst = src[order], dst[order]
        bounds = np.searchsorted(src, np.arange(self.n + 1))
        return [dst[bounds[k]:bounds[k + 1]] for k in range(self.n)]

    def __len__(self) -> int:
        return self.i.shape[0]


def pairwise_neighbors(coords, radius: float) -> NeighborIndex:
    """Index every pair of units at Chebyshev distance ``<= radius``."""
    if radius < 0:
        raise ValueError("radius must be non-negative")
    coords = np.atleast_2d(np.asarray(coords, dtype=float))
    n = coords.shape[0]
    if n < 2:
        empty = np.zeros(0, dtype=np.int64)
        return NeighborIndex(empty, empty, np.zeros(0), n, float(radius))
    tree = cKDTree(coords)
    pairs = tree.query_pairs(r=radius, p=np.inf, output_type="ndarray")
    if pairs.size == 0:
        pairs = np.zeros((0, 2), dtype=np.int64)
    i = pairs[:, 0].astype(np.int64)
    j = pairs[:, 1].astype(np.int64)
    dist = np.max(np.abs(coords[i] - coords[j]), axis=1) if i.size else np.zeros(0)
    keep = dist <= radius
    i, j, dist = i[keep], j[keep], dist[keep]
    order = np.lexsort((j, i, dist))
    return NeighborIndex(i[order], j[order], dist[order], n, float(radius))


def cluster_pairs(coords, labels, radius: float):
    """Pairs of distinct clusters whose closest members are within ``radius``.

    ``labels`` are arbitrary integer cluster ids (one per row of ``coords``).
    Returns ``(uniq, g, h, dist)``: the sorted unique labels, zero-based
    positions ``g < h`` into ``uniq`` and the minimum unit distance between
    the two clusters.
    """
    labels = np.asarray(labels)
    uniq, inv = np.unique(labels, return_inverse=True)
    nb = pairwise_neighbors(coords, radius)
    g = inv[nb.i]
    h = inv[nb.j]
    cross = g != h
    g, h, d = g[cross], h[cross], nb.dist[cross]
    lo, hi = np.minimum(g, h), np.maximum(g, h)
    if lo.size == 0:
        empty = np.zeros(0, dtype=np.int64)
        return uniq, empty, empty, np.zeros(0)
    key = lo * uniq.size + hi
    order = np.lexsort((d, key))
    key, d = key[order], d[order]
    first = np.ones(key.size, dtype=bool)
    first[1:] = key[1:] != key[:-1]
    key, d = key[first], d[first]
    return uniq, key // uniq.size, key % uniq.size, d


@dataclass(frozen=True)
class SpatialWeights:
    """Sparse contiguity matrix with zero diagonal.

    ``isolated`` marks rows without any neighbor; under row-standardization
    those rows stay all-zero.
    """

    matrix: sp.csr_matrix
    row_standardized: bool
    cutoff: float
    isolated: np.ndarray = field(repr=False)

    @property
    def shape(self):
        return self.matrix.shape

    def __matmul__(self, other):
        return self.matrix @ other

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray()


def _weights_from_pairs(n, i, j, cutoff, row_standardize) -> SpatialWeights:
    rows = np.concatenate([i, j])
    cols = np.concatenate([j, i])
    A = sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n))
    A.sum_duplicates()
    A.data[:] = 1.0
    deg = np.asarray(A.sum(axis=1)).ravel()
    isolated = deg == 0
    if row_standardize:
        inv = np.zeros(n)
        inv[~isolated] = 1.0 / deg[~isolated]
        A = sp.csr_matrix(sp.diags(inv) @ A)
    return SpatialWeights(A, bool(row_standardize), float(cutoff), isolated)


def build_contiguity(coords, cutoff: float, row_standardize: bool = True) -> SpatialWeights:
    """Unit contiguity: ``(i, j) = 1`` when ``0 < nu(i, j) <= cutoff``.

    ``coords`` may be a :class:`Population` or an ``(n, d)`` array.
    """
    if cutoff <= 0:
        raise ValueError("cutoff must be positive")
    if isinstance(coords, Population):
        coords = coords.coords
    coords = np.atleast_2d(np.asarray(coords, dtype=float))
    nb = pairwise_neighbors(coords, cutoff)
    pos = nb.dist > 0
    return _weights_from_pairs(coords.shape[0], nb.i[pos], nb.j[pos], cutoff, row_standardize)


def build_cluster_contiguity(
    pop: Population, cutoff: float, row_standardize: bool = False
) -> SpatialWeights:
    """G x G cluster contiguity using the minimum member-pair distance."""
    if cutoff <= 0:
        raise ValueError("cutoff must be positive")
    uniq, g, h, d = cluster_pairs(pop.coords, pop.cluster_index, cutoff)
    pos = d > 0
    # clusters absent from uniq cannot occur: every label 1..G is non-empty
    return _weights_from_pairs(pop.num_clusters, uniq[g[pos]], uniq[h[pos]], cutoff, row_standardize)


def write_population_csv(pop: Population, path, indicators=None) -> None:
    """Write ``unit_id,x,y,cluster_id`` (plus ``sampled`` when given)."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        header = ["unit_id", "x", "y", "cluster_id"]
        if indicators is not None:
            header.append("sampled")
        w.writerow(header)
        for k in range(pop.size):
            row = [k, format(pop.coords[k, 0], ".17g"), format(pop.coords[k, 1], ".17g"),
                   int(pop.cluster_label[k])]
            if indicators is not None:
                row.append(int(indicators[k]))
            w.writerow(row)


def read_population_csv(path, max_cluster_size: int | None = None):
    """Inverse of :func:`write_population_csv`.

    Returns the population, plus the ``sampled`` column as an int array when
    the file has one (``None`` otherwise).
    """
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    rows.sort(key=lambda r: int(r["unit_id"]))
    coords = np.array([[float(r["x"]), float(r["y"])] for r in rows])
    labels = np.array([int(r["cluster_id"]) for r in rows], dtype=np.int64)
    G = int(labels.max())
    cap = max_cluster_size or int(np.bincount(labels - 1).max())
    pop = Population(coords, labels, G, max_cluster_size=cap)
    sampled = None
    if rows and "sampled" in rows[0]:
        sampled = np.array([int(r["sampled"]) for r in rows], dtype=np.int64)
    return pop, sampled
