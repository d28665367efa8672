"""Graph storage, GCN adjacency normalization, halos and synthetic graphs."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from lmcgnn.exceptions import GraphFormatError

__all__ = [
    "Graph",
    "NormalizedAdjacency",
    "Halo",
    "load_graph",
    "save_graph",
    "normalize_adjacency",
    "normalize_induced",
    "halo_of",
    "generate_sbm",
]


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected graph in CSR form with node features and labels.

    ``features`` is stored row-per-node, shape ``(n, d_x)``.
    """

    indptr: np.ndarray
    indices: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    labeled_mask: np.ndarray

    def __post_init__(self):
        n = len(self.indptr) - 1
        if n <= 0:
            raise ValueError("graph must have at least one node")
        for name in ("indptr", "indices", "features", "labels", "labeled_mask"):
            getattr(self, name).setflags(write=False)
        if self.features.shape[0] != n:
            raise ValueError("feature row count mismatch")
        if self.labels.shape != (n,) or self.labeled_mask.shape != (n,):
            raise ValueError("labels and labeled_mask must have one entry per node")
        if not self.labeled_mask.any():
            raise ValueError("at least one node must be labeled")
        if self.labels.size and self.labels.min() < 0:
            raise ValueError("class ids must be non-negative")

    @property
    def n(self) -> int:
        return len(self.indptr) - 1

    @property
    def d_x(self) -> int:
        return self.features.shape[1]

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1

    @property
    def n_edges(self) -> int:
        return len(self.indices) // 2

    @property
    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    @property
    def labeled_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.labeled_mask)

    def neighbors(self, i: int) -> np.ndarray:
        return self.indices[self.indptr[i] : self.indptr[i + 1]]

    def adjacency(self) -> sp.csr_matrix:
        data = np.ones(len(self.indices))
        return sp.csr_matrix((data, self.indices, self.indptr), shape=(self.n, self.n))

    @classmethod
    def from_edges(cls, n, edges, features, labels, labeled_mask) -> "Graph":
        """Build a graph from an iterable of ``(u, v)`` pairs.

        Self-loops are dropped; reversed and repeated pairs collapse into one
        undirected edge.
        """
        edges = np.asarray(list(edges) if not isinstance(edges, np.ndarray) else edges,
                           dtype=np.int64).reshape(-1, 2)
        if edges.size and (edges.min() < 0 or edges.max() >= n):
            raise ValueError("node id out of range")
        edges = edges[edges[:, 0] != edges[:, 1]]
        both = np.concatenate([edges, edges[:, ::-1]])
        adj = sp.coo_matrix(
            (np.ones(len(both)), (both[:, 0], both[:, 1])), shape=(n, n)
        ).tocsr()
        adj.sum_duplicates()
        adj.sort_indices()
        return cls(
            indptr=adj.indptr.astype(np.int64),
            indices=adj.indices.astype(np.int64),
            features=np.asarray(features, dtype=np.float64).reshape(n, -1),
            labels=np.asarray(labels, dtype=np.int64),
            labeled_mask=np.asarray(labeled_mask, dtype=bool),
        )

    def edge_list(self) -> np.ndarray:
        """Each undirected edge once, as ``(u, v)`` with ``u < v``."""
        rows = np.repeat(np.arange(self.n), self.degrees)
        keep = rows < self.indices
        return np.column_stack([rows[keep], self.indices[keep]])


@dataclass(frozen=True, eq=False)
class NormalizedAdjacency:
    """Self-loop augmented symmetric normalization ``D^-1/2 (A + I) D^-1/2``."""

    matrix: sp.csr_matrix

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    def diagonal(self) -> np.ndarray:
        return self.matrix.diagonal()

    def coefficient(self, i: int, j: int) -> float:
        return float(self.matrix[i, j])

    def submatrix(self, rows: np.ndarray, cols: np.ndarray) -> sp.csr_matrix:
        return self.matrix[rows][:, cols].tocsr()


@dataclass(frozen=True)
class Halo:
    in_batch: np.ndarray
    boundary: np.ndarray
    closure: np.ndarray = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "closure", np.union1d(self.in_batch, self.boundary))

    @property
    def local_order(self) -> np.ndarray:
        """Closure ordered in-batch first, then boundary."""
        return np.concatenate([self.in_batch, self.boundary])


def _self_loop_normalize(adj: sp.spmatrix) -> sp.csr_matrix:
    n = adj.shape[0]
    aug = (adj + sp.identity(n, format="csr")).tocsr()
    aug.sort_indices()
    inv_sqrt = 1.0 / np.sqrt(np.asarray(aug.sum(axis=1)).ravel())
    rows = np.repeat(np.arange(n), np.diff(aug.indptr))
    aug.data = inv_sqrt[rows] * inv_sqrt[aug.indices]
    return aug


def normalize_adjacency(g: Graph) -> NormalizedAdjacency:
    """Coefficients ``1/sqrt((deg(i)+1)(deg(j)+1))`` on edges and the diagonal."""
    return NormalizedAdjacency(_self_loop_normalize(g.adjacency()))


def normalize_induced(g: Graph, nodes: np.ndarray) -> NormalizedAdjacency:
    """Normalized adjacency of the subgraph induced by ``nodes`` (local indexing).

    Degrees are counted inside the subgraph, so edges leaving ``nodes`` are
    pruned rather than carried as missing mass.
    """
    nodes = np.asarray(nodes, dtype=np.int64)
    sub = g.adjacency()[nodes][:, nodes]
    return NormalizedAdjacency(_self_loop_normalize(sub))


def halo_of(g: Graph, in_batch) -> Halo:
    in_batch = np.unique(np.asarray(in_batch, dtype=np.int64))
    if in_batch.size == 0:
        raise ValueError("in_batch must be nonempty")
    if in_batch[0] < 0 or in_batch[-1] >= g.n:
        raise ValueError("node id out of range")
    neigh = np.concatenate(
        [g.indices[g.indptr[i] : g.indptr[i + 1]] for i in in_batch]
    )
    boundary = np.setdiff1d(neigh, in_batch)
    return Halo(in_batch=in_batch, boundary=boundary)


def generate_sbm(
    blocks: int,
    nodes_per_block: int,
    p_in: float,
    p_out: float,
    d_x: int,
    classes: int,
    label_fraction: float,
    seed: int,
) -> Graph:
    """Sample a stochastic block model graph with class-informative features.

    Node ``i`` belongs to block ``i // nodes_per_block`` and class
    ``block % classes``. Features are the class one-hot (first ``classes``
    coordinates) plus N(0, 0.5^2) noise.
    """
    for p in (p_in, p_out):
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"invalid probability {p}")
    if not 0.0 <= label_fraction <= 1.0:
        raise ValueError(f"invalid label fraction {label_fraction}")
    n = blocks * nodes_per_block
    if n <= 0:
        raise ValueError("graph must have at least one node")
    if n < classes:
        raise ValueError("need at least as many nodes as classes")
    if d_x < classes:
        raise ValueError("d_x must be >= classes to hold the one-hot signal")

    rng = np.random.default_rng(seed)
    block = np.arange(n) // nodes_per_block
    iu, ju = np.triu_indices(n, k=1)
    prob = np.where(block[iu] == block[ju], p_in, p_out)
    keep = rng.random(len(iu)) < prob
    edges = np.column_stack([iu[keep], ju[keep]])

    labels = block % classes
    features = rng.normal(0.0, 0.5, size=(n, d_x))
    features[np.arange(n), labels] += 1.0

    n_labeled = math.ceil(label_fraction * n)
    mask = np.zeros(n, dtype=bool)
    mask[rng.permutation(n)[:n_labeled]] = True
    return Graph.from_edges(n, edges, features, labels, mask)


def _data_lines(path: Path):
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            yield lineno, line


def load_graph(edge_list_path, features_path, labels_path) -> Graph:
    """Read the three plain-text files written by :func:`save_graph`."""
    features = []
    for lineno, line in _data_lines(Path(features_path)):
        try:
            features.append([float(tok) for tok in line.split(",")])
        except ValueError:
            raise GraphFormatError(features_path, lineno, line) from None
    if not features:
        raise GraphFormatError(features_path, 0, "", "no feature rows")
    if len({len(r) for r in features}) != 1:
        raise ValueError("feature rows have inconsistent width")

    labels, flags = [], []
    for lineno, line in _data_lines(Path(labels_path)):
        parts = line.split(",")
        try:
            cls, flag = int(parts[0]), int(parts[1])
            if len(parts) != 2 or flag not in (0, 1):
                raise ValueError
        except (ValueError, IndexError):
            raise GraphFormatError(labels_path, lineno, line) from None
        labels.append(cls)
        flags.append(bool(flag))

    n = len(labels)
    if len(features) != n:
        raise ValueError(
            f"feature row count mismatch: {len(features)} rows for {n} nodes"
        )
    edges = []
    for lineno, line in _data_lines(Path(edge_list_path)):
        parts = line.split()
        try:
            u, v = int(parts[0]), int(parts[1])
            if len(parts) != 2:
                raise ValueError
        except (ValueError, IndexError):
            raise GraphFormatError(edge_list_path, lineno, line) from None
        if not (0 <= u < n and 0 <= v < n):
            raise GraphFormatError(
                edge_list_path, lineno, line, f"node id out of range (n={n})"
            )
        edges.append((u, v))

    return Graph.from_edges(n, edges, features, labels, flags)


def save_graph(g: Graph, edge_list_path, features_path, labels_path) -> None:
    with open(edge_list_path, "w") as fh:
        for u, v in g.edge_list():
            fh.write(f"{u} {v}\n")
    with open(features_path, "w") as fh:
        for row in g.features:
            fh.write(",".join(repr(float(x)) for x in row) + "\n")
    with open(labels_path, "w") as fh:
        for cls, flag in zip(g.labels, g.labeled_mask):
            fh.write(f"{cls},{int(flag)}\n")
