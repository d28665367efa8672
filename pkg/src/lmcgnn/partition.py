"""Balanced BFS partitioning, cluster mini-batch sampling and reweighting."""

from __future__ import annotations

import itertools
import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from lmcgnn.graph import Graph, Halo, halo_of

__all__ = [
    "Partition",
    "MiniBatch",
    "partition_bfs",
    "sample_batch",
    "make_batch",
    "enumerate_batches",
    "save_partition",
    "load_partition",
]

MAX_ENUMERATED_BATCHES = 10**6


@dataclass(frozen=True, eq=False)
class Partition:
    assignment: np.ndarray
    clusters: tuple

    @property
    def B(self) -> int:
        return len(self.clusters)

    @property
    def n(self) -> int:
        return len(self.assignment)

    @classmethod
    def from_assignment(cls, assignment) -> "Partition":
        assignment = np.asarray(assignment, dtype=np.int64)
        B = int(assignment.max()) + 1
        clusters = tuple(np.flatnonzero(assignment == b) for b in range(B))
        if any(c.size == 0 for c in clusters):
            raise ValueError("cluster ids must be contiguous 0..B-1 with no empty cluster")
        return cls(assignment=assignment, clusters=clusters)


@dataclass(frozen=True, eq=False)
class MiniBatch:
    """A sampled union of clusters with its halo and reweighting factors.

    ``w_theta = B|V_B| / (c|V|)`` and ``w_loss = B|V_LB| / (c|V_L|)`` make the
    cluster-sampled gradient sums unbiased for the full-graph sums.
    """

    cluster_ids: np.ndarray
    halo: Halo
    labeled_in_batch: np.ndarray
    w_theta: float
    w_loss: float
    n_total: int
    n_labeled_total: int

    @property
    def nodes(self) -> np.ndarray:
        return self.halo.in_batch

    @property
    def boundary(self) -> np.ndarray:
        return self.halo.boundary

    @property
    def theta_scale(self) -> float:
        """Factor applied to the in-batch sum in the layer-weight gradient."""
        return self.w_theta * self.n_total / len(self.nodes)

    @property
    def loss_scale(self) -> float:
        """Factor applied to the in-batch sum of per-node loss gradients."""
        if len(self.labeled_in_batch) == 0:
            return 0.0
        return self.w_loss / len(self.labeled_in_batch)


def partition_bfs(g: Graph, B: int, seed: int = 0) -> Partition:
    """Split the nodes into ``B`` connected-ish parts of near-equal size.

    Each part starts at the lowest-id unassigned node and grows breadth-first
    until it holds ``ceil(remaining / remaining_parts)`` nodes; when the
    frontier runs dry the part restarts from the next lowest unassigned node.
    The seed only permutes the order in which a node's neighbors join the
    frontier.
    """
    n = g.n
    if not 1 <= B <= n:
        raise ValueError(f"cluster count B={B} must satisfy 1 <= B <= n={n}")
    rng = np.random.default_rng(seed)
    assignment = np.full(n, -1, dtype=np.int64)
    next_start = 0
    remaining = n
    for part in range(B):
        target = math.ceil(remaining / (B - part))
        size = 0
        queue: deque = deque()
        while size < target:
            if not queue:
                while assignment[next_start] >= 0:
                    next_start += 1
                assignment[next_start] = part
                size += 1
                queue.append(next_start)
                continue
            u = queue.popleft()
            neigh = g.neighbors(u)
            neigh = neigh[assignment[neigh] < 0]
            for v in rng.permutation(neigh):
                if size >= target:
                    break
                assignment[v] = part
                size += 1
                queue.append(v)
        remaining -= size
    return Partition.from_assignment(assignment)


def make_batch(p: Partition, g: Graph, cluster_ids) -> MiniBatch:
    cluster_ids = np.sort(np.asarray(cluster_ids, dtype=np.int64))
    c = len(cluster_ids)
    if c == 0 or len(np.unique(cluster_ids)) != c:
        raise ValueError("cluster ids must be nonempty and distinct")
    if cluster_ids[0] < 0 or cluster_ids[-1] >= p.B:
        raise ValueError("cluster id out of range")
    nodes = np.sort(np.concatenate([p.clusters[b] for b in cluster_ids]))
    halo = halo_of(g, nodes)
    labeled = nodes[g.labeled_mask[nodes]]
    n_lab = int(g.labeled_mask.sum())
    return MiniBatch(
        cluster_ids=cluster_ids,
        halo=halo,
        labeled_in_batch=labeled,
        w_theta=p.B * len(nodes) / (c * g.n),
        w_loss=p.B * len(labeled) / (c * n_lab),
        n_total=g.n,
        n_labeled_total=n_lab,
    )


def sample_batch(p: Partition, g: Graph, c: int, rng: np.random.Generator) -> MiniBatch:
    """Draw ``c`` distinct clusters uniformly without replacement."""
    if not 1 <= c <= p.B:
        raise ValueError(f"c={c} must satisfy 1 <= c <= B={p.B}")
    return make_batch(p, g, rng.choice(p.B, size=c, replace=False))


def enumerate_batches(p: Partition, g: Graph, c: int) -> list:
    """Every ``c``-subset of clusters, lexicographically, as a MiniBatch."""
    if not 1 <= c <= p.B:
        raise ValueError(f"c={c} must satisfy 1 <= c <= B={p.B}")
    if math.comb(p.B, c) > MAX_ENUMERATED_BATCHES:
        raise ValueError(f"C({p.B},{c}) exceeds {MAX_ENUMERATED_BATCHES} batches")
    return [make_batch(p, g, ids) for ids in itertools.combinations(range(p.B), c)]


def save_partition(p: Partition, path) -> None:
    with open(path, "w") as fh:
        fh.writelines(f"{b}\n" for b in p.assignment)


def load_partition(path) -> Partition:
    with open(path) as fh:
        return Partition.from_assignment([int(line) for line in fh if line.strip()])
