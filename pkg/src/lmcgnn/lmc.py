"""Subgraph-wise estimators with historical values and local message compensation.

All per-step work happens on a *local view*: the closure of the batch
(in-batch nodes first, then the 1-hop boundary) together with the
normalized adjacency restricted to those rows and columns. Rows of the
local products that belong to in-batch nodes see every neighbor; boundary
rows see only the neighbors inside the closure, which is exactly the
incomplete up-to-date computation.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from lmcgnn.backward import GradientSet, backward_sgd_gradients, full_backward, full_gradients
from lmcgnn.exceptions import DivergenceError
from lmcgnn.graph import Graph, NormalizedAdjacency, normalize_adjacency, normalize_induced
from lmcgnn.model import LayerState, ModelParams, forward_full, node_loss_grads, relu_grad
from lmcgnn.partition import MiniBatch, Partition, sample_batch

__all__ = [
    "EstimatorMode",
    "BetaSchedule",
    "default_schedule",
    "SCORES",
    "TouchLog",
    "HistoricalStore",
    "TempValues",
    "LocalView",
    "local_view",
    "beta_for",
    "betas_for_boundary",
    "forward_compensated",
    "backward_compensated",
    "minibatch_gradients",
    "Engine",
    "StepResult",
    "lmc_step",
]


class EstimatorMode(str, enum.Enum):
    FULL_BATCH = "FullBatch"
    BACKWARD_SGD = "BackwardSGD"
    CLUSTER = "Cluster"
    GAS = "GAS"
    LMC = "LMC"
    LMC_FORWARD_ONLY = "LMC_ForwardOnly"

    @classmethod
    def parse(cls, value) -> "EstimatorMode":
        if isinstance(value, cls):
            return value
        for mode in cls:
            if mode.value.lower() == str(value).lower():
                return mode
        raise ValueError(f"unknown mode {value!r}; expected one of {[m.value for m in cls]}")

    @property
    def uses_store(self) -> bool:
        return self in (EstimatorMode.GAS, EstimatorMode.LMC, EstimatorMode.LMC_FORWARD_ONLY)


SCORES = {
    "x^2": lambda x: x * x,
    "2x-x^2": lambda x: 2.0 * x - x * x,
    "x": lambda x: x,
    "1": lambda x: np.ones_like(x),
    "sin(x)": np.sin,
}


@dataclass(frozen=True)
class BetaSchedule:
    """``beta_i = alpha * score(deg_local(i) / deg_global(i))``."""

    alpha: float = 0.4
    score_kind: str = "2x-x^2"

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha={self.alpha} must lie in [0, 1]")
        if self.score_kind not in SCORES:
            raise ValueError(f"unknown score {self.score_kind!r}; expected one of {list(SCORES)}")

    def __call__(self, ratio):
        ratio = np.asarray(ratio, dtype=np.float64)
        return np.clip(self.alpha * SCORES[self.score_kind](ratio), 0.0, 1.0)


def default_schedule(B: int, c: int) -> BetaSchedule:
    if c >= B / 2:
        return BetaSchedule(alpha=1.0, score_kind="1")
    return BetaSchedule(alpha=0.4, score_kind="2x-x^2")


class TouchLog:
    """Records every node id whose data a step reads or writes."""

    def __init__(self):
        self.reads: set = set()
        self.writes: set = set()

    def read(self, ids):
        self.reads.update(int(i) for i in np.atleast_1d(ids))

    def write(self, ids):
        self.writes.update(int(i) for i in np.atleast_1d(ids))

    @property
    def touched(self) -> set:
        return self.reads | self.writes

    def __len__(self):
        return len(self.touched)


class HistoricalStore:
    """Per-node historical embeddings, preactivations and auxiliary variables.

    Lists are indexed by layer; unused slots are ``None`` (``H_bar[0]``,
    ``V_bar[0]`` and ``V_bar[L]``).
    """

    def __init__(self, n: int, layer_dims):
        self.n = n
        self.layer_dims = tuple(int(d) for d in layer_dims)
        L = len(self.layer_dims)
        self.L = L
        self.H_bar = [None] + [np.zeros((n, d)) for d in self.layer_dims]
        self.z_bar = [None] + [np.zeros((n, d)) for d in self.layer_dims]
        self.V_bar = [None] + [np.zeros((n, d)) for d in self.layer_dims[:-1]] + [None]
        self.log: TouchLog | None = None

    @classmethod
    def for_model(cls, n: int, params: ModelParams) -> "HistoricalStore":
        return cls(n, params.dims[1:-1])

    def _note_read(self, ids):
        if self.log is not None:
            self.log.read(ids)

    def _note_write(self, ids):
        if self.log is not None:
            self.log.write(ids)

    def read_H(self, l, ids):
        self._note_read(ids)
        return self.H_bar[l][ids]

    def read_z(self, l, ids):
        self._note_read(ids)
        return self.z_bar[l][ids]

    def read_V(self, l, ids):
        self._note_read(ids)
        return self.V_bar[l][ids]

    def write_H(self, l, ids, H, Z):
        self._note_write(ids)
        self.H_bar[l][ids] = H
        self.z_bar[l][ids] = Z

    def write_V(self, l, ids, V):
        self._note_write(ids)
        self.V_bar[l][ids] = V

    def warm_start(self, g: Graph, adj: NormalizedAdjacency, params: ModelParams) -> None:
        """Fill every slot with exact values at ``params``."""
        state, aux, _, _ = full_backward(g, adj, params)
        for l in range(1, self.L + 1):
            self.H_bar[l][:] = state.embeddings[l]
            self.z_bar[l][:] = state.preactivations[l]
            if l < self.L:
                self.V_bar[l][:] = aux.V[l]

    def arrays(self) -> list:
        return [a for group in (self.H_bar, self.V_bar, self.z_bar) for a in group if a is not None]

    def copy(self) -> "HistoricalStore":
        new = HistoricalStore.__new__(HistoricalStore)
        new.n, new.layer_dims, new.L, new.log = self.n, self.layer_dims, self.L, None
        new.H_bar = [None if a is None else a.copy() for a in self.H_bar]
        new.z_bar = [None if a is None else a.copy() for a in self.z_bar]
        new.V_bar = [None if a is None else a.copy() for a in self.V_bar]
        return new

    def save(self, path) -> None:
        """Text snapshot: header ``L d_1 ... d_L n``, then H_bar^1..L, V_bar^1..L-1, z_bar^1..L."""
        with open(path, "w") as fh:
            fh.write(" ".join(str(x) for x in (self.L, *self.layer_dims, self.n)) + "\n")
            for mat in self.arrays():
                for row in mat:
                    fh.write(",".join(repr(float(x)) for x in row) + "\n")

    @classmethod
    def load(cls, path) -> "HistoricalStore":
        with open(path) as fh:
            header = [int(t) for t in fh.readline().split()]
            L, dims, n = header[0], header[1:-1], header[-1]
            if len(dims) != L:
                raise ValueError("store header does not match layer count")
            rows = [line for line in fh if line.strip()]
        store = cls(n, dims)
        pos = 0
        for mat in store.arrays():
            block = rows[pos : pos + n]
            if len(block) != n:
                raise ValueError("store snapshot truncated")
            mat[:] = np.array([[float(x) for x in r.split(",")] for r in block]).reshape(mat.shape)
            pos += n
        return store


@dataclass(eq=False)
class LocalView:
    """Batch closure with in-batch nodes first, plus its restricted adjacency."""

    batch: MiniBatch
    order: np.ndarray
    n_batch: int
    A: object  # scipy CSR, local indexing
    X: np.ndarray
    deg_local: np.ndarray
    deg_global: np.ndarray

    @property
    def boundary(self) -> np.ndarray:
        return self.order[self.n_batch :]

    @property
    def in_batch(self) -> np.ndarray:
        return self.order[: self.n_batch]


def local_view(g: Graph, adj: NormalizedAdjacency, batch: MiniBatch, log: TouchLog | None = None) -> LocalView:
    order = batch.halo.local_order
    if log is not None:
        log.read(order)
    A = adj.matrix[order][:, order].tocsr()
    A.sort_indices()
    deg_local = np.diff(A.indptr) - 1
    return LocalView(
        batch=batch,
        order=order,
        n_batch=len(batch.nodes),
        A=A,
        X=g.features[order],
        deg_local=deg_local,
        deg_global=g.degrees[order],
    )


def beta_for(node: int, batch: MiniBatch, g: Graph, sched: BetaSchedule) -> float:
    """Mixing weight for one boundary node (reference, non-vectorized)."""
    if node not in set(batch.boundary.tolist()):
        raise ValueError(f"node {node} is not on the batch boundary")
    closure = set(batch.halo.closure.tolist())
    neigh = g.neighbors(node)
    deg_global = len(neigh)
    if deg_global == 0:
        return 0.0
    deg_local = sum(1 for j in neigh if int(j) in closure)
    return float(sched(deg_local / deg_global))


def betas_for_boundary(view: LocalView, sched: BetaSchedule) -> np.ndarray:
    nb = view.n_batch
    dl = view.deg_local[nb:].astype(np.float64)
    dg = view.deg_global[nb:].astype(np.float64)
    ratio = np.divide(dl, dg, out=np.zeros_like(dl), where=dg > 0)
    beta = sched(ratio)
    beta[dg == 0] = 0.0
    return beta


@dataclass(eq=False)
class TempValues:
    """Boundary-node temporaries of one step; never written to the store.

    ``inputs[l]`` is the stacked closure matrix fed to layer ``l + 1``:
    fresh historical rows for in-batch nodes, temporary rows for the
    boundary. ``Z_local[l]`` holds the matching layer-``l`` preactivations,
    where boundary rows mix stored and incomplete preactivations with the
    same ``beta`` as the embeddings; backward Jacobians read these.
    """

    boundary: np.ndarray
    beta: np.ndarray
    H_hat: list = field(default_factory=list)
    H_tilde: list = field(default_factory=list)
    V_hat: list = field(default_factory=list)
    V_tilde: list = field(default_factory=list)
    inputs: list = field(default_factory=list)
    Z_local: list = field(default_factory=list)


def forward_compensated(store: HistoricalStore, view: LocalView, params: ModelParams, beta: np.ndarray):
    """Layer-by-layer forward over the batch closure.

    In-batch rows are written to the store; boundary rows are mixed
    ``(1 - beta) * historical + beta * incomplete`` and kept as temporaries.
    Returns the in-batch :class:`LayerState` and the :class:`TempValues`.
    """
    nb, bnd, L = view.n_batch, view.boundary, params.L
    temp = TempValues(boundary=bnd, beta=beta)
    b = beta[:, None]
    P = view.X
    temp.inputs.append(P)
    temp.H_hat.append(P[nb:])
    temp.H_tilde.append(None)
    temp.Z_local.append(None)
    emb, pre = [P[:nb]], [None]
    for l in range(1, L + 1):
        Z = np.asarray(view.A @ P) @ params.theta[l - 1].T
        H = Z.copy() if l == L else np.maximum(Z, 0.0)
        store.write_H(l, view.in_batch, H[:nb], Z[:nb])
        H_tilde = H[nb:]
        H_hat = (1.0 - b) * store.read_H(l, bnd) + b * H_tilde
        Z_hat = (1.0 - b) * store.read_z(l, bnd) + b * Z[nb:]
        P = np.vstack([H[:nb], H_hat])
        emb.append(H[:nb])
        pre.append(Z[:nb])
        temp.H_tilde.append(H_tilde)
        temp.H_hat.append(H_hat)
        temp.inputs.append(P)
        temp.Z_local.append(np.vstack([Z[:nb], Z_hat]))
    return LayerState(view.in_batch, emb, pre), temp


def _output_grads(H_L: np.ndarray, nodes: np.ndarray, g: Graph, params: ModelParams, scale: float):
    """Rows of ``scale * dloss/dH_L`` for labeled ``nodes``, zero elsewhere."""
    V = np.zeros_like(H_L)
    mask = g.labeled_mask[nodes]
    if mask.any():
        _, dh, _ = node_loss_grads(H_L[mask], g.labels[nodes[mask]], params.w_out)
        V[mask] = scale * dh
    return V


def backward_compensated(
    store: HistoricalStore,
    view: LocalView,
    g: Graph,
    params: ModelParams,
    temp: TempValues,
    compensate: bool = True,
) -> list:
    """Auxiliary variables for in-batch nodes, top layer down.

    With ``compensate`` the boundary sends backward messages built from its
    temporary auxiliaries; without it the backward pass is truncated at the
    batch boundary. Returns ``V`` indexed by layer over the in-batch rows.
    """
    nb, bnd, L = view.n_batch, view.boundary, params.L
    scale = 1.0 / int(g.labeled_mask.sum())
    b = temp.beta[:, None]
    H_L = temp.inputs[L]
    V_out = [None] * (L + 1)
    if compensate:
        V = _output_grads(H_L, view.order, g, params, scale)
        temp.V_hat = [None] * (L + 1)
        temp.V_tilde = [None] * (L + 1)
        temp.V_hat[L] = V[nb:]
        A = view.A
    else:
        V = _output_grads(H_L[:nb], view.in_batch, g, params, scale)
        A = view.A[:nb][:, :nb]
    V_out[L] = V[:nb]
    for l in range(L - 1, 0, -1):
        Z = temp.Z_local[l + 1] if compensate else temp.Z_local[l + 1][:nb]
        G = relu_grad(Z, last_layer=(l + 1 == L)) * V
        W = np.asarray(A.T @ G) @ params.theta[l]
        store.write_V(l, view.in_batch, W[:nb])
        V_out[l] = W[:nb]
        if compensate:
            V_tilde = W[nb:]
            V_hat = (1.0 - b) * store.read_V(l, bnd) + b * V_tilde
            temp.V_tilde[l] = V_tilde
            temp.V_hat[l] = V_hat
            V = np.vstack([W[:nb], V_hat])
        else:
            V = W[:nb]
    return V_out


def _batch_gradients(view_A_rows, inputs, Z_batch, V_batch, H_L, labels_nodes, g, params, batch):
    """Reweighted gradient sums over the batch rows."""
    L = params.L
    g_theta = []
    for l in range(1, L + 1):
        G = relu_grad(Z_batch[l], last_layer=(l == L)) * V_batch[l]
        g_theta.append(batch.theta_scale * (G.T @ np.asarray(view_A_rows @ inputs[l - 1])))
    lab_mask = g.labeled_mask[labels_nodes]
    if lab_mask.any():
        H = H_L[lab_mask]
        losses, _, dlogits = node_loss_grads(H, g.labels[labels_nodes[lab_mask]], params.w_out)
        g_w = batch.loss_scale * (dlogits.T @ H)
        loss = batch.loss_scale * float(losses.sum())
    else:
        g_w = np.zeros_like(params.w_out)
        loss = 0.0
    return GradientSet(g_theta, g_w), loss


@dataclass(eq=False)
class StepResult:
    grads: GradientSet
    loss: float
    batch: MiniBatch | None = None
    touched: int = 0
    state: LayerState | None = None
    temp: TempValues | None = None


def _historical_estimate(mode, store, batch, g, adj, params, sched, log=None) -> StepResult:
    view = local_view(g, adj, batch, log)
    store.log = log
    try:
        if mode is EstimatorMode.GAS:
            beta = np.zeros(len(view.boundary))
        else:
            beta = betas_for_boundary(view, sched)
        state, temp = forward_compensated(store, view, params, beta)
        compensate = mode is EstimatorMode.LMC
        V = backward_compensated(store, view, g, params, temp, compensate=compensate)
    finally:
        store.log = None
    A_rows = view.A[: view.n_batch]
    grads, loss = _batch_gradients(
        A_rows, temp.inputs, state.preactivations, V, state.embeddings[-1],
        view.in_batch, g, params, batch,
    )
    touched = len(log) if log is not None else len(view.order)
    return StepResult(grads, loss, batch, touched, state, temp)


def _cluster_estimate(batch, g, params, log=None) -> StepResult:
    nodes = batch.nodes
    if log is not None:
        log.read(nodes)
    A = normalize_induced(g, nodes).matrix
    L = params.L
    H, Z = [g.features[nodes]], [None]
    for l in range(1, L + 1):
        z = np.asarray(A @ H[-1]) @ params.theta[l - 1].T
        Z.append(z)
        H.append(z.copy() if l == L else np.maximum(z, 0.0))
    scale = 1.0 / int(g.labeled_mask.sum())
    V = [None] * (L + 1)
    V[L] = _output_grads(H[L], nodes, g, params, scale)
    for l in range(L - 1, 0, -1):
        G = relu_grad(Z[l + 1], last_layer=(l + 1 == L)) * V[l + 1]
        V[l] = np.asarray(A.T @ G) @ params.theta[l]
    grads, loss = _batch_gradients(A, H, Z, V, H[L], nodes, g, params, batch)
    return StepResult(grads, loss, batch, len(nodes))


def estimate(mode, store, batch, g, adj, params, sched, log=None) -> StepResult:
    """Run one estimator on ``batch``; historical modes update ``store``."""
    mode = EstimatorMode.parse(mode)
    if mode.uses_store:
        if store is None:
            raise ValueError(f"mode {mode.value} needs a HistoricalStore")
        return _historical_estimate(mode, store, batch, g, adj, params, sched, log)
    if mode is EstimatorMode.CLUSTER:
        return _cluster_estimate(batch, g, params, log)
    if mode is EstimatorMode.BACKWARD_SGD:
        grads = backward_sgd_gradients(g, adj, params, batch)
        state = forward_full(g, adj, params)
        lab = batch.labeled_in_batch
        loss = 0.0
        if lab.size:
            losses, _, _ = node_loss_grads(state.embeddings[-1][lab], g.labels[lab], params.w_out)
            loss = batch.loss_scale * float(losses.sum())
        return StepResult(grads, loss, batch, g.n)
    _, _, loss, _ = full_backward(g, adj, params)
    return StepResult(full_gradients(g, adj, params), loss, batch, g.n)


def minibatch_gradients(mode, store, batch, g, adj, params, sched) -> GradientSet:
    return estimate(mode, store, batch, g, adj, params, sched).grads


class Engine:
    """Training state for one estimator: graph, partition, params, store and RNG."""

    def __init__(
        self,
        g: Graph,
        partition: Partition,
        params: ModelParams,
        mode="LMC",
        c: int = 1,
        schedule: BetaSchedule | None = None,
        seed: int = 0,
        warm_start: bool = False,
        adj: NormalizedAdjacency | None = None,
        record_touches: bool = False,
    ):
        if not 1 <= c <= partition.B:
            raise ValueError(f"c={c} must satisfy 1 <= c <= B={partition.B}")
        self.g = g
        self.adj = adj if adj is not None else normalize_adjacency(g)
        self.partition = partition
        self.params = params
        self.mode = EstimatorMode.parse(mode)
        self.c = c
        self.schedule = schedule if schedule is not None else default_schedule(partition.B, c)
        self.rng = np.random.default_rng(seed)
        self.store = HistoricalStore.for_model(g.n, params) if self.mode.uses_store else None
        if warm_start and self.store is not None:
            self.store.warm_start(g, self.adj, params)
        self.record_touches = record_touches
        self.iteration = 0
        self.last_log: TouchLog | None = None

    def sample(self) -> MiniBatch | None:
        if self.mode is EstimatorMode.FULL_BATCH:
            return None
        return sample_batch(self.partition, self.g, self.c, self.rng)

    def estimate(self, batch: MiniBatch | None, params: ModelParams | None = None) -> StepResult:
        log = TouchLog() if self.record_touches else None
        self.last_log = log
        return estimate(
            self.mode, self.store, batch, self.g, self.adj,
            self.params if params is None else params, self.schedule, log,
        )

    def apply(self, grads: GradientSet, eta: float) -> None:
        for theta, gt in zip(self.params.theta, grads.g_theta):
            theta -= eta * gt
        self.params.w_out -= eta * grads.g_w

    def step(self, eta: float) -> StepResult:
        return lmc_step(self, self.iteration + 1, eta)


def lmc_step(engine: Engine, k: int, eta: float) -> StepResult:
    """Sample, estimate, and take a plain SGD step of size ``eta``."""
    batch = engine.sample()
    result = engine.estimate(batch)
    if not math.isfinite(result.loss) or not result.grads.is_finite():
        raise DivergenceError(k, result.loss)
    engine.apply(result.grads, eta)
    engine.iteration = k
    return result
