"""Exact backward pass as message passing, backward SGD and a finite-difference oracle."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from lmcgnn.graph import Graph, NormalizedAdjacency
from lmcgnn.model import (
    LayerState,
    ModelParams,
    forward_full,
    loss_and_output_grad,
    node_loss_grads,
    relu_grad,
)
from lmcgnn.partition import MiniBatch

__all__ = [
    "AuxVars",
    "GradientSet",
    "vec",
    "backward_layer",
    "weight_gradient",
    "full_backward",
    "full_loss",
    "full_gradients",
    "backward_sgd_gradients",
    "finite_diff_gradients",
    "relative_errors",
    "save_gradients",
]


def vec(A: np.ndarray) -> np.ndarray:
    """Column-stacking vectorization: ``A[i, j] -> vec(A)[i + j * p]``."""
    return np.asarray(A).reshape(-1, order="F")


@dataclass(eq=False)
class AuxVars:
    """Loss gradients w.r.t. each layer's embeddings; ``V[0]`` is unused."""

    node_index: np.ndarray
    V: list


@dataclass(eq=False)
class GradientSet:
    g_theta: list
    g_w: np.ndarray

    def arrays(self) -> list:
        return [*self.g_theta, self.g_w]

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def norm(self) -> float:
        return float(np.linalg.norm(self.flat()))

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.flat()).all())

    def scaled(self, s: float) -> "GradientSet":
        return GradientSet([s * t for t in self.g_theta], s * self.g_w)

    def __add__(self, other: "GradientSet") -> "GradientSet":
        return GradientSet(
            [a + b for a, b in zip(self.g_theta, other.g_theta)], self.g_w + other.g_w
        )

    def tobytes(self) -> bytes:
        return b"".join(np.ascontiguousarray(a).tobytes() for a in self.arrays())


def _matrix(adj):
    return adj.matrix if isinstance(adj, NormalizedAdjacency) else adj


def backward_layer(adj, state: LayerState, params: ModelParams, V_next: np.ndarray, l: int) -> np.ndarray:
    """Auxiliary variables at layer ``l`` from those at ``l + 1``.

    Each node ``i`` sums, over ``j`` in its closed neighborhood,
    ``a_ji * theta^{l+1}.T (act'(z_j^{l+1}) * V_j^{l+1})``.
    """
    A = _matrix(adj)
    if V_next.shape != state.preactivations[l + 1].shape:
        raise ValueError("V_next is not aligned with the layer-(l+1) preactivations")
    G = relu_grad(state.preactivations[l + 1], last_layer=(l + 1 == params.L)) * V_next
    return np.asarray(A.T @ G) @ params.theta[l]


def weight_gradient(adj, H_prev: np.ndarray, G: np.ndarray, rows=None) -> np.ndarray:
    """``sum_j G_j (A H_prev)_j^T`` over ``rows`` (all rows when omitted).

    ``G`` holds ``act'(z_j) * V_j`` for the summed rows only.
    """
    A = _matrix(adj)
    if rows is not None:
        A = A[rows]
    return G.T @ np.asarray(A @ H_prev)


def full_backward(g: Graph, adj: NormalizedAdjacency, params: ModelParams):
    """Exact forward and backward over the whole graph.

    Returns ``(state, aux, loss, g_w)`` with the loss averaged over the
    labeled nodes.
    """
    state = forward_full(g, adj, params)
    lab = g.labeled_nodes
    loss, V_L, g_w = loss_and_output_grad(state, params, g, lab, 1.0 / len(lab))
    V = [None] * (params.L + 1)
    V[params.L] = V_L
    for l in range(params.L - 1, 0, -1):
        V[l] = backward_layer(adj, state, params, V[l + 1], l)
    return state, AuxVars(state.node_index, V), loss, g_w


def _activation_grads(state: LayerState, aux: AuxVars, l: int, L: int) -> np.ndarray:
    return relu_grad(state.preactivations[l], last_layer=(l == L)) * aux.V[l]


def full_gradients(g: Graph, adj: NormalizedAdjacency, params: ModelParams) -> GradientSet:
    state, aux, _, g_w = full_backward(g, adj, params)
    g_theta = [
        weight_gradient(adj, state.embeddings[l - 1], _activation_grads(state, aux, l, params.L))
        for l in range(1, params.L + 1)
    ]
    return GradientSet(g_theta, g_w)


def full_loss(g: Graph, adj: NormalizedAdjacency, params: ModelParams) -> float:
    state = forward_full(g, adj, params)
    lab = g.labeled_nodes
    losses, _, _ = node_loss_grads(state.embeddings[-1][lab], g.labels[lab], params.w_out)
    return float(losses.sum() / len(lab))


def backward_sgd_gradients(
    g: Graph, adj: NormalizedAdjacency, params: ModelParams, batch: MiniBatch
) -> GradientSet:
    """Unbiased mini-batch gradients from exact embeddings and auxiliaries.

    Deliberately runs the full-graph forward and backward; only the final
    gradient sums are restricted to the batch.
    """
    state, aux, _, _ = full_backward(g, adj, params)
    nodes = batch.nodes
    g_theta = []
    for l in range(1, params.L + 1):
        G = _activation_grads(state, aux, l, params.L)[nodes]
        g_theta.append(batch.theta_scale * weight_gradient(adj, state.embeddings[l - 1], G, rows=nodes))
    lab = batch.labeled_in_batch
    if lab.size == 0:
        g_w = np.zeros_like(params.w_out)
    else:
        H_L = state.embeddings[-1][lab]
        _, _, dlogits = node_loss_grads(H_L, g.labels[lab], params.w_out)
        g_w = batch.loss_scale * (dlogits.T @ H_L)
    return GradientSet(g_theta, g_w)


def finite_diff_gradients(g: Graph, adj: NormalizedAdjacency, params: ModelParams, h: float = 1e-5) -> GradientSet:
    """Central differences of the full loss, one scalar parameter at a time."""
    if h <= 0:
        raise ValueError("step h must be positive")
    work = params.copy()
    grads = []
    for arr in work.arrays():
        out = np.empty_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            up = full_loss(g, adj, work)
            arr[idx] = orig - h
            down = full_loss(g, adj, work)
            arr[idx] = orig
            out[idx] = (up - down) / (2.0 * h)
        grads.append(out)
    return GradientSet(grads[:-1], grads[-1])


def relative_errors(est: GradientSet, exact: GradientSet) -> np.ndarray:
    """Per-layer ``||est - exact||_F / ||exact||_F`` for the GCN weights."""
    errs = []
    for a, b in zip(est.g_theta, exact.g_theta):
        denom = np.linalg.norm(b)
        num = np.linalg.norm(a - b)
        errs.append(num / denom if denom > 0 else (0.0 if num == 0 else np.inf))
    return np.array(errs)


def save_gradients(grads: GradientSet, path) -> None:
    """One ``layer,row,col,value`` record per entry; the output head is layer ``w``."""
    with open(path, "w") as fh:
        fh.write("layer,row,col,value\n")
        for name, mat in [*((str(l), t) for l, t in enumerate(grads.g_theta, start=1)), ("w", grads.g_w)]:
            for (r, c), v in np.ndenumerate(mat):
                fh.write(f"{name},{r},{c},{float(v)!r}\n")
