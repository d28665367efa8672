"""GCN forward pass, softmax cross-entropy head and parameter handling.

Embeddings are stored row-per-node: layer ``l`` is an ``(n_active, d_l)``
array whose rows follow an explicit node index. A layer weight ``theta``
has shape ``(d_l, d_{l-1})`` and the output weight ``w_out`` has shape
``(C, d_L)``, so ``z_i = theta @ (sum_j a_ij h_j)`` becomes
``Z = (A @ H) @ theta.T`` in row layout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from lmcgnn.graph import Graph, NormalizedAdjacency

__all__ = [
    "ModelParams",
    "LayerState",
    "layer_forward",
    "forward_full",
    "forward_on",
    "relu_grad",
    "node_loss_grads",
    "loss_and_output_grad",
    "glorot_uniform",
    "init_glorot",
    "save_params",
    "load_params",
]


@dataclass(eq=False)
class ModelParams:
    theta: list
    w_out: np.ndarray

    def __post_init__(self):
        if len(self.theta) < 1:
            raise ValueError("need at least one GCN layer")
        for l in range(1, len(self.theta)):
            if self.theta[l].shape[1] != self.theta[l - 1].shape[0]:
                raise ValueError(f"layer {l + 1} input dim does not match layer {l} output")
        if self.w_out.shape[1] != self.theta[-1].shape[0]:
            raise ValueError("output layer input dim does not match last GCN layer")

    @property
    def L(self) -> int:
        return len(self.theta)

    @property
    def dims(self) -> tuple:
        return (self.theta[0].shape[1], *(t.shape[0] for t in self.theta), self.w_out.shape[0])

    def copy(self) -> "ModelParams":
        return ModelParams([t.copy() for t in self.theta], self.w_out.copy())

    def arrays(self) -> list:
        return [*self.theta, self.w_out]

    def is_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays())


@dataclass(eq=False)
class LayerState:
    """Cached forward pass over ``node_index``.

    ``embeddings[0]`` holds the input features; ``preactivations[0]`` is
    ``None`` so both lists index by layer number.
    """

    node_index: np.ndarray
    embeddings: list
    preactivations: list

    @property
    def L(self) -> int:
        return len(self.embeddings) - 1

    def rows_of(self, nodes) -> np.ndarray:
        pos = np.searchsorted(self.node_index, nodes)
        if np.any(pos >= len(self.node_index)) or np.any(self.node_index[pos] != nodes):
            raise ValueError("node outside the indexed set")
        return pos


def layer_forward(adj, H_prev: np.ndarray, theta_l: np.ndarray, last_layer: bool):
    """One GCN layer: aggregate with ``adj`` (diagonal included), project, ReLU.

    ``adj`` may be a :class:`NormalizedAdjacency` or any sparse/dense
    matrix already restricted to the rows and columns of ``H_prev``.
    """
    if isinstance(adj, NormalizedAdjacency):
        adj = adj.matrix
    if adj.shape[1] != H_prev.shape[0]:
        raise ValueError(f"adjacency has {adj.shape[1]} columns for {H_prev.shape[0]} rows")
    if theta_l.shape[1] != H_prev.shape[1]:
        raise ValueError(f"theta expects dim {theta_l.shape[1]}, got {H_prev.shape[1]}")
    Z = np.asarray(adj @ H_prev) @ theta_l.T
    H = Z.copy() if last_layer else np.maximum(Z, 0.0)
    return H, Z


def forward_on(adj, X: np.ndarray, params: ModelParams, node_index) -> LayerState:
    """Forward pass over a closed node set whose adjacency is ``adj``."""
    H = [np.asarray(X, dtype=np.float64)]
    Z = [None]
    for l, theta in enumerate(params.theta, start=1):
        h, z = layer_forward(adj, H[-1], theta, last_layer=(l == params.L))
        H.append(h)
        Z.append(z)
    return LayerState(np.asarray(node_index), H, Z)


def forward_full(g: Graph, adj: NormalizedAdjacency, params: ModelParams) -> LayerState:
    if params.dims[0] != g.d_x:
        raise ValueError(f"params expect {params.dims[0]} input features, graph has {g.d_x}")
    return forward_on(adj.matrix, g.features, params, np.arange(g.n))


def relu_grad(Z: np.ndarray, last_layer: bool) -> np.ndarray:
    """Derivative of the activation at ``Z`` (ReLU'(0) = 0, identity on the last layer)."""
    if last_layer:
        return np.ones_like(Z)
    return (Z > 0.0).astype(Z.dtype)


def node_loss_grads(H_L: np.ndarray, labels: np.ndarray, w_out: np.ndarray):
    """Per-row softmax cross-entropy.

    Returns ``(losses, dH, dlogits)`` where row ``k`` of ``dH`` is the
    gradient of ``losses[k]`` with respect to row ``k`` of ``H_L``.
    """
    logits = H_L @ w_out.T
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(len(labels))
    losses = log_norm - shifted[rows, labels]
    dlogits = np.exp(shifted - log_norm[:, None])
    dlogits[rows, labels] -= 1.0
    return losses, dlogits @ w_out, dlogits


def loss_and_output_grad(state: LayerState, params: ModelParams, g: Graph, node_set, scale: float):
    """Scaled summed cross-entropy over ``node_set`` and its gradients.

    Returns ``(loss, dL_dH_L, dL_dw)``; ``dL_dH_L`` is aligned with
    ``state.node_index`` and zero outside ``node_set``.
    """
    node_set = np.asarray(node_set, dtype=np.int64)
    H_L = state.embeddings[-1]
    dH = np.zeros_like(H_L)
    dw = np.zeros_like(params.w_out)
    if node_set.size == 0:
        return 0.0, dH, dw
    if not g.labeled_mask[node_set].all():
        raise ValueError("node_set contains unlabeled nodes")
    rows = state.rows_of(node_set)
    losses, dh, dlogits = node_loss_grads(H_L[rows], g.labels[node_set], params.w_out)
    dH[rows] = scale * dh
    dw = scale * (dlogits.T @ H_L[rows])
    return scale * float(losses.sum()), dH, dw


def glorot_uniform(fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


def init_glorot(dims, seed) -> ModelParams:
    """Glorot-uniform weights for ``dims = (d_0, ..., d_L, C)``."""
    dims = tuple(int(d) for d in dims)
    if len(dims) < 3:
        raise ValueError("dims needs input, at least one layer width, and class count")
    rng = np.random.default_rng(seed)
    mats = [glorot_uniform(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]
    return ModelParams(mats[:-1], mats[-1])


def save_params(params: ModelParams, path) -> None:
    """Text checkpoint: header ``L d_0 ... d_L C`` then matrices row by row.

    Matrices appear in the order theta^1..theta^L, w_out; each row is a
    comma-separated line of round-trippable floats.
    """
    with open(path, "w") as fh:
        fh.write(" ".join(str(x) for x in (params.L, *params.dims)) + "\n")
        for mat in params.arrays():
            for row in mat:
                fh.write(",".join(repr(float(x)) for x in row) + "\n")


def load_params(path) -> ModelParams:
    with open(path) as fh:
        header = [int(tok) for tok in fh.readline().split()]
        L, dims = header[0], header[1:]
        if len(dims) != L + 2:
            raise ValueError("checkpoint header does not match layer count")
        rows = [line for line in fh if line.strip()]
    mats, pos = [], 0
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        block = rows[pos : pos + fan_out]
        if len(block) != fan_out:
            raise ValueError("checkpoint truncated")
        mats.append(np.array([[float(x) for x in r.split(",")] for r in block]).reshape(fan_out, fan_in))
        pos += fan_out
    return ModelParams(mats[:-1], mats[-1])
