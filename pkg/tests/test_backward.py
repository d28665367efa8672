import numpy as np
import pytest

from lmcgnn.backward import (
    GradientSet,
    backward_layer,
    backward_sgd_gradients,
    finite_diff_gradients,
    full_backward,
    full_gradients,
    full_loss,
    relative_errors,
    save_gradients,
    vec,
)
from lmcgnn.graph import Graph, generate_sbm, normalize_adjacency
from lmcgnn.model import forward_full, init_glorot
from lmcgnn.partition import enumerate_batches, partition_bfs

from conftest import gradient_instance


def block_errors(est, exact):
    return [np.abs(a - b).max() / max(np.abs(b).max(), 1e-300) for a, b in zip(est.arrays(), exact.arrays())]


def test_vec_is_column_major():
    assert vec(np.array([[1, 3], [2, 4]])).tolist() == [1, 2, 3, 4]


@pytest.mark.parametrize("seed,L", [(0, 1), (1, 2), (2, 3)])
def test_full_gradients_match_finite_differences(seed, L):
    g, adj, params = gradient_instance(seed, 12, L, 4)
    errs = block_errors(full_gradients(g, adj, params), finite_diff_gradients(g, adj, params))
    assert max(errs) < 1e-6


def test_aux_variables_match_finite_differences_on_embeddings():
    # V^l is dL/dH^l; perturb one hidden embedding entry directly
    g, adj, params = gradient_instance(5, 10, 2, 3)
    state, aux, _, _ = full_backward(g, adj, params)
    lab = g.labeled_nodes
    h = 1e-6

    def loss_from_h1(H1):
        Z2 = np.asarray(adj.matrix @ H1) @ params.theta[1].T
        logits = Z2[lab] @ params.w_out.T
        logits -= logits.max(axis=1, keepdims=True)
        logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
        return -logp[np.arange(len(lab)), g.labels[lab]].mean()

    H1 = state.embeddings[1]
    for i, j in [(0, 0), (3, 1), (9, 2)]:
        up, down = H1.copy(), H1.copy()
        up[i, j] += h
        down[i, j] -= h
        fd = (loss_from_h1(up) - loss_from_h1(down)) / (2 * h)
        assert aux.V[1][i, j] == pytest.approx(fd, rel=1e-6, abs=1e-10)


def test_zero_upstream_gives_zero_message():
    g, adj, params = gradient_instance(1, 8, 2, 3)
    state = forward_full(g, adj, params)
    V = backward_layer(adj, state, params, np.zeros((g.n, 3)), 1)
    assert not V.any()


def test_disconnected_duplicate_leaves_gradients_unchanged():
    g, adj, params = gradient_instance(3, 8, 2, 3)
    edges = g.edge_list()
    dup = Graph.from_edges(
        2 * g.n,
        np.vstack([edges, edges + g.n]),
        np.vstack([g.features, g.features]),
        np.concatenate([g.labels, g.labels]),
        np.concatenate([g.labeled_mask, g.labeled_mask]),
    )
    a = full_gradients(g, adj, params)
    b = full_gradients(dup, normalize_adjacency(dup), params)
    for x, y in zip(a.arrays(), b.arrays()):
        assert np.allclose(x, y, rtol=1e-12, atol=1e-15)
    assert full_loss(dup, normalize_adjacency(dup), params) == pytest.approx(full_loss(g, adj, params), rel=1e-13)


def test_finite_difference_error_shrinks_quadratically():
    g, adj, params = gradient_instance(7, 8, 1, 3)
    exact = full_gradients(g, adj, params)
    e1 = max(block_errors(finite_diff_gradients(g, adj, params, 1e-2), exact))
    e2 = max(block_errors(finite_diff_gradients(g, adj, params, 1e-3), exact))
    assert e2 < e1 / 30


def test_finite_diff_rejects_bad_step():
    g, adj, params = gradient_instance(0, 6, 1, 2)
    with pytest.raises(ValueError):
        finite_diff_gradients(g, adj, params, 0.0)


@pytest.mark.parametrize("c", [1, 2, 3])
def test_batch_average_is_exactly_full_gradient(c):
    g = generate_sbm(2, 12, 0.3, 0.05, 4, 2, 0.5, seed=3)
    adj = normalize_adjacency(g)
    params = init_glorot((4, 6, 6, 2), 1)
    batches = enumerate_batches(partition_bfs(g, 4, 0), g, c)
    total = None
    for b in batches:
        est = backward_sgd_gradients(g, adj, params, b)
        total = est if total is None else total + est
    avg = total.scaled(1.0 / len(batches))
    exact = full_gradients(g, adj, params)
    for x, y in zip(avg.arrays(), exact.arrays()):
        assert np.abs(x - y).max() <= 1e-10


def test_gradient_of_isolated_unlabeled_node_is_zero():
    g = Graph.from_edges(3, [(0, 1)], np.eye(3), [0, 1, 0], [True, True, False])
    adj = normalize_adjacency(g)
    params = init_glorot((3, 4, 2), 0)
    state, aux, _, _ = full_backward(g, adj, params)
    assert not aux.V[1][2].any()
    grads = full_gradients(g, adj, params)
    # feature column 2 belongs only to node 2, which never reaches the loss
    assert not grads.g_theta[0][:, 2].any()


def test_relative_errors_per_layer():
    exact = GradientSet([np.ones((2, 2)), np.ones((1, 2))], np.zeros((2, 1)))
    est = GradientSet([np.ones((2, 2)) * 1.5, np.ones((1, 2))], np.zeros((2, 1)))
    assert relative_errors(est, exact).tolist() == [0.5, 0.0]
    zero = GradientSet([np.zeros((1, 1))], np.zeros((1, 1)))
    assert relative_errors(zero, zero).tolist() == [0.0]


def test_gradient_dump(tmp_path):
    grads = GradientSet([np.array([[1.0, 2.0]])], np.array([[0.5]]))
    save_gradients(grads, tmp_path / "g.csv")
    lines = (tmp_path / "g.csv").read_text().splitlines()
    assert lines == ["layer,row,col,value", "1,0,0,1.0", "1,0,1,2.0", "w,0,0,0.5"]


def test_gradient_set_arithmetic():
    a = GradientSet([np.ones((2, 2))], np.ones((1, 2)))
    b = a + a.scaled(2.0)
    assert np.array_equal(b.g_theta[0], 3 * np.ones((2, 2)))
    assert b.norm() == pytest.approx(np.sqrt(6 * 9))
    bad = GradientSet([np.array([[np.nan]])], np.zeros((1, 1)))
    assert not bad.is_finite()
