import numpy as np
import pytest

from lmcgnn.backward import full_backward, full_gradients, relative_errors
from lmcgnn.exceptions import DivergenceError
from lmcgnn.graph import Graph, generate_sbm, normalize_adjacency
from lmcgnn.lmc import (
    BetaSchedule,
    Engine,
    EstimatorMode,
    HistoricalStore,
    TouchLog,
    beta_for,
    betas_for_boundary,
    default_schedule,
    estimate,
    forward_compensated,
    local_view,
    lmc_step,
    minibatch_gradients,
)
from lmcgnn.model import init_glorot
from lmcgnn.partition import Partition, make_batch, partition_bfs


def setup(n_per_block=12, B=4, seed=0, dims=None, p_in=0.4, p_out=0.1):
    g = generate_sbm(2, n_per_block, p_in, p_out, 4, 2, 0.5, seed=seed)
    adj = normalize_adjacency(g)
    params = init_glorot(dims or (4, 6, 6, 2), seed)
    return g, adj, params, partition_bfs(g, B, seed)


def sweep_errors(g, adj, params, part, sweeps, sched):
    """Frozen-parameter LMC sweeps over every cluster; per-sweep store errors."""
    state, aux, _, _ = full_backward(g, adj, params)
    store = HistoricalStore.for_model(g.n, params)
    hist = []
    for _ in range(sweeps):
        for b in range(part.B):
            estimate("LMC", store, make_batch(part, g, [b]), g, adj, params, sched)
        h = [np.linalg.norm(store.H_bar[l] - state.embeddings[l]) for l in range(1, params.L + 1)]
        v = [np.linalg.norm(store.V_bar[l] - aux.V[l]) for l in range(1, params.L)]
        hist.append(h + v)
    return np.array(hist)


@pytest.mark.parametrize("score", ["x^2", "2x-x^2", "x", "1", "sin(x)"])
def test_beta_range_and_endpoints(score):
    x = np.linspace(0, 1, 11)
    beta = BetaSchedule(0.7, score)(x)
    assert (beta >= 0).all() and (beta <= 1).all()
    assert not BetaSchedule(0.0, score)(x).any()


def test_beta_examples():
    assert BetaSchedule(1.0, "x^2")(1.0) == 1.0
    assert BetaSchedule(0.4, "2x-x^2")(0.5) == pytest.approx(0.3)
    with pytest.raises(ValueError):
        BetaSchedule(1.5, "x")
    with pytest.raises(ValueError):
        BetaSchedule(0.5, "cube")


def test_default_schedule_depends_on_batch_fraction():
    assert default_schedule(8, 2) == BetaSchedule(0.4, "2x-x^2")
    assert default_schedule(8, 4) == BetaSchedule(1.0, "1")


def test_beta_for_matches_vectorized():
    g, adj, params, part = setup()
    batch = make_batch(part, g, [1])
    sched = BetaSchedule(0.9, "x")
    view = local_view(g, adj, batch)
    vec = betas_for_boundary(view, sched)
    ref = [beta_for(int(i), batch, g, sched) for i in view.boundary]
    assert np.allclose(vec, ref, rtol=0, atol=1e-15)
    with pytest.raises(ValueError):
        beta_for(int(batch.nodes[0]), batch, g, sched)


def test_beta_half_local_degree():
    # node 2 has neighbors {1, 3}; batch {0, 1} sees only 1 of them
    g = Graph.from_edges(4, [(0, 1), (1, 2), (2, 3)], np.eye(4), [0, 0, 1, 1], [True] * 4)
    batch = make_batch(Partition.from_assignment([0, 0, 1, 1]), g, [0])
    assert beta_for(2, batch, g, BetaSchedule(0.4, "2x-x^2")) == pytest.approx(0.3)


def test_mode_parse():
    assert EstimatorMode.parse("lmc_forwardonly") is EstimatorMode.LMC_FORWARD_ONLY
    with pytest.raises(ValueError):
        EstimatorMode.parse("SAGE")
    assert not EstimatorMode.CLUSTER.uses_store


@pytest.mark.parametrize("mode", ["LMC", "GAS", "LMC_ForwardOnly", "BackwardSGD", "Cluster"])
def test_full_batch_equals_exact_gradient(mode):
    g, adj, params, part = setup()
    batch = make_batch(part, g, list(range(part.B)))
    store = HistoricalStore.for_model(g.n, params)
    grads = minibatch_gradients(mode, store, batch, g, adj, params, default_schedule(4, 1))
    exact = full_gradients(g, adj, params)
    if mode == "Cluster":
        # induced subgraph is the whole graph, so only rounding separates them
        for a, b in zip(grads.arrays(), exact.arrays()):
            assert np.allclose(a, b, rtol=1e-10, atol=1e-14)
        return
    for a, b in zip(grads.arrays(), exact.arrays()):
        assert np.abs(a - b).max() <= 1e-12


def test_full_batch_store_holds_exact_values():
    g, adj, params, part = setup()
    store = HistoricalStore.for_model(g.n, params)
    estimate("LMC", store, make_batch(part, g, list(range(part.B))), g, adj, params, default_schedule(4, 4))
    state, aux, _, _ = full_backward(g, adj, params)
    for l in range(1, params.L + 1):
        assert np.abs(store.H_bar[l] - state.embeddings[l]).max() <= 1e-12
    for l in range(1, params.L):
        assert np.abs(store.V_bar[l] - aux.V[l]).max() <= 1e-12


def test_zero_beta_uses_pure_history():
    g, adj, params, part = setup()
    store = HistoricalStore.for_model(g.n, params)
    store.warm_start(g, adj, params)
    view = local_view(g, adj, make_batch(part, g, [0]))
    before = store.copy()
    _, temp = forward_compensated(store, view, params, np.zeros(len(view.boundary)))
    for l in range(1, params.L + 1):
        assert np.array_equal(temp.H_hat[l], before.H_bar[l][view.boundary])


def test_convexity_of_temporaries():
    g, adj, params, part = setup()
    store = HistoricalStore.for_model(g.n, params)
    store.warm_start(g, adj, init_glorot((4, 6, 6, 2), 99))
    for b in range(part.B):
        snapshot = store.copy()
        res = estimate("LMC", store, make_batch(part, g, [b]), g, adj, params, BetaSchedule(0.8, "x"))
        t = res.temp
        assert (t.beta >= 0).all() and (t.beta <= 1).all()
        for l in range(1, params.L + 1):
            hist = snapshot.H_bar[l][t.boundary]
            lo, hi = np.minimum(hist, t.H_tilde[l]), np.maximum(hist, t.H_tilde[l])
            assert (t.H_hat[l] >= lo - 1e-12).all() and (t.H_hat[l] <= hi + 1e-12).all()
        for l in range(1, params.L):
            hist = snapshot.V_bar[l][t.boundary]
            lo, hi = np.minimum(hist, t.V_tilde[l]), np.maximum(hist, t.V_tilde[l])
            assert (t.V_hat[l] >= lo - 1e-12).all() and (t.V_hat[l] <= hi + 1e-12).all()


@pytest.mark.parametrize("mode", ["LMC", "GAS", "LMC_ForwardOnly"])
def test_store_write_discipline(mode):
    g, adj, params, part = setup()
    engine = Engine(g, part, params, mode, c=1, seed=3, warm_start=True)
    for _ in range(6):
        before = engine.store.copy()
        result = engine.step(0.1)
        outside = np.setdiff1d(np.arange(g.n), result.batch.nodes)
        for a, b in zip(before.arrays(), engine.store.arrays()):
            assert a[outside].tobytes() == b[outside].tobytes()


def test_no_labeled_nodes_gives_zero_aux():
    g0 = generate_sbm(2, 6, 0.5, 0.2, 3, 2, 1.0, seed=0)
    mask = np.zeros(g0.n, bool)
    mask[0] = True
    g = Graph(g0.indptr, g0.indices, g0.features, g0.labels, mask)
    adj = normalize_adjacency(g)
    params = init_glorot((3, 4, 4, 2), 0)
    part = partition_bfs(g, 3)
    store = HistoricalStore.for_model(g.n, params)
    far = [b for b in range(3) if 0 not in part.clusters[b] and 0 not in make_batch(part, g, [b]).boundary]
    assert far
    for b in far:
        res = estimate("LMC", store, make_batch(part, g, [b]), g, adj, params, BetaSchedule(1.0, "1"))
        assert not any(v.any() for v in res.temp.V_hat[1:] if v is not None)
        assert res.loss == 0.0 and not res.grads.g_w.any()


def test_two_cluster_sweeps_strictly_contract():
    g = Graph.from_edges(
        8,
        [(0, 1), (1, 2), (2, 3), (0, 3), (4, 5), (5, 6), (6, 7), (4, 7), (3, 4)],
        np.random.default_rng(0).normal(size=(8, 3)),
        [0, 0, 0, 0, 1, 1, 1, 1],
        [True] * 8,
    )
    adj = normalize_adjacency(g)
    params = init_glorot((3, 4, 4, 2), 1)
    part = Partition.from_assignment([0, 0, 0, 0, 1, 1, 1, 1])
    errs = sweep_errors(g, adj, params, part, 3, BetaSchedule(0.0, "1"))
    h = errs[:, : params.L]
    # layer 1 reads only features, so it is exact after one sweep
    assert h[0, 0] == 0.0
    assert 0 < h[1, 1] < h[0, 1]
    assert (h[2] <= h[1]).all()


def test_frozen_params_contract_to_exact_values():
    g, adj, params, part = setup()
    errs = sweep_errors(g, adj, params, part, 60, BetaSchedule(0.0, "1"))
    assert (np.diff(errs, axis=0) <= 1e-15).all()
    assert errs[-1].max() < 1e-8


def test_eta_zero_refreshes_store_only():
    g, adj, params, part = setup()
    engine = Engine(g, part, params, "LMC", c=1, seed=0)
    theta0 = [a.copy() for a in params.arrays()]
    before = engine.store.copy()
    result = engine.step(0.0)
    assert all(a.tobytes() == b.tobytes() for a, b in zip(theta0, params.arrays()))
    changed = engine.store.H_bar[1][result.batch.nodes]
    assert not np.array_equal(changed, before.H_bar[1][result.batch.nodes])


def test_single_cluster_trajectory_matches_gradient_descent():
    g, adj, p1, _ = setup()
    p2 = p1.copy()
    lmc = Engine(g, partition_bfs(g, 1), p1, "LMC", c=1)
    full = Engine(g, partition_bfs(g, 1), p2, "FullBatch", c=1)
    for _ in range(20):
        a, b = lmc.step(0.3), full.step(0.3)
        for x, y in zip(a.grads.arrays(), b.grads.arrays()):
            assert np.abs(x - y).max() <= 1e-12
    for x, y in zip(p1.arrays(), p2.arrays()):
        assert np.abs(x - y).max() <= 1e-10


def test_fixed_seed_is_bitwise_deterministic():
    runs = []
    for _ in range(2):
        g, adj, params, part = setup()
        engine = Engine(g, part, params, "LMC", c=2, seed=11)
        for _ in range(15):
            engine.step(0.2)
        runs.append(b"".join(a.tobytes() for a in params.arrays() + engine.store.arrays()))
    assert runs[0] == runs[1]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported_with_iteration():
    g, adj, params, part = setup()
    params.w_out[:] = np.inf
    engine = Engine(g, part, params, "LMC", c=1)
    with pytest.raises(DivergenceError) as info:
        lmc_step(engine, 7, 0.1)
    assert info.value.iteration == 7


def test_touches_stay_inside_closure():
    g, adj, params, part = setup(B=6)
    engine = Engine(g, part, params, "LMC", c=2, seed=2, record_touches=True)
    for _ in range(10):
        result = engine.step(0.1)
        closure = set(result.batch.halo.closure.tolist())
        assert engine.last_log.touched <= closure
        assert result.touched == len(engine.last_log) <= len(closure)


def test_cluster_ignores_outside_nodes():
    g, adj, params, part = setup()
    batch = make_batch(part, g, [0])
    a = estimate("Cluster", None, batch, g, adj, params, None)
    feats = g.features.copy()
    outside = np.setdiff1d(np.arange(g.n), batch.nodes)
    feats[outside] = np.nan
    g2 = Graph(g.indptr, g.indices, feats, g.labels, g.labeled_mask)
    b = estimate("Cluster", None, batch, g2, adj, params, None)
    assert a.grads.tobytes() == b.grads.tobytes()


def test_store_needed_for_historical_modes():
    g, adj, params, part = setup()
    with pytest.raises(ValueError):
        estimate("GAS", None, make_batch(part, g, [0]), g, adj, params, default_schedule(4, 1))


def test_engine_rejects_bad_c():
    g, adj, params, part = setup()
    with pytest.raises(ValueError):
        Engine(g, part, params, "LMC", c=5)


def test_store_snapshot_roundtrip(tmp_path):
    g, adj, params, part = setup()
    store = HistoricalStore.for_model(g.n, params)
    store.warm_start(g, adj, params)
    store.save(tmp_path / "store.txt")
    header = (tmp_path / "store.txt").read_text().splitlines()[0]
    assert header == f"2 6 6 {g.n}"
    loaded = HistoricalStore.load(tmp_path / "store.txt")
    assert all(a.tobytes() == b.tobytes() for a, b in zip(store.arrays(), loaded.arrays()))


def test_touch_log_counts_unique_nodes():
    log = TouchLog()
    log.read([1, 2, 2])
    log.write(np.array([2, 5]))
    assert len(log) == 3 and log.touched == {1, 2, 5}


def test_lmc_beats_gas_on_small_sbm():
    means = {"LMC": [], "GAS": []}
    for seed in range(3):
        g = generate_sbm(2, 30, 0.2, 0.05, 6, 2, 0.5, seed=seed)
        adj = normalize_adjacency(g)
        params = init_glorot((6, 12, 12, 2), seed)
        part = partition_bfs(g, 6, seed)
        sched = default_schedule(6, 2)
        stores = {m: HistoricalStore.for_model(g.n, params) for m in means}
        trainer = Engine(g, part, params, "LMC", c=2, seed=seed, adj=adj)
        for k in range(220):
            batch = trainer.sample()
            exact = full_gradients(g, adj, params) if k >= 20 else None
            res = {m: estimate(m, stores[m], batch, g, adj, params, sched) for m in means}
            if exact is not None:
                for m in means:
                    means[m].append(relative_errors(res[m].grads, exact).mean())
            trainer.apply(res["LMC"].grads, 0.1)
    assert np.mean(means["LMC"]) < np.mean(means["GAS"])
