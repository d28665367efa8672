"""Training runs, gradient-error sweeps, and their CSV / manifest outputs."""

from __future__ import annotations

import csv
import hashlib
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from lmcgnn import __version__
from lmcgnn.backward import full_backward, full_gradients, relative_errors
from lmcgnn.config import RunConfig, dump_config
from lmcgnn.exceptions import DivergenceError
from lmcgnn.graph import Graph, generate_sbm, load_graph, normalize_adjacency
from lmcgnn.lmc import BetaSchedule, Engine, EstimatorMode, HistoricalStore, default_schedule, estimate
from lmcgnn.model import forward_full, init_glorot, save_params
from lmcgnn.partition import Partition, load_partition, partition_bfs, save_partition

logger = logging.getLogger(__name__)

METRIC_FIELDS = [
    "iteration", "epoch", "train_loss", "full_batch_loss",
    "train_acc", "val_acc", "test_acc", "rel_err_mean",
]
TAIL_FIELDS = ["nodes_touched", "wall_time_ms"]


def build_graph(config: RunConfig) -> Graph:
    if config.uses_files:
        return load_graph(config.edges, config.features, config.labels)
    return generate_sbm(
        config.blocks, config.nodes_per_block, config.p_in, config.p_out,
        config.d_x, config.classes, config.label_fraction, config.data_seed,
    )


def split_unlabeled(g: Graph, seed: int):
    """Deterministic halves of the unlabeled nodes: ``(val, test)``."""
    rest = np.flatnonzero(~g.labeled_mask)
    rest = rest[np.random.default_rng(seed).permutation(len(rest))]
    half = len(rest) // 2
    return np.sort(rest[:half]), np.sort(rest[half:])


def schedule_for(config: RunConfig) -> BetaSchedule:
    args = config.schedule_args()
    return default_schedule(config.B, config.c) if args is None else BetaSchedule(*args)


def resolve_partition(config: RunConfig, g: Graph) -> Partition:
    if config.partition and Path(config.partition).exists():
        part = load_partition(config.partition)
        if part.n != g.n:
            raise ValueError(f"partition covers {part.n} nodes, graph has {g.n}")
        return part
    return partition_bfs(g, config.B, config.seed)


def model_dims(config: RunConfig, g: Graph) -> tuple:
    return (g.d_x, *([config.hidden] * config.layers), g.n_classes)


def input_digest(config: RunConfig, g: Graph) -> str:
    h = hashlib.sha256()
    if config.uses_files:
        for path in (config.edges, config.features, config.labels):
            h.update(Path(path).read_bytes())
    else:
        for arr in (g.indptr, g.indices, g.features, g.labels, g.labeled_mask):
            h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def write_manifest(path, config: RunConfig, g: Graph, command: str) -> None:
    with open(path, "w") as fh:
        fh.write(f"# lmcgnn {__version__} {command}\n")
        fh.write(dump_config(config))
        fh.write(f"input_sha256 = {input_digest(config, g)}\n")
        fh.write(f"n = {g.n}\nedges = {g.n_edges}\n")


@dataclass
class Evaluation:
    full_batch_loss: float
    train_acc: float
    val_acc: float
    test_acc: float
    grad_norm: float


def evaluate(g: Graph, adj, params, val, test) -> Evaluation:
    state, _, loss, _ = full_backward(g, adj, params)
    pred = (state.embeddings[-1] @ params.w_out.T).argmax(axis=1)
    correct = pred == g.labels

    def acc(nodes):
        return float(correct[nodes].mean()) if len(nodes) else math.nan

    return Evaluation(
        full_batch_loss=loss,
        train_acc=acc(g.labeled_nodes),
        val_acc=acc(val),
        test_acc=acc(test),
        grad_norm=full_gradients(g, adj, params).norm(),
    )


def _fmt(value) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class TrainResult:
    engine: Engine
    rows: list
    initial_grad_norm: float
    final: Evaluation
    diverged_at: int | None = None


def train(config: RunConfig, out_dir=None, g: Graph | None = None) -> TrainResult:
    """Run ``config.iterations`` steps of ``config.mode``.

    When ``out_dir`` is given, writes ``metrics.csv`` (flushed row by row),
    ``manifest.txt``, ``partition.txt`` and ``params.ckpt``. A divergence
    stops the run; rows written so far are kept and ``diverged_at`` is set.
    """
    config.validate()
    g = build_graph(config) if g is None else g
    adj = normalize_adjacency(g)
    part = resolve_partition(config, g)
    params = init_glorot(model_dims(config, g), config.seed)
    engine = Engine(
        g, part, params, config.mode, c=config.c, schedule=schedule_for(config),
        seed=config.seed, warm_start=config.warm_start, adj=adj,
    )
    val, test = split_unlabeled(g, config.data_seed)
    every = config.resolved_eval_every
    layer_fields = [f"rel_err_{l}" for l in range(1, params.L + 1)]
    header = METRIC_FIELDS + layer_fields + TAIL_FIELDS

    out = Path(out_dir) if out_dir is not None else None
    fh = writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_manifest(out / "manifest.txt", config, g, "train")
        save_partition(part, out / "partition.txt")
        fh = open(out / "metrics.csv", "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        fh.flush()

    initial = full_gradients(g, adj, params).norm()
    rows = []
    diverged = None
    start = time.perf_counter()
    try:
        for k in range(1, config.iterations + 1):
            exact = full_gradients(g, adj, params) if config.track_grad_error else None
            try:
                result = engine.step(config.eta)
            except DivergenceError as exc:
                logger.error("%s", exc)
                diverged = exc.iteration
                break
            if k % every and k != config.iterations:
                continue
            errs = relative_errors(result.grads, exact) if exact is not None else None
            per_layer = [None] * params.L if errs is None else [float(e) for e in errs]
            ev = evaluate(g, adj, params, val, test)
            row = {
                "iteration": k,
                "epoch": k / config.epoch_steps,
                "train_loss": result.loss,
                "full_batch_loss": ev.full_batch_loss,
                "train_acc": ev.train_acc,
                "val_acc": ev.val_acc,
                "test_acc": ev.test_acc,
                "rel_err_mean": float(errs.mean()) if errs is not None else None,
                **dict(zip(layer_fields, per_layer)),
                "nodes_touched": result.touched,
                "wall_time_ms": (time.perf_counter() - start) * 1000.0,
            }
            rows.append(row)
            if writer is not None:
                writer.writerow([_fmt(row[f]) for f in header])
                fh.flush()
    finally:
        if fh is not None:
            fh.close()
    if out is not None:
        save_params(params, out / "params.ckpt")
    final = evaluate(g, adj, params, val, test)
    return TrainResult(engine, rows, initial, final, diverged)


@dataclass
class GradErrorResult:
    rows: list
    summary: dict


def grad_error(config: RunConfig, out_dir=None, g: Graph | None = None) -> GradErrorResult:
    """Train with the first mode in ``config.modes`` and score every mode's gradient.

    Every historical mode keeps its own store and refreshes it on each step's
    shared batch. After ``config.warmup`` steps, every ``measure_every``-th
    step compares each mode's estimate against the exact full gradient at the
    current parameters.
    """
    config.validate()
    modes = [EstimatorMode.parse(m) for m in config.modes]
    if not modes or EstimatorMode.FULL_BATCH in modes:
        raise ValueError("modes must be a nonempty subset of Cluster, GAS, LMC, LMC_ForwardOnly, BackwardSGD")
    g = build_graph(config) if g is None else g
    adj = normalize_adjacency(g)
    part = resolve_partition(config, g)
    params = init_glorot(model_dims(config, g), config.seed)
    sched = schedule_for(config)
    stores = {m: HistoricalStore.for_model(g.n, params) for m in modes if m.uses_store}
    if config.warm_start:
        for store in stores.values():
            store.warm_start(g, adj, params)
    trainer = Engine(g, part, params, modes[0], c=config.c, schedule=sched, seed=config.seed, adj=adj)
    layer_fields = [f"rel_err_{l}" for l in range(1, params.L + 1)]
    header = ["iteration", "mode", "rel_err_mean", *layer_fields]
    rows = []
    per_mode = {m.value: [] for m in modes}

    for k in range(1, config.iterations + 1):
        batch = trainer.sample()
        measured = k > config.warmup and (k - config.warmup - 1) % config.measure_every == 0
        exact = full_gradients(g, adj, params) if measured else None
        results = {}
        for m in modes:
            if m.uses_store or measured or m is modes[0]:
                results[m] = estimate(m, stores.get(m), batch, g, adj, params, sched)
        if measured:
            for m in modes:
                errs = relative_errors(results[m].grads, exact)
                row = {"iteration": k, "mode": m.value, "rel_err_mean": float(errs.mean()),
                       **{f: float(e) for f, e in zip(layer_fields, errs)}}
                rows.append(row)
                per_mode[m.value].append(errs)
        lead = results[modes[0]]
        if not math.isfinite(lead.loss) or not lead.grads.is_finite():
            raise DivergenceError(k, lead.loss)
        trainer.apply(lead.grads, config.eta)
        trainer.iteration = k

    summary = {}
    for m, errs in per_mode.items():
        if errs:
            arr = np.array(errs)
            summary[m] = {"rel_err_mean": float(arr.mean()),
                          **{f: float(v) for f, v in zip(layer_fields, arr.mean(axis=0))}}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_manifest(out / "manifest.txt", config, g, "grad-error")
        save_partition(part, out / "partition.txt")
        save_params(params, out / "params.ckpt")
        with open(out / "metrics.csv", "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            for row in rows:
                writer.writerow([_fmt(row[f]) for f in header])
            for m, s in summary.items():
                writer.writerow(["mean", m, *(_fmt(s[f]) for f in header[2:])])
    return GradErrorResult(rows, summary)
