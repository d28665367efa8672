"""scikit-learn style front-end for transductive node classification."""

from __future__ import annotations

import numbers

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from lmcgnn._validation import check_graph, check_node_labels, check_scalar
from lmcgnn.graph import Graph, normalize_adjacency
from lmcgnn.lmc import BetaSchedule, Engine, EstimatorMode, default_schedule
from lmcgnn.model import forward_full, init_glorot
from lmcgnn.partition import partition_bfs


class GCNClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """GCN node classifier trained with a subgraph-wise gradient estimator.

    ``X`` is always a :class:`~lmcgnn.graph.Graph`. ``y``, when given, holds
    one class id per node with ``-1`` for unlabeled nodes and replaces the
    graph's own labels. ``predict`` and ``transform`` return one row per node.

    Parameters
    ----------
    mode : {"LMC", "LMC_ForwardOnly", "GAS", "Cluster", "BackwardSGD", "FullBatch"}
    n_parts : int
        Number of clusters the graph is partitioned into.
    batch_clusters : int
        Clusters sampled per step.
    alpha, beta_score : float, str or None
        Boundary mixing schedule; ``None`` picks a default from the batch size.
    """

    def __init__(
        self,
        hidden=16,
        layers=2,
        mode="LMC",
        n_parts=8,
        batch_clusters=2,
        eta=0.5,
        n_iter=200,
        alpha=None,
        beta_score=None,
        warm_start_store=False,
        random_state=0,
    ):
        self.hidden = hidden
        self.layers = layers
        self.mode = mode
        self.n_parts = n_parts
        self.batch_clusters = batch_clusters
        self.eta = eta
        self.n_iter = n_iter
        self.alpha = alpha
        self.beta_score = beta_score
        self.warm_start_store = warm_start_store
        self.random_state = random_state

    def _check_params(self):
        check_scalar(self.hidden, "hidden", numbers.Integral, low=1)
        check_scalar(self.layers, "layers", numbers.Integral, low=1)
        check_scalar(self.n_parts, "n_parts", numbers.Integral, low=1)
        check_scalar(self.batch_clusters, "batch_clusters", numbers.Integral, low=1, high=self.n_parts)
        check_scalar(self.eta, "eta", numbers.Real, low=0.0, include_low=False)
        check_scalar(self.n_iter, "n_iter", numbers.Integral, low=0)
        EstimatorMode.parse(self.mode)
        if self.alpha is None and self.beta_score is None:
            return default_schedule(self.n_parts, self.batch_clusters)
        return BetaSchedule(
            alpha=0.4 if self.alpha is None else float(self.alpha),
            score_kind=self.beta_score or "2x-x^2",
        )

    def fit(self, X, y=None):
        g = check_graph(X)
        sched = self._check_params()
        if y is not None:
            labels, mask = check_node_labels(y, g.n)
            g = Graph(g.indptr, g.indices, g.features, labels, mask)
        if self.n_parts > g.n:
            raise ValueError(f"n_parts={self.n_parts} exceeds the node count {g.n}")
        seed = 0 if self.random_state is None else self.random_state
        self.classes_ = np.unique(g.labels[g.labeled_mask])
        n_classes = max(int(self.classes_.max()) + 1, g.n_classes)
        params = init_glorot((g.d_x, *([self.hidden] * self.layers), n_classes), seed)
        self.partition_ = partition_bfs(g, self.n_parts, seed)
        self.engine_ = Engine(
            g, self.partition_, params, self.mode, c=self.batch_clusters,
            schedule=sched, seed=seed, warm_start=self.warm_start_store,
        )
        self.loss_curve_ = [self.engine_.step(self.eta).loss for _ in range(self.n_iter)]
        self.params_ = self.engine_.params
        self.n_features_in_ = g.d_x
        return self

    def _forward(self, X):
        check_is_fitted(self, "params_")
        g = check_graph(X)
        if g.d_x != self.n_features_in_:
            raise ValueError(f"X has {g.d_x} features, fitted with {self.n_features_in_}")
        return forward_full(g, normalize_adjacency(g), self.params_)

    def transform(self, X):
        """Last-layer node embeddings, shape ``(n, d_L)``."""
        return self._forward(X).embeddings[-1]

    def decision_function(self, X):
        return self.transform(X) @ self.params_.w_out.T

    def predict_proba(self, X):
        logits = self.decision_function(X)
        logits = logits - logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X):
        return self.decision_function(X).argmax(axis=1)
