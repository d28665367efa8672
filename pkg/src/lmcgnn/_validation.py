"""Input checks shared by the estimator front-end."""

from __future__ import annotations

import numbers

import numpy as np

from lmcgnn.graph import Graph


def check_graph(X) -> Graph:
    if not isinstance(X, Graph):
        raise TypeError(f"expected a lmcgnn.Graph, got {type(X).__name__}")
    return X


def check_node_labels(y, n: int):
    """Split semi-supervised targets (``-1`` = unlabeled) into labels and mask."""
    y = np.asarray(y)
    if y.shape != (n,):
        raise ValueError(f"y must have shape ({n},), got {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ValueError("y must hold integer class ids (-1 for unlabeled)")
        y = y.astype(np.int64)
    if y.min() < -1:
        raise ValueError("class ids must be >= 0, or -1 for unlabeled nodes")
    mask = y >= 0
    if not mask.any():
        raise ValueError("y has no labeled nodes")
    return np.where(mask, y, 0), mask


def check_scalar(value, name, kind=numbers.Real, low=None, high=None, include_low=True):
    if not isinstance(value, kind) or isinstance(value, bool):
        raise TypeError(f"{name} must be {kind.__name__}, got {type(value).__name__}")
    if low is not None and (value < low or (value == low and not include_low)):
        raise ValueError(f"{name}={value} is out of range")
    if high is not None and value > high:
        raise ValueError(f"{name}={value} is out of range")
    return value
