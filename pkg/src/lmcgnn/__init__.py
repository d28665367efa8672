"""Subgraph-wise GCN training with local message compensation."""

from lmcgnn.backward import (
    AuxVars,
    GradientSet,
    backward_layer,
    backward_sgd_gradients,
    finite_diff_gradients,
    full_gradients,
    relative_errors,
    vec,
)
from lmcgnn.estimator import GCNClassifier
from lmcgnn.graph import (
    Graph,
    Halo,
    NormalizedAdjacency,
    generate_sbm,
    halo_of,
    load_graph,
    normalize_adjacency,
    save_graph,
)
from lmcgnn.lmc import (
    BetaSchedule,
    Engine,
    EstimatorMode,
    HistoricalStore,
    beta_for,
    minibatch_gradients,
)
from lmcgnn.model import LayerState, ModelParams, forward_full, init_glorot, layer_forward
from lmcgnn.partition import MiniBatch, Partition, enumerate_batches, partition_bfs, sample_batch

__version__ = "0.1.0"
