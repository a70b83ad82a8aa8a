"""Federated multi-granularity time series forecasting.

The package bundles a small float64 reverse-mode autodiff engine, the
PiXTime encoder-decoder forecaster built on it, a deterministic
in-process federated training simulator with shared/local parameter
decoupling, dataset tooling, and an experiment harness with a CLI.
"""

from .autodiff import (
    AttentionWeights,
    FeedForwardWeights,
    LayerNormWeights,
    Parameter,
    Tensor,
    backward,
    concat,
    ffn,
    gather_rows,
    gelu,
    layer_norm,
    linear,
    matmul,
    mse,
    multi_head_attention,
    no_grad,
    reshape,
    slice_axis,
    softmax,
)
from .data import (
    NodeDataView,
    RawDataset,
    SplitSpec,
    assign_variable_subsets,
    downsample,
    generate_synthetic,
    load_csv,
    make_windows,
    partition_windows,
    standardize,
    write_csv,
)
from .federation import (
    ClientDelta,
    FederatedNode,
    RoundRecord,
    aggregate,
    client_update,
    init_global_shared,
    partition,
    run_federation,
    server_step,
)
from .harness import (
    ExperimentConfig,
    Metrics,
    evaluate,
    persistence_baseline,
    run_experiment,
)
from .model import ForecastSample, ModelDims, NodeShapeConfig, PiXTime, patch_split
from .optim import Adam, AdamState, adam_step, grad_check

__version__ = "0.1.0"
