"""Point cloud place recognition: adaptive local features, dual-space graph
aggregation, and NetVLAD global descriptors, with retrieval and environment
analysis utilities. The heavy lifting lives in the C++ core module."""

from lpdnet._core import (
    DataError,
    DescriptorIndex,
    KdTree,
    Model,
    NetworkConfig,
    NumericError,
    cluster_descriptors,
    compute_local_features,
    downsample_random,
    generate_synthetic_place,
    lazy_quadruplet_loss,
    load_cloud,
    normalize_cloud,
    run_gradcheck,
    save_cloud,
    train_synthetic,
    uniqueness,
)

__all__ = [
    "DataError",
    "DescriptorIndex",
    "KdTree",
    "Model",
    "NetworkConfig",
    "NumericError",
    "cluster_descriptors",
    "compute_local_features",
    "downsample_random",
    "generate_synthetic_place",
    "lazy_quadruplet_loss",
    "load_cloud",
    "normalize_cloud",
    "run_gradcheck",
    "save_cloud",
    "train_synthetic",
    "uniqueness",
]

__version__ = "0.1.0"
