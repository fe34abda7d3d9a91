"""Memory-augmented Chebyshev graph convolutions for pairwise connectome matching."""

from .errors import NumericalError, ParseError, ValidationError
from .graph import SpatialGraph, build_spatial_graph
from .model import MemGCN, MLPBaseline, RawEdges
from .training import TrainConfig, enumerate_pairs, kfold_split, train

__all__ = [
    "MLPBaseline", "MemGCN", "NumericalError", "ParseError", "RawEdges", "SpatialGraph",
    "TrainConfig", "ValidationError", "build_spatial_graph", "enumerate_pairs", "kfold_split", "train",
]
