"""Video-query moment retrieval by multi-graph feature fusion over frame features."""

from .dataset import Corpus, Segment, SyntheticSpec, VideoFeatures, generate_synthetic_corpus
from .graphs import AdjacencySet, build_adjacency_set
from .model import Model, ModelConfig, forward_pair
from .numeric import ParamStore, Tape, finite_diff_check
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "AdjacencySet", "Corpus", "Model", "ModelConfig", "ParamStore", "Segment", "SyntheticSpec",
    "Tape", "TrainConfig", "VideoFeatures", "build_adjacency_set", "finite_diff_check",
    "forward_pair", "generate_synthetic_corpus", "train",
]
