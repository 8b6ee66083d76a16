"""Sequential recommendation with an invariant adjustment representation."""

from .data import DatasetSplits, SequenceExample, build_splits, five_core_filter, ingest
from .harness import EvalReport, TrainConfig, ablate, evaluate, run, train
from .objective import InvariantRecommender, LossWeights
from .synthetic import SynthConfig, generate

__all__ = [
    "DatasetSplits",
    "EvalReport",
    "InvariantRecommender",
    "LossWeights",
    "SequenceExample",
    "SynthConfig",
    "TrainConfig",
    "ablate",
    "build_splits",
    "evaluate",
    "five_core_filter",
    "generate",
    "ingest",
    "run",
    "train",
]

__version__ = "0.1.0"
