"""Sequence modeling for goal-labeled, continuous-time action streams.

The package trains a small self-attention model over (action, timestamp)
sequences to predict the next action and its timing through a lognormal gap
density, detect the sequence's goal early, and generate whole sequences
conditioned on a goal. All math runs on a built-in float64 tape-based
gradient engine; file formats are line-delimited JSON throughout.
"""

__version__ = "0.1.0"

from .data import (
    Action,
    ClusterMap,
    Ctas,
    DataError,
    ParseError,
    Vocab,
    load_corpus,
    write_corpus,
)
from .evaluation import EvalReport, full_report
from .generation import GenRequest, generate
from .model import Model, ModelConfig
from .numerics import (
    FdReport,
    GradTape,
    NumericError,
    ParamStore,
    ShapeError,
    Tensor,
    finite_difference_check,
)
from .synth import SynthSpec
from .training import (
    TrainConfig,
    TrainingDiverged,
    load_checkpoint,
    run_training,
    save_checkpoint,
)

__all__ = [
    "Action",
    "ClusterMap",
    "Ctas",
    "DataError",
    "EvalReport",
    "FdReport",
    "GenRequest",
    "GradTape",
    "Model",
    "ModelConfig",
    "NumericError",
    "ParamStore",
    "ParseError",
    "ShapeError",
    "SynthSpec",
    "Tensor",
    "TrainConfig",
    "TrainingDiverged",
    "Vocab",
    "finite_difference_check",
    "full_report",
    "generate",
    "load_checkpoint",
    "load_corpus",
    "run_training",
    "save_checkpoint",
    "write_corpus",
    "__version__",
]
