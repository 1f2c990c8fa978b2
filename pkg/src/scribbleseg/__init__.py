"""Scribble-driven interactive 3D segmentation refinement."""

from .errors import (
    FormatError,
    GridTooLargeError,
    NothingToLearnError,
    TrainingDivergedError,
    ValidationError,
)
from .geodesic import (
    DistanceMap,
    GeodesicConfig,
    WeightMap,
    geodesic_distance,
    geodesic_distance_exact,
    scribble_weights,
    weights_from_distance,
)
from .graphcut import GraphCutConfig, energy_of, graphcut_refine
from .grid import (
    LabelMap,
    ProbMap,
    ScribbleSet,
    Volume,
    coord_of,
    linear_index,
    normalize_volume,
)
from .metrics import EvalReport, assd, dice
from .model import (
    BalanceWeights,
    LikelihoodModel,
    ModelConfig,
    SampleSet,
    adaptive_loss,
    build_training_set,
    load_model,
    pretrain_offline,
    prune_labels,
    save_model,
    train_online,
)
from .session import RefineSettings, Session, SessionBusyError, SessionStore
from .synth import (
    CorruptionSpec,
    PhantomSpec,
    ScribblerConfig,
    corrupt_segmentation,
    make_phantom,
    synthesize_scribbles,
)

__version__ = "0.1.0"

__all__ = [
    "FormatError",
    "GridTooLargeError",
    "NothingToLearnError",
    "TrainingDivergedError",
    "ValidationError",
    "DistanceMap",
    "GeodesicConfig",
    "WeightMap",
    "geodesic_distance",
    "geodesic_distance_exact",
    "scribble_weights",
    "weights_from_distance",
    "GraphCutConfig",
    "energy_of",
    "graphcut_refine",
    "LabelMap",
    "ProbMap",
    "ScribbleSet",
    "Volume",
    "coord_of",
    "linear_index",
    "normalize_volume",
    "EvalReport",
    "assd",
    "dice",
    "BalanceWeights",
    "LikelihoodModel",
    "ModelConfig",
    "SampleSet",
    "adaptive_loss",
    "build_training_set",
    "load_model",
    "pretrain_offline",
    "prune_labels",
    "save_model",
    "train_online",
    "RefineSettings",
    "Session",
    "SessionBusyError",
    "SessionStore",
    "CorruptionSpec",
    "PhantomSpec",
    "ScribblerConfig",
    "corrupt_segmentation",
    "make_phantom",
    "synthesize_scribbles",
    "__version__",
]
