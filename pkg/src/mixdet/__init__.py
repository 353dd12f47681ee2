"""Mixed one-to-one / one-to-many supervision for set-prediction detection."""

from ._version import __version__
from .boxes import Box, BoxForm, convert, giou, iou, pairwise_giou, pairwise_iou
from .data import CLASS_NAMES, DatasetError, DatasetSpec, Scene, generate, load_scenes, save_scenes
from .estimator import MixedSupervisionDetector
from .losses import LossBreakdown, LossConfig, box_loss, cls_loss, total_loss
from .matching import (
    MatcherConfig,
    OneToManyAssignment,
    OneToOneMatch,
    hungarian,
    match_score,
    o2o_cost_matrix,
    one_to_many_match,
)
from .metrics import EvalReport, candidate_quality, evaluate_predictions
from .model import (
    DecoderVariant,
    Detector,
    LayerPredictions,
    ModelConfig,
    load_checkpoint,
    save_checkpoint,
)
from .training import TrainConfig, TrainingDiverged, evaluate, train

__all__ = [
    "__version__",
    "Box",
    "BoxForm",
    "convert",
    "iou",
    "giou",
    "pairwise_iou",
    "pairwise_giou",
    "MatcherConfig",
    "OneToOneMatch",
    "OneToManyAssignment",
    "hungarian",
    "o2o_cost_matrix",
    "match_score",
    "one_to_many_match",
    "LossConfig",
    "LossBreakdown",
    "cls_loss",
    "box_loss",
    "total_loss",
    "ModelConfig",
    "DecoderVariant",
    "Detector",
    "LayerPredictions",
    "save_checkpoint",
    "load_checkpoint",
    "DatasetSpec",
    "DatasetError",
    "Scene",
    "CLASS_NAMES",
    "generate",
    "save_scenes",
    "load_scenes",
    "EvalReport",
    "evaluate_predictions",
    "candidate_quality",
    "TrainConfig",
    "TrainingDiverged",
    "train",
    "evaluate",
    "MixedSupervisionDetector",
]
