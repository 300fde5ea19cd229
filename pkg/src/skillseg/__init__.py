"""Skill boundary detection from predictive-loss spikes."""

from .core import (
    Boundary,
    BoundarySet,
    ConfigError,
    ContractError,
    DetectorConfig,
    EventSet,
    RangeError,
    Reason,
    Segment,
    Step,
    Trajectory,
    segments_from_boundaries,
    validate_trajectory,
)
from .detection import IndicatorTrack, detect_boundaries, mark_event_indicators, segment_corpus
from .predictor import (
    CountPredictor,
    MixtureOraclePredictor,
    PredictorModel,
    StepLoss,
    oracle_predict,
    step_loss,
    train_count_predictor,
)
from .pruning import PruneConfig, prune_lengths, prune_segments

__version__ = "0.1.0"
