"""Identify VR users from body-relative motion with a GRU embedding model and k-NN voting."""

from .encoder import EncoderConfig, EncoderModel, init_encoder, load_model, save_model
from .errors import MotionIDError
from .evaluation import AccuracyGrid, EvalProtocol, accuracy_grid, sequence_accuracy
from .identify import IdentificationResult, identify_sequence, identify_sequence_classifier
from .index import ReferenceIndex
from .losses import LossConfig
from .motion_data import RawSequence, parse_recording, read_recording
from .preprocessing import FeatureSequence, encode_bra
from .training import TrainConfig, fit, fit_classifier

__version__ = "0.1.0"

__all__ = [
    "AccuracyGrid", "EncoderConfig", "EncoderModel", "EvalProtocol", "FeatureSequence",
    "IdentificationResult", "LossConfig", "MotionIDError", "RawSequence", "ReferenceIndex",
    "TrainConfig", "accuracy_grid", "encode_bra", "fit", "fit_classifier", "identify_sequence",
    "identify_sequence_classifier", "init_encoder", "load_model", "parse_recording",
    "read_recording", "save_model", "sequence_accuracy",
]
