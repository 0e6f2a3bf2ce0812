"""Feature-level gating for CTR models: search a binary feature mask, then retrain."""
from .data import (DatasetSchema, EncodedDataset, FeatureVocabulary, SyntheticSpec,
                   build_vocabulary, encode, decode, discretize_numeric, generate_synthetic)
from .errors import ConfigError, DataError, HashMismatchError, NumericError, OptFSError, UndefinedMetricError
from .gating import BinaryGate, GateState, discretize, effective_gate, temperature
from .metrics import EvalReport, auc, logloss, mutual_information
from .models import CTRModel, ModelConfig, build_model
from .trainer import TrainConfig, TrainSnapshot, retrain, search, train_backbone

__version__ = "0.1.0"
