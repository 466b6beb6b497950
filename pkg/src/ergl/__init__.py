"""Event-relational graph learning for acoustic scene classification."""

from .audio import LogMelExtractor, log_mel, read_wav
from .checkpoint import Checkpoint
from .estimator import ERGLClassifier
from .exceptions import (CheckpointError, CompatibilityError, ConfigurationError, ContractError,
                         DimensionError, ERGLError, FormatError, InputTooShortError, NumericalError)
from .model import ERGLNet, ModelConfig
from .ranking import EventRanker, EventVocabulary
from .training import TrainConfig, train

__version__ = "0.1.0"
