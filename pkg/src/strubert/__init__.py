"""Structure-aware table matching and retrieval on a small numpy autodiff engine."""

from .matcher import ModelConfig, StruBERT
from .tables import Corpus, Limits, Table, Vocabulary, parse_corpus
from .train import TrainConfig, cross_validate

__all__ = ["Corpus", "Limits", "ModelConfig", "StruBERT", "Table", "TrainConfig", "Vocabulary",
           "cross_validate", "parse_corpus"]
__version__ = "0.1.0"
