"""Coarse-grain fine-grain coattention network for multi-document multiple-choice QA.

Pure numpy: a small reverse-mode autodiff core (:mod:`cfc.tensor`), GRU and
attention layers, the two-module scorer (:mod:`cfc.model`), data handling,
training and a command-line front end.
"""
from .data import Example, Vocabulary, load_dataset, load_embeddings, mask_candidates, save_dataset
from .errors import CfcError
from .mentions import MentionSpan, find_mentions
from .model import CFC, AblationConfig, DropoutRates, ModelConfig
from .training import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "CFC",
    "AblationConfig",
    "CfcError",
    "DropoutRates",
    "Example",
    "MentionSpan",
    "ModelConfig",
    "TrainConfig",
    "Vocabulary",
    "evaluate",
    "find_mentions",
    "load_dataset",
    "load_embeddings",
    "mask_candidates",
    "save_dataset",
    "train",
]
