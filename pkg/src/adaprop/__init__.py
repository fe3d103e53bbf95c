"""Knowledge-graph reasoning with learned, query-dependent propagation paths."""

from .errors import (AdaPropError, CheckpointError, ConfigError, ContractError, DimensionError,
                     NumericError, ParseError, VocabError)
from .kg_store import DatasetBundle, KnowledgeGraph, Vocab, load_dataset
from .propagation import ModelConfig, ModelParams, PropagationPath
from .sampler import adaprop_batch, adaprop_forward, gumbel_topk
from .trainer import TrainConfig, train

__all__ = [
    "AdaPropError", "CheckpointError", "ConfigError", "ContractError", "DimensionError",
    "NumericError", "ParseError", "VocabError", "DatasetBundle", "KnowledgeGraph", "Vocab",
    "load_dataset", "ModelConfig", "ModelParams", "PropagationPath", "adaprop_batch",
    "adaprop_forward", "gumbel_topk", "TrainConfig", "train",
]
__version__ = "0.1.0"
