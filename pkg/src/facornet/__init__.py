"""Kinship representation learning with face componential relations."""
from .errors import (
    ConfigurationError, DataError, FacorError, MissingEntryError, NumericError, ParseError, ProtocolError,
)
from .loss import LossConfig, batch_loss, cosine_similarity, relation_temperature
from .model import (
    AttentionMap, FaCoR, FaCoRConfig, PairEmbedding, attend, channel_interaction, cross_attention,
    facor_forward, init_params, project_features,
)

__all__ = [
    "AttentionMap", "ConfigurationError", "DataError", "FaCoR", "FaCoRConfig", "FacorError", "LossConfig",
    "MissingEntryError", "NumericError", "PairEmbedding", "ParseError", "ProtocolError", "attend",
    "batch_loss", "channel_interaction", "cosine_similarity", "cross_attention", "facor_forward",
    "init_params", "project_features", "relation_temperature",
]
