"""Federated hypergraph-grounded QA memory with dual-path query routing."""

__version__ = "0.1.0"

from .corpus import AnchorSet, Document, TextUnit, TypedFact, extract_anchors, segment
from .embedding import EmbeddingProviderConfig, cosine, embed_batch
from .hypergraph import TrainConfig, TrainedHypergraph, project_to_simplex, train
from .inference import Query, RouteConfig, RouteResult, route
from .memory import MemoryBank, QaMemoryItem, build_bank
from .privacy import LdpConfig, anonymize, mechanism_table, perturb

__all__ = [
    "AnchorSet",
    "Document",
    "EmbeddingProviderConfig",
    "LdpConfig",
    "MemoryBank",
    "QaMemoryItem",
    "Query",
    "RouteConfig",
    "RouteResult",
    "TextUnit",
    "TrainConfig",
    "TrainedHypergraph",
    "TypedFact",
    "anonymize",
    "build_bank",
    "cosine",
    "embed_batch",
    "extract_anchors",
    "mechanism_table",
    "perturb",
    "project_to_simplex",
    "route",
    "segment",
    "train",
]
