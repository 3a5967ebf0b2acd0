"""Streaming item indexing with a dynamic fine codebook and a merged coarse layer."""

from .core import (
    AssignmentIndex,
    ClusterSlot,
    CoarseCodebook,
    CoarsePrototype,
    FineCodebook,
    IndexConfig,
    ItemRecord,
    SlotState,
    audit_codebook,
    cosine_similarity,
)
from .indexer import DynamicIndexer, StepReport
from .hierarchy import build_hierarchy

__version__ = "0.1.0"

__all__ = [
    "AssignmentIndex",
    "ClusterSlot",
    "CoarseCodebook",
    "CoarsePrototype",
    "DynamicIndexer",
    "FineCodebook",
    "IndexConfig",
    "ItemRecord",
    "SlotState",
    "StepReport",
    "audit_codebook",
    "build_hierarchy",
    "cosine_similarity",
]
