"""Experience memory graph: construction, retrieval and feedback-driven evolution."""

from .construction import ConstructionConfig, build_memory, erv_quality
from .evolution import EvolutionConfig, FeedbackEvent, apply_feedback, insert_experience
from .graph import MemoryGraph, load_snapshot, save_snapshot
from .model import CaseRecord, Entity, EntityRole, Experience, Polarity, RoleEdge
from .retrieval import RetrievalConfig, retrieve, traverse
from .similarity import SimilarityWeights

__version__ = "0.1.0"

__all__ = [
    "CaseRecord",
    "ConstructionConfig",
    "Entity",
    "EntityRole",
    "EvolutionConfig",
    "Experience",
    "FeedbackEvent",
    "MemoryGraph",
    "Polarity",
    "RetrievalConfig",
    "RoleEdge",
    "SimilarityWeights",
    "apply_feedback",
    "build_memory",
    "erv_quality",
    "insert_experience",
    "load_snapshot",
    "retrieve",
    "save_snapshot",
    "traverse",
]
