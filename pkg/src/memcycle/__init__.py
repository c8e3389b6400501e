"""memcycle: guided memory construction, diagnosis-driven retrieval and self-repair for dialogue agents."""
from __future__ import annotations

from .config import ProviderConfig, RunConfig, build_config
from .construction import DialogueChunk, Session, construct_chunk
from .errors import MemcycleError
from .evaluation import ConversationDataset, RunReport, bleu1, ingest_dataset, run_experiment, token_f1
from .evolution import evolve_session
from .memory import EditAction, EditKind, MemoryBank, MemoryEntry, apply_edit, bounded_view, search_top_k
from .providers import AgentRole, Cassette, CassetteProvider, LiveProvider
from .retrieval import generate_answer, refine_and_probe

__version__ = "0.1.0"

__all__ = [
    "AgentRole", "Cassette", "CassetteProvider", "ConversationDataset", "DialogueChunk", "EditAction",
    "EditKind", "LiveProvider", "MemcycleError", "MemoryBank", "MemoryEntry", "ProviderConfig",
    "RunConfig", "RunReport", "Session", "apply_edit", "bleu1", "bounded_view", "build_config",
    "construct_chunk", "evolve_session", "generate_answer", "ingest_dataset", "refine_and_probe",
    "run_experiment", "search_top_k", "token_f1",
]
