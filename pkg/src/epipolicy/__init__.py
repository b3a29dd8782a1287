"""Weekly policymaker agents inside a stochastic SEIR / SEIRb world model."""
from .agents import (
    AgentDecision,
    DecisionContext,
    ParseFailure,
    PolicyAgent,
    build_prompt,
    ensemble_decide,
    knowledge_text,
    parse_decision,
    scripted_threshold_decide,
)
from .epidemic import EpidemicState, WorldConfig, WorldMode
from .harness import AgentKind, Backend, ExperimentMatrix, RunConfig, RunLog, load, persist, run_experiment, run_simulation
from .memory import MemoryRecord, MemoryStore, retrieval_weights

__version__ = "0.1.0"

__all__ = [
    "AgentDecision",
    "DecisionContext",
    "ParseFailure",
    "PolicyAgent",
    "build_prompt",
    "ensemble_decide",
    "knowledge_text",
    "parse_decision",
    "scripted_threshold_decide",
    "EpidemicState",
    "WorldConfig",
    "WorldMode",
    "AgentKind",
    "Backend",
    "ExperimentMatrix",
    "RunConfig",
    "RunLog",
    "load",
    "persist",
    "run_experiment",
    "run_simulation",
    "MemoryRecord",
    "MemoryStore",
    "retrieval_weights",
]
