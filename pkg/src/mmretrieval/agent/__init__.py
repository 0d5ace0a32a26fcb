from .backends import (
    AgentBackend,
    AgentRequest,
    HttpAgentBackend,
    RecordingBackend,
    ReplayBackend,
    ScriptedBackend,
)
from .loop import (
    STOP_TOKEN,
    AgentConfig,
    ConcatText,
    EvaluatorVerdict,
    build_concat,
    evaluate,
    refine,
    run_refinement_loop,
    summarize,
)
from .mock import MockAgentBackend

__all__ = [
    "STOP_TOKEN",
    "AgentBackend",
    "AgentConfig",
    "AgentRequest",
    "ConcatText",
    "EvaluatorVerdict",
    "HttpAgentBackend",
    "MockAgentBackend",
    "RecordingBackend",
    "ReplayBackend",
    "ScriptedBackend",
    "build_concat",
    "evaluate",
    "refine",
    "run_refinement_loop",
    "summarize",
]
