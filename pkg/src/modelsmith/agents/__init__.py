"""Agent loop, context assembly and the six roles."""

from .context import LoadedKnowledge, assemble_context, query_tool
from .loop import AgentRole, AgentTranscript, Deferred, Tool, ToolError, ToolRegistry, run_agent
from .roles import (
    AgentSettings,
    AggregatorOutput,
    LeaseTable,
    PreconditionError,
    RunContext,
    TranscriptStore,
    make_role,
    role_tools,
    run_aggregator,
    run_coder,
    run_designer,
    run_manager,
    run_setup,
    run_tuner,
)

__all__ = [
    "AgentRole",
    "AgentSettings",
    "AgentTranscript",
    "AggregatorOutput",
    "Deferred",
    "LeaseTable",
    "LoadedKnowledge",
    "PreconditionError",
    "RunContext",
    "Tool",
    "ToolError",
    "ToolRegistry",
    "TranscriptStore",
    "assemble_context",
    "make_role",
    "query_tool",
    "role_tools",
    "run_agent",
    "run_aggregator",
    "run_coder",
    "run_designer",
    "run_manager",
    "run_setup",
    "run_tuner",
]
