"""Skill-accumulating agent runtime: skill packages, a gated skill bank,
compressible conversation context, file-backed memory, sandboxed tools and
the agent loop that ties them together."""

from .agent_loop import (
    ToolRegistry,
    call_model_with_retry,
    default_registry,
    dispatch_tool_call,
    execute_skill,
    gate_final_answer,
    run_task,
    truncate_tool_output,
)
from .config import LoopConfig, init_home, resolve_home
from .context_dag import (
    AgentContext,
    CompressionBudget,
    TurnPayload,
    active_chain,
    append_turn,
    maybe_compress_history,
    replay_full_history,
)
from .memory_store import append_block, read_blocks
from .model import HttpModelClient, ModelRequest, ModelResponse, ScriptedModel
from .session_store import create_session, finalize_session, resume_session
from .skill_bank import EvaluationResult, SkillBank, serialize_catalog
from .skill_lifecycle import (
    SkillSpec,
    create_skill,
    distill_skill_from_trajectory,
    evaluate_skill,
    refine_skill,
)
from .skill_package import load_package, parse_skill_md, validate_package, write_skill_package

__version__ = "0.1.0"

__all__ = [
    "active_chain",
    "AgentContext",
    "append_block",
    "append_turn",
    "call_model_with_retry",
    "CompressionBudget",
    "create_session",
    "create_skill",
    "default_registry",
    "dispatch_tool_call",
    "distill_skill_from_trajectory",
    "evaluate_skill",
    "EvaluationResult",
    "execute_skill",
    "finalize_session",
    "gate_final_answer",
    "HttpModelClient",
    "init_home",
    "load_package",
    "LoopConfig",
    "maybe_compress_history",
    "ModelRequest",
    "ModelResponse",
    "parse_skill_md",
    "read_blocks",
    "refine_skill",
    "replay_full_history",
    "resolve_home",
    "resume_session",
    "run_task",
    "ScriptedModel",
    "serialize_catalog",
    "SkillBank",
    "SkillSpec",
    "ToolRegistry",
    "truncate_tool_output",
    "TurnPayload",
    "validate_package",
    "write_skill_package",
]
