"""The plan / act / observe loop.

Each turn: compress the active chain if it is over budget, ask the model
(with retry), run the tool calls it made, and store response plus
observations as one conversation node. The run ends on an accepted
``final_answer``; before ``verify_completion_turn_threshold`` an answer is
only accepted after a forced ``verify_completion`` check.
"""

from __future__ import annotations

import inspect
import random
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path, PurePosixPath
from string import Template
from typing import Any, Callable

from importlib import resources

from ._fsutil import TimeSource, iso_ts, utc_now
from .config import LoopConfig, long_term_memory_path
from .context_dag import (
    AgentContext,
    CompressionBudget,
    ToolCall,
    TurnPayload,
    active_payloads,
    append_turn,
    maybe_compress_history,
    replay_full_history,
)
from .errors import (
    AlreadyFinalized,
    IoFailure,
    LoopAborted,
    ModelError,
    ModelExhaustedRetries,
    PathEscape,
    SandboxFileNotFound,
    TransientModelError,
    UnknownSkill,
    UnknownTool,
)
from .memory_store import append_block, format_header, read_text
from .model import ModelClient, ModelRequest, ModelResponse
from .sandbox import (
    KILL_GRACE_SECONDS,
    ExecResult,
    SandboxBackend,
    SandboxConfig,
    SandboxHandle,
    SandboxManager,
    close_sandbox,
    create_sandbox,
    sandbox_download,
    sandbox_run,
    sandbox_upload,
)
from .session_store import (
    RunMeta,
    SessionWorkspace,
    finalize_session,
    load_snapshot,
    persist_snapshot,
    session_catalog,
)
from .skill_bank import SkillBank, serialize_catalog
from .skill_lifecycle import SkillSpec, create_and_register, extract_json, staging_root
from .skill_package import MEMORY_FILE

BACKOFF_BASE_SECONDS = 1.0
BACKOFF_FACTOR = 2.0
TRUNCATION_MARKER = "\n[truncated: {n} chars omitted]"
PROMPT_MEMORY_CHARS = 4_000

VERIFY_SYSTEM = (
    "You check whether an agent has finished its task. Given the task, the work so far and "
    'the proposed final answer, reply with JSON {"complete": true|false, "reason": "..."}.'
)


# -- output truncation -----------------------------------------------------------


def truncate_tool_output(text: str, limit: int = LoopConfig.tool_text_limit) -> str:
    """Cap ``text`` at ``limit`` chars, ending with a marker that counts what was cut."""
    if len(text) <= limit:
        return text
    kept = limit
    # the marker's digit count depends on how much is cut, so settle it iteratively
    while True:
        marker = TRUNCATION_MARKER.format(n=len(text) - kept)
        new_kept = limit - len(marker)
        if new_kept >= kept:
            break
        kept = new_kept
    if kept < 0:
        return text[:limit]
    return text[:kept] + marker


# -- model retry -------------------------------------------------------------------


def backoff_delay(retry: int, rng: random.Random) -> float:
    """Full jitter: uniform in [0, base * factor ** (retry - 1)]."""
    return rng.uniform(0.0, BACKOFF_BASE_SECONDS * BACKOFF_FACTOR ** (retry - 1))


def _call_with_retry(
    model: ModelClient,
    request: ModelRequest,
    cfg: LoopConfig,
    sleep: Callable[[float], Any],
    rng: random.Random,
    on_backoff: Callable[[int, float, Exception], None] | None,
) -> tuple[ModelResponse, int]:
    attempt = 0
    while True:
        attempt += 1
        try:
            return model.request(request), attempt
        except TransientModelError as exc:
            if attempt > cfg.max_retry:
                raise ModelExhaustedRetries(
                    f"model call ({request.purpose}) failed after {cfg.max_retry} retries: {exc}", attempt
                ) from exc
            delay = backoff_delay(attempt, rng)
            if on_backoff is not None:
                on_backoff(attempt, delay, exc)
            sleep(delay)


def call_model_with_retry(
    model: ModelClient,
    request: ModelRequest,
    cfg: LoopConfig = LoopConfig(),
    *,
    sleep: Callable[[float], Any] = time.sleep,
    rng: random.Random | None = None,
    on_backoff: Callable[[int, float, Exception], None] | None = None,
) -> ModelResponse:
    """Retry transient failures up to ``cfg.max_retry`` times; permanent ones propagate."""
    return _call_with_retry(model, request, cfg, sleep, rng or random.Random(), on_backoff)[0]


class RetryingModel:
    """Adapter adding retry to a client (for use outside a session)."""

    def __init__(self, model: ModelClient, cfg: LoopConfig = LoopConfig(), sleep=time.sleep, rng=None):
        self.model = model
        self.model_id = model.model_id
        self.cfg = cfg
        self.sleep = sleep
        self.rng = rng or random.Random()

    def request(self, request: ModelRequest) -> ModelResponse:
        return call_model_with_retry(self.model, request, self.cfg, sleep=self.sleep, rng=self.rng)


# -- completion gate ----------------------------------------------------------------


@dataclass(frozen=True)
class GateDecision:
    action: str  # accept | force_verify
    accepted: bool
    reason: str = ""


def gate_final_answer(
    turn_index: int,
    cfg: LoopConfig,
    verifier: Callable[[], tuple[bool, str]] | None = None,
) -> GateDecision:
    """Turns before the threshold need a verifier verdict of complete."""
    if turn_index >= cfg.verify_completion_turn_threshold:
        return GateDecision("accept", True)
    if verifier is None:
        return GateDecision("force_verify", False, "verification required")
    complete, reason = verifier()
    return GateDecision("force_verify", bool(complete), reason)


def parse_verdict(text: str) -> tuple[bool, str]:
    try:
        data = extract_json(text)
        return bool(data.get("complete")), str(data.get("reason", ""))
    except ValueError:
        head = text.strip().lower()
        return head.startswith(("yes", "complete")), text.strip()


# -- tools ----------------------------------------------------------------------------


@dataclass(frozen=True)
class Tool:
    name: str
    description: str
    parameters: dict
    handler: Callable[..., str]
    # tool | terminal | exec | verify
    timeout_class: str = "tool"

    def schema(self) -> dict:
        return {"name": self.name, "description": self.description, "parameters": self.parameters}


class ToolRegistry:
    def __init__(self, tools: list[Tool] | tuple[Tool, ...] = ()):
        self._tools: dict[str, Tool] = {}
        for t in tools:
            self.register(t)

    def register(self, tool: Tool) -> None:
        if tool.name in self._tools:
            raise ValueError(f"tool {tool.name!r} already registered")
        self._tools[tool.name] = tool

    def get(self, name: str) -> Tool:
        try:
            return self._tools[name]
        except KeyError:
            raise UnknownTool(name) from None

    def __contains__(self, name: str) -> bool:
        return name in self._tools

    def names(self) -> list[str]:
        return list(self._tools)

    def schemas(self) -> tuple[dict, ...]:
        return tuple(t.schema() for t in self._tools.values())


def dispatch_tool_call(registry: ToolRegistry, call: ToolCall, cfg: LoopConfig, runtime: Any = None) -> str:
    """Run one tool call under its timeout class; errors come back as text."""
    try:
        tool = registry.get(call.name)
    except UnknownTool:
        return f"error: unknown tool {call.name}"
    try:
        inspect.signature(tool.handler).bind(runtime, **call.arguments)
    except TypeError as exc:
        return f"error: bad arguments for {call.name}: {exc}"
    limit = cfg.timeout_for(tool.timeout_class)
    wait = limit
    if tool.timeout_class in ("terminal", "exec"):
        # the subprocess is killed at `limit`; leave room to collect its output
        wait = limit + KILL_GRACE_SECONDS + 5
    box: dict[str, Any] = {}

    def target():
        try:
            box["out"] = tool.handler(runtime, **call.arguments)
        except BaseException as exc:  # reported to the model
            box["err"] = exc

    worker = threading.Thread(target=target, name=f"tool-{call.name}", daemon=True)
    worker.start()
    worker.join(wait)
    if worker.is_alive():
        if runtime is not None:
            runtime.abandoned.add(worker.ident)
        return f"error: tool {call.name} timed out after {limit:g}s"
    if "err" in box:
        exc = box["err"]
        return f"error: {type(exc).__name__}: {exc}"
    return truncate_tool_output(str(box.get("out", "")), cfg.tool_text_limit)


def execute_skill(ws: SessionWorkspace, bank: SkillBank, name: str) -> str:
    """Load a skill (session-injected first, then the bank) with its memory."""
    injected = ws.injected_skills()
    if name in injected:
        pkg = injected[name]
        mem = Path(pkg.root) / MEMORY_FILE
        memory = mem.read_text(encoding="utf-8") if mem.is_file() else ""
    else:
        pkg, memory = bank.resolve(name)
    parts = [f"Skill `{name}` (skills/{name}/SKILL.md)", "", pkg.body.strip("\n")]
    if pkg.files:
        parts += ["", "Files:"] + [f"- skills/{name}/{rel}" for rel in sorted(pkg.files)]
    parts += ["", "Skill memory (.memory.md):", memory.rstrip("\n") or "(empty)"]
    return "\n".join(parts)


def _obj(props: dict, required: list[str]) -> dict:
    return {"type": "object", "properties": props, "required": required}


_STR = {"type": "string"}


def _skill_create(rt: SessionRuntime, purpose: str, inputs: str = "", expected_outputs: str = "", name: str | None = None) -> str:
    spec = SkillSpec(purpose, inputs, expected_outputs, name)
    outcome = create_and_register(
        spec,
        rt.evented_model(),
        rt.bank,
        staging_root(rt.ws.home),
        emit=rt.lifecycle_emit,
        turn_index=rt.turn,
        sandbox_factory=rt.eval_sandbox_factory,
        timeout=rt.cfg.exec_code_timeout,
        max_rounds=rt.cfg.refine_max_rounds,
    )
    return outcome.describe()


def _web_search(rt: SessionRuntime, query: str) -> str:
    if rt.web_corpus and query in rt.web_corpus:
        return rt.web_corpus[query]
    return "web_search unavailable: no search backend is configured"


def _read_skill(rt: SessionRuntime, name: str) -> str:
    obs = execute_skill(rt.ws, rt.bank, name)
    rt.skills_in_use.append(name)
    return obs


def _terminal(rt: SessionRuntime, command: str) -> str:
    result = sandbox_run(rt.terminal_sandbox(), command, rt.cfg.terminal_timeout)
    return result.as_observation() + rt.note_failure(result)


def _create_sandbox(rt: SessionRuntime) -> str:
    h = rt.sandboxes.create()
    return f"created sandbox {h.sandbox_id} rooted at /sandbox with inputs/ and outputs/"


def _sandbox_run(rt: SessionRuntime, sandbox_id: str, command: str) -> str:
    result = sandbox_run(rt.sandboxes.get(sandbox_id), command, rt.cfg.exec_code_timeout)
    return result.as_observation() + rt.note_failure(result)


def _sandbox_upload(rt: SessionRuntime, sandbox_id: str, path: str, dest: str | None = None) -> str:
    h = rt.sandboxes.get(sandbox_id)
    rel = sandbox_upload(h, rt.host_path(path), dest)
    return f"uploaded {path} to /sandbox/{rel}"


def _sandbox_download(rt: SessionRuntime, sandbox_id: str, path: str, save_as: str | None = None) -> str:
    data = sandbox_download(rt.sandboxes.get(sandbox_id), path)
    name = save_as or PurePosixPath(path).name
    if not name or "/" in name or name in (".", ".."):
        raise PathEscape(f"save_as must be a plain file name, got {name!r}")
    dest = rt.ws.result_output_files / name
    dest.write_bytes(data)
    try:
        preview = data.decode("utf-8")
    except UnicodeDecodeError:
        preview = "(binary content)"
    return f"saved {len(data)} bytes to result_output_files/{name}\n{preview}"


def _close_sandbox(rt: SessionRuntime, sandbox_id: str) -> str:
    rt.sandboxes.close(sandbox_id)
    return f"closed sandbox {sandbox_id}"


def _verify_completion(rt: SessionRuntime, summary: str = "") -> str:
    complete, reason = rt.verify(summary)
    return f"complete: {str(complete).lower()}\nreason: {reason}"


def _final_answer(rt: SessionRuntime, answer: str) -> str:
    return "error: final_answer is handled by the loop"


def _memory_append(rt: SessionRuntime, tier: str, content: str, skill: str | None = None) -> str:
    if tier == "session":
        path, label = rt.ws.memory_md, "session memory"
    elif tier == "long_term":
        path, label = long_term_memory_path(rt.ws.home), "long-term memory"
    elif tier == "skill":
        if not skill:
            raise ValueError("tier 'skill' needs a skill name")
        injected = rt.ws.submitted_skillhub / skill
        path = injected / MEMORY_FILE if injected.is_dir() else rt.bank.memory_path(skill)
        label = f"memory of skill {skill!r}"
    else:
        raise ValueError(f"tier must be session, long_term or skill, got {tier!r}")
    block = append_block(path, content, rt.clock)
    return f"appended a block to {label} ({format_header(block.timestamp)})"


def default_registry() -> ToolRegistry:
    return ToolRegistry(
        [
            Tool(
                "skill_create",
                "Create, test and register a new skill from a description of what it should do.",
                _obj({"purpose": _STR, "inputs": _STR, "expected_outputs": _STR, "name": _STR}, ["purpose"]),
                _skill_create,
            ),
            Tool("web_search", "Search the web (may be unavailable offline).", _obj({"query": _STR}, ["query"]), _web_search),
            Tool(
                "read_skill",
                "Load a skill's SKILL.md instructions and its memory.",
                _obj({"name": _STR}, ["name"]),
                _read_skill,
            ),
            Tool(
                "terminal",
                "Run a shell command in the session terminal (inputs/ holds submitted_inputs).",
                _obj({"command": _STR}, ["command"]),
                _terminal,
                "terminal",
            ),
            Tool("create_sandbox", "Create a fresh sandbox and return its id.", _obj({}, []), _create_sandbox),
            Tool(
                "sandbox_run",
                "Run a shell command inside a sandbox.",
                _obj({"sandbox_id": _STR, "command": _STR}, ["sandbox_id", "command"]),
                _sandbox_run,
                "exec",
            ),
            Tool(
                "sandbox_upload",
                "Copy a host file into a sandbox (default destination inputs/<name>).",
                _obj({"sandbox_id": _STR, "path": _STR, "dest": _STR}, ["sandbox_id", "path"]),
                _sandbox_upload,
            ),
            Tool(
                "sandbox_download",
                "Copy a sandbox file into result_output_files/.",
                _obj({"sandbox_id": _STR, "path": _STR, "save_as": _STR}, ["sandbox_id", "path"]),
                _sandbox_download,
            ),
            Tool("close_sandbox", "Destroy a sandbox.", _obj({"sandbox_id": _STR}, ["sandbox_id"]), _close_sandbox),
            Tool(
                "verify_completion",
                "Ask an independent checker whether the task is complete.",
                _obj({"summary": _STR}, []),
                _verify_completion,
                "verify",
            ),
            Tool("final_answer", "Finish the task with this answer.", _obj({"answer": _STR}, ["answer"]), _final_answer),
            Tool(
                "memory_append",
                "Append a note to session, long_term or skill memory.",
                _obj(
                    {"tier": {"type": "string", "enum": ["session", "long_term", "skill"]}, "content": _STR, "skill": _STR},
                    ["tier", "content"],
                ),
                _memory_append,
            ),
        ]
    )


# -- session runtime -------------------------------------------------------------------


def load_prompt_template() -> Template:
    text = resources.files("autoskill").joinpath("resources/system_prompt.md").read_text(encoding="utf-8")
    return Template(text)


def _tail(text: str, limit: int = PROMPT_MEMORY_CHARS) -> str:
    text = text.strip("\n")
    if not text:
        return "(empty)\n"
    return (text if len(text) <= limit else "..." + text[-limit:]) + "\n"


def render_system_prompt(ws: SessionWorkspace, bank: SkillBank, registry: ToolRegistry) -> str:
    catalog = serialize_catalog(session_catalog(ws, bank)) or "(no skills yet)\n"
    tools = "".join(f"- {t.name}: {t.description}\n" for t in (registry.get(n) for n in registry.names()))
    return load_prompt_template().substitute(
        catalog=catalog,
        tools=tools,
        long_term_memory=_tail(read_text(long_term_memory_path(ws.home))),
        session_memory=_tail(read_text(ws.memory_md)),
    )


class _EventedModel:
    def __init__(self, rt: SessionRuntime):
        self.rt = rt
        self.model_id = rt.model.model_id

    def request(self, request: ModelRequest) -> ModelResponse:
        return self.rt.call_model(request)


@dataclass
class SessionRuntime:
    """Mutable state the tool handlers share during one run."""

    ws: SessionWorkspace
    bank: SkillBank
    model: ModelClient
    cfg: LoopConfig
    clock: TimeSource
    sandboxes: SandboxManager
    sleep: Callable[[float], Any] = time.sleep
    rng: random.Random | None = None
    web_corpus: dict[str, str] | None = None
    skills_in_use: list[str] = field(default_factory=list)
    turn: int = 0
    abandoned: set = field(default_factory=set)
    verifier_seconds: float = 0.0
    _terminal: SandboxHandle | None = None
    _call_no: int = 0
    _emit_lock: threading.Lock = field(default_factory=threading.Lock)

    def begin_turn(self, turn: int) -> None:
        self.turn = turn
        self._call_no = 0

    def emit(self, kind: str, payload: dict) -> None:
        if threading.get_ident() in self.abandoned:
            return  # a timed-out handler still running in the background
        with self._emit_lock:
            self.ws.emit(kind, payload, self.clock)

    def lifecycle_emit(self, stage: str, payload: dict) -> None:
        self.emit("lifecycle", {"turn": self.turn, "stage": stage, **payload})

    def _rng(self, request: ModelRequest) -> random.Random:
        if self.rng is not None:
            return self.rng
        # seeded per logical call so a resumed run draws the same jitter
        return random.Random(f"{self.ws.session_id}:{request.turn_index}:{self._call_no}")

    def call_model(self, request: ModelRequest) -> ModelResponse:
        """Model call with retry, logged as retry and model_call events."""
        self._call_no += 1
        if request.timeout is None:
            request = ModelRequest(
                request.system, request.messages, request.tools, request.purpose,
                request.turn_index, self.cfg.model_timeout,
            )

        def on_backoff(attempt: int, delay: float, exc: Exception) -> None:
            self.emit(
                "retry",
                {"turn": self.turn, "purpose": request.purpose, "attempt": attempt,
                 "delay": round(delay, 6), "error": str(exc)},
            )

        try:
            resp, attempts = _call_with_retry(
                self.model, request, self.cfg, self.sleep, self._rng(request), on_backoff
            )
        except ModelError as exc:
            attempts = getattr(exc, "attempts", 1)
            self.emit(
                "model_call",
                {"turn": self.turn, "purpose": request.purpose, "attempts": attempts, "error": str(exc)},
            )
            raise
        self.emit(
            "model_call",
            {"turn": self.turn, "purpose": request.purpose, "attempts": attempts, "usage": resp.usage.to_dict()},
        )
        return resp

    def evented_model(self) -> _EventedModel:
        return _EventedModel(self)

    def summarizer(self, texts: list[str]) -> str:
        req = ModelRequest(
            system="Summarise the following agent transcript, keeping facts needed to continue.",
            messages=tuple(texts),
            purpose="summarize",
            turn_index=self.turn,
        )
        return self.call_model(req).text

    def verify(self, answer: str, ctx_payloads: list[str] | None = None) -> tuple[bool, str]:
        """One verifier model call, no retry."""
        self._call_no += 1
        req = ModelRequest(
            system=VERIFY_SYSTEM,
            messages=(self.ws.instruction(), *(ctx_payloads or []), f"Proposed final answer:\n{answer}"),
            purpose="verify",
            turn_index=self.turn,
            timeout=self.cfg.verify_completion_timeout,
        )
        start = time.monotonic()
        try:
            resp = self.model.request(req)
        except ModelError as exc:
            self.emit("model_call", {"turn": self.turn, "purpose": "verify", "attempts": 1, "error": str(exc)})
            return False, f"verifier unavailable: {exc}"
        finally:
            self.verifier_seconds += time.monotonic() - start
        self.emit(
            "model_call",
            {"turn": self.turn, "purpose": "verify", "attempts": 1, "usage": resp.usage.to_dict()},
        )
        return parse_verdict(resp.text)

    def eval_sandbox_factory(self) -> SandboxHandle:
        return create_sandbox(self.sandboxes.config, self.sandboxes.backend)

    def terminal_sandbox(self) -> SandboxHandle:
        if self._terminal is None or not self._terminal.is_open:
            self._terminal = create_sandbox(self.sandboxes.config, self.sandboxes.backend, "terminal")
            if any(self.ws.submitted_inputs.iterdir()):
                sandbox_upload(self._terminal, self.ws.submitted_inputs, "inputs")
        return self._terminal

    def host_path(self, path: str) -> Path:
        """Resolve ``skills/<name>/...`` or a workspace-relative path on the host."""
        pure = PurePosixPath(path)
        if pure.is_absolute() or ".." in pure.parts or not pure.parts:
            raise PathEscape(f"{path!r} must be relative without '..'")
        parts = pure.parts
        if parts[0] == "skills" and len(parts) >= 2:
            injected = self.ws.submitted_skillhub / parts[1]
            if injected.is_dir():
                base = injected
            elif parts[1] in self.bank:
                base = self.bank.skill_dir(parts[1])
            else:
                raise UnknownSkill(f"no skill named {parts[1]!r}")
            target = base.joinpath(*parts[2:])
        else:
            target = self.ws.root.joinpath(*parts)
        if not target.exists():
            raise SandboxFileNotFound(f"{path} does not exist")
        return target

    def note_failure(self, result: ExecResult) -> str:
        """Charge a failed command to the skill in use and offer a memory note."""
        if result.exit_code == 0 or not self.skills_in_use:
            return ""
        skill = self.skills_in_use[-1]
        if skill in self.bank and not (self.ws.submitted_skillhub / skill).is_dir():
            self.bank.record_usage(skill, self.ws.session_id, "failure")
        return (
            f"\nnote: skill `{skill}` was in use when this command failed. To keep the lesson, call "
            f"memory_append with tier 'skill' and skill '{skill}'."
        )

    def record_successes(self) -> None:
        for skill in dict.fromkeys(self.skills_in_use):
            if skill in self.bank and not (self.ws.submitted_skillhub / skill).is_dir():
                self.bank.record_usage(skill, self.ws.session_id, "success")

    def teardown(self) -> None:
        self.sandboxes.close_all()
        if self._terminal is not None:
            close_sandbox(self._terminal)


def _history_calls(ctx: AgentContext, name: str) -> list[ToolCall]:
    return [c for p in replay_full_history(ctx) for c in p.tool_calls if c.name == name]


def _skills_read(ctx: AgentContext) -> list[str]:
    calls = _history_calls(ctx, "read_skill")
    return [c.arguments["name"] for c in calls if isinstance(c.arguments.get("name"), str)]


def run_task(
    ws: SessionWorkspace,
    bank: SkillBank,
    model: ModelClient,
    cfg: LoopConfig = LoopConfig(),
    *,
    ctx: AgentContext | None = None,
    clock: TimeSource = utc_now,
    stop_after: int | None = None,
    registry: ToolRegistry | None = None,
    sandbox_config: SandboxConfig | None = None,
    sandbox_backend: SandboxBackend | None = None,
    sleep: Callable[[float], Any] = time.sleep,
    rng: random.Random | None = None,
    web_corpus: dict[str, str] | None = None,
    budget: CompressionBudget | None = None,
) -> RunMeta | None:
    """Run (or continue) a session until an accepted final answer.

    Continues from ``ctx`` or the workspace snapshot when one exists.
    ``stop_after`` ends the call after that many turns without finalising,
    leaving a resumable snapshot; the return value is then None.
    """
    if ws.finalized:
        raise AlreadyFinalized(f"session {ws.session_id} is already finalized")
    t_start = time.monotonic()
    if ctx is None:
        if ws.ctx_state.is_file():
            ctx = load_snapshot(ws, budget)
        else:
            ctx = AgentContext(budget=budget or CompressionBudget(), sequential_ids=True)
    if ctx.turn_count() == 0 and ws.last_seq() == 0:
        bank.begin_session()
    registry = registry or default_registry()
    # sandboxes do not survive a pause, but their ids keep counting
    sandboxes = SandboxManager(sandbox_config, sandbox_backend, len(_history_calls(ctx, "create_sandbox")) + 1)
    rt = SessionRuntime(
        ws, bank, model, cfg, clock, sandboxes,
        sleep=sleep, rng=rng, web_corpus=web_corpus, skills_in_use=_skills_read(ctx),
    )
    exec_start: float | None = None
    try:
        turn = ctx.turn_count() + 1
        ran = 0
        while True:
            if stop_after is not None and ran >= stop_after:
                return None
            if turn > cfg.turn_limit:
                raise LoopAborted(f"no final answer within {cfg.turn_limit} turns")
            if exec_start is None:
                exec_start = time.monotonic()
            rt.begin_turn(turn)
            report = maybe_compress_history(ctx, rt.summarizer)
            if report.status != "untouched":
                rt.emit("compression", {"turn": turn, **report.to_event()})
            request = ModelRequest(
                system=render_system_prompt(ws, bank, registry),
                messages=(ws.instruction(), *active_payloads(ctx)),
                tools=registry.schemas(),
                purpose="turn",
                turn_index=turn,
            )
            response = rt.call_model(request)
            rt.emit("plan", {"turn": turn, "text": response.text})

            executed: list[ToolCall] = []
            observations: list[str] = []
            answer: str | None = None
            for call in response.tool_calls:
                rt.emit("tool_call", {"turn": turn, "tool": call.name, "arguments": call.arguments})
                executed.append(call)
                extra: dict[str, Any] = {}
                if call.name == "final_answer" and "final_answer" in registry:
                    obs, accepted = _handle_final_answer(rt, ctx, call)
                    extra["accepted"] = accepted
                    if accepted:
                        answer = str(call.arguments.get("answer", ""))
                else:
                    obs = dispatch_tool_call(registry, call, cfg, rt)
                obs = truncate_tool_output(obs, cfg.tool_text_limit)
                rt.emit("observation", {"turn": turn, "tool": call.name, "chars": len(obs), **extra, "text": obs})
                observations.append(obs)
                if answer is not None:
                    break  # calls after an accepted answer are dropped

            append_turn(
                ctx,
                TurnPayload(response.text or "(no text)", tuple(executed), tuple(observations), response.usage),
            )
            persist_snapshot(ws, ctx)
            ran += 1
            if answer is not None:
                rt.emit("final_answer", {"turn": turn, "text": answer})
                rt.record_successes()
                events = ws.read_events()
                meta = RunMeta(
                    turn_count=turn,
                    model=model.model_id,
                    started=events[0].ts if events else iso_ts(clock()),
                    finished=iso_ts(clock()),
                    completed=True,
                    session_id=ws.session_id,
                )
                now = time.monotonic()
                profile = {
                    "setup": round(exec_start - t_start, 6),
                    "exec": round(now - exec_start - rt.verifier_seconds, 6),
                    "verifier": round(rt.verifier_seconds, 6),
                }
                rt.teardown()
                finalize_session(ws, answer, [], meta, profile)
                return meta
            turn += 1
    except IoFailure as exc:
        raise LoopAborted(f"unrecoverable IO failure: {exc}") from exc
    finally:
        rt.teardown()


def _handle_final_answer(rt: SessionRuntime, ctx: AgentContext, call: ToolCall) -> tuple[str, bool]:
    answer = str(call.arguments.get("answer", ""))

    def verifier() -> tuple[bool, str]:
        rt.emit("tool_call", {"turn": rt.turn, "tool": "verify_completion", "arguments": {}, "forced": True})
        complete, reason = rt.verify(answer, active_payloads(ctx))
        text = f"complete: {str(complete).lower()}\nreason: {reason}"
        rt.emit(
            "observation",
            {"turn": rt.turn, "tool": "verify_completion", "chars": len(text), "complete": complete, "text": text},
        )
        return complete, reason

    decision = gate_final_answer(rt.turn, rt.cfg, verifier)
    if decision.accepted:
        return "final answer accepted", True
    return f"final answer rejected: the task is not verified as complete ({decision.reason})", False
