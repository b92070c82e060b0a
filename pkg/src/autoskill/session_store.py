"""Per-session workspaces: scaffold, event stream, context snapshots, finalisation.

Layout under ``<home>/sessions/<session_id>/``::

    instruction.md  submitted_inputs/  submitted_skillhub/  result_output_files/
    agent_message.md  agent.stdout.txt  events.jsonl  memory.md
    ctx_state.json  profile.json  run_meta.json
"""

from __future__ import annotations

import json
import os
import re
import shutil
import uuid
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable

from . import config
from ._fsutil import TimeSource, atomic_write_text, iso_ts, utc_now
from .context_dag import AgentContext, CompressionBudget
from .errors import (
    AlreadyFinalized,
    ContextCorrupt,
    HomeNotInitialized,
    IoFailure,
    SequenceGap,
    SnapshotCorrupt,
    SnapshotMissing,
)
from .skill_package import MEMORY_FILE, SkillPackage, catalog_entry, load_package, write_skill_package

EVENT_KINDS = frozenset(
    {
        "plan",
        "tool_call",
        "observation",
        "model_call",
        "compression",
        "final_answer",
        # added: model-call retries and skill-pipeline stages
        "retry",
        "lifecycle",
    }
)

SESSION_ID_RE = re.compile(r"^[0-9a-f]{32}$")


@dataclass(frozen=True)
class EventRecord:
    seq: int
    ts: str
    kind: str
    payload: dict[str, Any]

    def to_json(self) -> str:
        return json.dumps(
            {"seq": self.seq, "ts": self.ts, "kind": self.kind, "payload": self.payload},
            separators=(",", ":"),
            ensure_ascii=False,
            sort_keys=False,
        )

    @classmethod
    def from_json(cls, line: str) -> EventRecord:
        data = json.loads(line)
        return cls(int(data["seq"]), data["ts"], data["kind"], data["payload"])


@dataclass
class RunMeta:
    turn_count: int
    model: str
    started: str
    finished: str | None = None
    reward: float | None = None
    completed: bool = False
    # explicit success flag set by an external grader
    success: bool | None = None
    session_id: str | None = None

    def __post_init__(self):
        if self.reward is not None and not 0.0 <= self.reward <= 1.0:
            raise ValueError(f"reward must be in [0, 1], got {self.reward}")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> RunMeta:
        known = {k: data[k] for k in cls.__dataclass_fields__ if k in data}
        return cls(**known)


@dataclass
class SessionWorkspace:
    session_id: str
    root: Path
    home: Path
    _last_seq: int | None = field(default=None, repr=False, compare=False)

    @property
    def instruction_md(self) -> Path:
        return self.root / "instruction.md"

    @property
    def submitted_inputs(self) -> Path:
        return self.root / "submitted_inputs"

    @property
    def submitted_skillhub(self) -> Path:
        return self.root / "submitted_skillhub"

    @property
    def result_output_files(self) -> Path:
        return self.root / "result_output_files"

    @property
    def agent_message_md(self) -> Path:
        return self.root / "agent_message.md"

    @property
    def agent_stdout(self) -> Path:
        return self.root / "agent.stdout.txt"

    @property
    def events_jsonl(self) -> Path:
        return self.root / "events.jsonl"

    @property
    def memory_md(self) -> Path:
        return self.root / "memory.md"

    @property
    def ctx_state(self) -> Path:
        return self.root / "ctx_state.json"

    @property
    def profile_json(self) -> Path:
        return self.root / "profile.json"

    @property
    def run_meta_json(self) -> Path:
        return self.root / "run_meta.json"

    @property
    def finalized(self) -> bool:
        return self.run_meta_json.exists()

    def instruction(self) -> str:
        return self.instruction_md.read_text(encoding="utf-8")

    def injected_skills(self) -> dict[str, SkillPackage]:
        out = {}
        if self.submitted_skillhub.is_dir():
            for d in sorted(self.submitted_skillhub.iterdir()):
                if d.is_dir() and not d.name.startswith("."):
                    pkg = load_package(d)
                    out[pkg.name] = pkg
        return out

    def last_seq(self) -> int:
        if self._last_seq is None:
            self._last_seq = 0
            if self.events_jsonl.exists():
                for line in self.events_jsonl.read_text(encoding="utf-8").splitlines():
                    if line.strip():
                        self._last_seq = EventRecord.from_json(line).seq
        return self._last_seq

    def emit(self, kind: str, payload: dict[str, Any], clock: TimeSource = utc_now) -> EventRecord:
        """Append the next event in sequence."""
        record = EventRecord(self.last_seq() + 1, iso_ts(clock()), kind, payload)
        append_event(self, record)
        return record

    def read_events(self) -> list[EventRecord]:
        if not self.events_jsonl.exists():
            return []
        return [
            EventRecord.from_json(line)
            for line in self.events_jsonl.read_text(encoding="utf-8").splitlines()
            if line.strip()
        ]


def sessions_dir(home: Path) -> Path:
    return Path(home) / "sessions"


def open_session(home: Path, session_id: str) -> SessionWorkspace:
    root = sessions_dir(home) / session_id
    if not SESSION_ID_RE.match(session_id) or not root.is_dir():
        raise SnapshotMissing(f"no session {session_id!r} under {sessions_dir(home)}")
    return SessionWorkspace(session_id, root, Path(home))


def create_session(
    home: Path,
    instruction: str,
    inputs: Iterable[Path] = (),
    injected_skills: Iterable[Path | SkillPackage] = (),
    *,
    session_id: str | None = None,
) -> SessionWorkspace:
    """Scaffold a new workspace and copy the caller's inputs and skills into it."""
    home = Path(home)
    if not config.is_initialized(home):
        raise HomeNotInitialized(f"{home} is not an initialised agent home (run `autoskill init`)")
    session_id = session_id or uuid.uuid4().hex
    if not SESSION_ID_RE.match(session_id):
        raise ValueError(f"session id must be 32 lowercase hex chars: {session_id!r}")
    root = sessions_dir(home) / session_id
    ws = SessionWorkspace(session_id, root, home)
    try:
        root.mkdir(parents=False, exist_ok=False)
        for d in (ws.submitted_inputs, ws.submitted_skillhub, ws.result_output_files):
            d.mkdir()
        ws.instruction_md.write_text(instruction, encoding="utf-8")
        for f in (ws.events_jsonl, ws.agent_stdout, ws.memory_md):
            f.touch()
        for src in inputs:
            src = Path(src)
            if src.is_dir():
                shutil.copytree(src, ws.submitted_inputs / src.name)
            else:
                shutil.copy2(src, ws.submitted_inputs / src.name)
        for skill in injected_skills:
            if isinstance(skill, SkillPackage):
                write_skill_package(skill, ws.submitted_skillhub)
            else:
                skill = Path(skill)
                shutil.copytree(
                    skill,
                    ws.submitted_skillhub / skill.name,
                    ignore=shutil.ignore_patterns(MEMORY_FILE, "__pycache__"),
                )
    except FileExistsError as exc:
        raise IoFailure(f"session directory {root} already exists") from exc
    except OSError as exc:
        raise IoFailure(f"creating session {root}: {exc}") from exc
    return ws


def session_catalog(ws: SessionWorkspace, bank) -> list:
    """Bank catalog plus this session's injected skills (injected names shadow the bank)."""
    entries = {e.name: e for e in bank.catalog_entries()}
    for name, pkg in ws.injected_skills().items():
        entries[name] = catalog_entry(pkg)
    return [entries[k] for k in sorted(entries)]


def _format_stdout_line(record: EventRecord) -> str:
    p = record.payload
    head = f"[{record.seq:05d} {record.ts}] {record.kind}"
    if record.kind == "model_call":
        u = p.get("usage", {})
        return (
            f"{head} turn={p.get('turn')} purpose={p.get('purpose')} attempts={p.get('attempts')} "
            f"tokens fresh_in={u.get('fresh_in', 0)} cached_in={u.get('cached_in', 0)} "
            f"output={u.get('output', 0)}"
        )
    if record.kind in ("tool_call", "observation"):
        if record.kind == "tool_call":
            extra = json.dumps(p.get("arguments", {}), ensure_ascii=False)[:200]
        else:
            extra = f"{p.get('chars', 0)} chars"
        return f"{head} turn={p.get('turn')} tool={p.get('tool')} {extra}"
    summary = json.dumps(p, separators=(",", ":"), ensure_ascii=False)
    if len(summary) > 300:
        summary = summary[:297] + "..."
    return f"{head} {summary}"


def append_event(ws: SessionWorkspace, record: EventRecord) -> None:
    """Append one JSON line to events.jsonl (and a readable line to agent.stdout.txt)."""
    expected = ws.last_seq() + 1
    if record.seq != expected:
        raise SequenceGap(f"event seq {record.seq} does not follow {expected - 1}")
    if record.kind not in EVENT_KINDS:
        raise ValueError(f"unknown event kind {record.kind!r}")
    try:
        with open(ws.events_jsonl, "ab") as fh:
            fh.write((record.to_json() + "\n").encode("utf-8"))
            fh.flush()
            os.fsync(fh.fileno())
        with open(ws.agent_stdout, "a", encoding="utf-8") as fh:
            fh.write(_format_stdout_line(record) + "\n")
    except OSError as exc:
        raise IoFailure(f"appending event: {exc}") from exc
    ws._last_seq = record.seq


def persist_snapshot(ws: SessionWorkspace, ctx: AgentContext) -> None:
    """Write ctx_state.json atomically (temp file + rename)."""
    text = json.dumps(ctx.to_dict(), ensure_ascii=False, indent=1)
    try:
        atomic_write_text(ws.ctx_state, text + "\n")
    except OSError as exc:
        raise IoFailure(f"writing snapshot: {exc}") from exc


def load_snapshot(ws: SessionWorkspace, budget: CompressionBudget | None = None) -> AgentContext:
    if not ws.ctx_state.is_file():
        raise SnapshotMissing(f"{ws.ctx_state} does not exist")
    try:
        data = json.loads(ws.ctx_state.read_text(encoding="utf-8"))
        ctx = AgentContext.from_dict(data)
    except (json.JSONDecodeError, UnicodeDecodeError, ContextCorrupt) as exc:
        raise SnapshotCorrupt(f"{ws.ctx_state}: {exc}") from exc
    except (AttributeError, TypeError) as exc:
        raise SnapshotCorrupt(f"{ws.ctx_state}: not a context object") from exc
    if budget is not None:
        ctx.budget = budget
    return ctx


def resume_session(home: Path, session_id: str) -> tuple[SessionWorkspace, AgentContext]:
    ws = open_session(home, session_id)
    return ws, load_snapshot(ws)


def finalize_session(
    ws: SessionWorkspace,
    final_message: str,
    outputs: Iterable[Path],
    meta: RunMeta,
    profile: dict[str, float] | None = None,
) -> None:
    """Write the closing artifacts. Refuses a second call (AlreadyFinalized)."""
    if ws.finalized:
        raise AlreadyFinalized(f"session {ws.session_id} is already finalized")
    try:
        ws.agent_message_md.write_text(final_message, encoding="utf-8")
        ws.result_output_files.mkdir(exist_ok=True)
        for src in outputs:
            src = Path(src)
            dest = ws.result_output_files / src.name
            if src.resolve() != dest.resolve():
                shutil.copy2(src, dest)
        prof = {"setup": 0.0, "exec": 0.0, "verifier": 0.0, **(profile or {})}
        ws.profile_json.write_text(json.dumps(prof, indent=2) + "\n", encoding="utf-8")
        # run_meta last: its presence marks the workspace closed
        atomic_write_text(ws.run_meta_json, json.dumps(meta.to_dict(), indent=2) + "\n")
    except OSError as exc:
        raise IoFailure(f"finalizing session: {exc}") from exc


def load_run_meta(ws: SessionWorkspace) -> RunMeta:
    if not ws.run_meta_json.is_file():
        raise SnapshotMissing(f"session {ws.session_id} has no run_meta.json (not finalized)")
    return RunMeta.from_dict(json.loads(ws.run_meta_json.read_text(encoding="utf-8")))
