"""The on-disk skill bank: evaluation-gated registration, catalog, merge and prune.

Bank layout under ``<home>/skills/``::

    <skill-name>/          one validated package per registered skill
    .index.json            name -> metadata (counters, registration session)
    .registry.jsonl        append-only log of successful mutations
    .usage.jsonl           append-only usage records
    .lock                  advisory lock taken by every mutation
"""

from __future__ import annotations

import json
import shutil
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

from ._fsutil import TimeSource, atomic_write_text, file_lock, iso_ts, read_lock, utc_now
from .errors import (
    DuplicateName,
    EvaluationFailed,
    InvalidPackage,
    IoFailure,
    UnknownSkill,
)
from .memory_store import format_header, read_blocks
from .skill_package import (
    MEMORY_FILE,
    CatalogEntry,
    SkillPackage,
    load_package,
    validate_package,
    write_skill_package,
)

INDEX_FILE = ".index.json"
REGISTRY_LOG = ".registry.jsonl"
USAGE_LOG = ".usage.jsonl"
LOCK_FILE = ".lock"

DEFAULT_UNUSED_SESSIONS = 20
DEFAULT_CONSECUTIVE_FAILURES = 3


@dataclass
class FailedTest:
    test_file: str
    exit_code: int
    output: str
    timed_out: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EvaluationResult:
    tests_run: int
    tests_passed: int
    failures: list[FailedTest] = field(default_factory=list)

    def __post_init__(self):
        if not 0 <= self.tests_passed <= self.tests_run:
            raise ValueError("tests_passed must be within [0, tests_run]")

    @property
    def all_passed(self) -> bool:
        return self.tests_passed == self.tests_run

    @property
    def unevaluated(self) -> bool:
        return self.tests_run == 0

    def to_dict(self) -> dict:
        return {
            "tests_run": self.tests_run,
            "tests_passed": self.tests_passed,
            "all_passed": self.all_passed,
            "unevaluated": self.unevaluated,
            "failures": [f.to_dict() for f in self.failures],
        }


@dataclass
class SkillMeta:
    description: str
    registered_at: str
    registered_session: int
    uses: int = 0
    successes: int = 0
    failures: int = 0
    consecutive_failures: int = 0
    last_used_session: int | None = None


@dataclass(frozen=True)
class UsageRecord:
    skill: str
    session_id: str
    outcome: str  # success | failure
    ts: str


@dataclass(frozen=True)
class PrunePolicy:
    unused_sessions: int = DEFAULT_UNUSED_SESSIONS
    consecutive_failures: int = DEFAULT_CONSECUTIVE_FAILURES


@dataclass
class RegistrationOutcome:
    name: str
    path: Path
    warnings: list[str] = field(default_factory=list)


class SkillBank:
    """Registry of skills rooted at ``<agent-home>/skills``."""

    def __init__(self, root: str | Path, clock: TimeSource = utc_now):
        self.root = Path(root)
        self.clock = clock
        self.root.mkdir(parents=True, exist_ok=True)

    @classmethod
    def for_home(cls, home: str | Path, clock: TimeSource = utc_now) -> SkillBank:
        return cls(Path(home) / "skills", clock)

    # -- index ------------------------------------------------------------

    def _read_state(self) -> dict:
        path = self.root / INDEX_FILE
        if not path.is_file():
            return {"session_count": 0, "skills": {}}
        return json.loads(path.read_text(encoding="utf-8"))

    def _write_state(self, state: dict) -> None:
        state["skills"] = dict(sorted(state["skills"].items()))
        atomic_write_text(self.root / INDEX_FILE, json.dumps(state, indent=2) + "\n")

    def _locked(self):
        return file_lock(self.root / LOCK_FILE)

    def state(self) -> dict:
        with read_lock(self.root / LOCK_FILE):
            return self._read_state()

    @property
    def session_count(self) -> int:
        return self.state()["session_count"]

    def index(self) -> dict[str, SkillMeta]:
        return {k: SkillMeta(**v) for k, v in self.state()["skills"].items()}

    def names(self) -> list[str]:
        return sorted(self.state()["skills"])

    def __contains__(self, name: str) -> bool:
        return name in self.state()["skills"]

    def _log(self, action: str, name: str, result: EvaluationResult | None) -> None:
        entry = {
            "ts": iso_ts(self.clock()),
            "action": action,
            "name": name,
            "eval_passed": None if result is None else result.all_passed,
            "tests_run": None if result is None else result.tests_run,
        }
        with open(self.root / REGISTRY_LOG, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(entry, separators=(",", ":")) + "\n")

    def registry_log(self) -> list[dict]:
        path = self.root / REGISTRY_LOG
        if not path.is_file():
            return []
        return [json.loads(l) for l in path.read_text(encoding="utf-8").splitlines() if l.strip()]

    def usage_log(self) -> list[UsageRecord]:
        path = self.root / USAGE_LOG
        if not path.is_file():
            return []
        return [
            UsageRecord(**json.loads(l))
            for l in path.read_text(encoding="utf-8").splitlines()
            if l.strip()
        ]

    # -- sessions and usage ----------------------------------------------

    def begin_session(self) -> int:
        """Count one more session; prune windows are measured in these."""
        with self._locked():
            state = self._read_state()
            state["session_count"] += 1
            self._write_state(state)
            return state["session_count"]

    def record_usage(self, name: str, session_id: str, outcome: str) -> UsageRecord:
        if outcome not in ("success", "failure"):
            raise ValueError(f"outcome must be success or failure, got {outcome!r}")
        with self._locked():
            state = self._read_state()
            if name not in state["skills"]:
                raise UnknownSkill(name)
            meta = state["skills"][name]
            meta["uses"] += 1
            meta["last_used_session"] = state["session_count"]
            if outcome == "success":
                meta["successes"] += 1
                meta["consecutive_failures"] = 0
            else:
                meta["failures"] += 1
                meta["consecutive_failures"] += 1
            record = UsageRecord(name, session_id, outcome, iso_ts(self.clock()))
            with open(self.root / USAGE_LOG, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(asdict(record), separators=(",", ":")) + "\n")
            self._write_state(state)
        return record

    # -- registration -----------------------------------------------------

    def skill_dir(self, name: str) -> Path:
        return self.root / name

    def _check_package(self, pkg: SkillPackage) -> None:
        if pkg.root is not None:
            report = validate_package(pkg.root)
            if not report.ok:
                raise InvalidPackage(
                    "; ".join(f"{e.code}: {e.message}" for e in report.errors), report
                )

    def register(self, pkg: SkillPackage, eval_result: EvaluationResult) -> RegistrationOutcome:
        """Copy ``pkg`` into the bank if its evaluation passed.

        A package with no tests registers with an ``unevaluated`` warning.
        The staging copy is left in place either way.
        """
        self._check_package(pkg)
        if not eval_result.all_passed:
            ids = ", ".join(f.test_file for f in eval_result.failures) or "unknown"
            raise EvaluationFailed(
                f"{pkg.name}: {eval_result.tests_run - eval_result.tests_passed} of "
                f"{eval_result.tests_run} test(s) failed ({ids})",
                eval_result.failures,
            )
        with self._locked():
            state = self._read_state()
            if pkg.name in state["skills"] or self.skill_dir(pkg.name).exists():
                raise DuplicateName(f"a skill named {pkg.name!r} is already registered")
            path = write_skill_package(pkg, self.root)
            state["skills"][pkg.name] = asdict(self._new_meta(pkg, state))
            self._write_state(state)
            self._log("register", pkg.name, eval_result)
        warnings = ["unevaluated"] if eval_result.unevaluated else []
        return RegistrationOutcome(pkg.name, path, warnings)

    def _new_meta(self, pkg: SkillPackage, state: dict) -> SkillMeta:
        return SkillMeta(
            description=pkg.description,
            registered_at=iso_ts(self.clock()),
            registered_session=state["session_count"],
        )

    # -- catalog and lookup -----------------------------------------------

    def catalog_entries(self) -> list[CatalogEntry]:
        return [
            CatalogEntry(name, meta["description"])
            for name, meta in sorted(self.state()["skills"].items())
        ]

    def resolve(self, name: str) -> tuple[SkillPackage, str]:
        if name not in self:
            raise UnknownSkill(f"no registered skill named {name!r}")
        root = self.skill_dir(name)
        pkg = load_package(root)
        mem = root / MEMORY_FILE
        return pkg, mem.read_text(encoding="utf-8") if mem.is_file() else ""

    def memory_path(self, name: str) -> Path:
        if name not in self:
            raise UnknownSkill(f"no registered skill named {name!r}")
        return self.skill_dir(name) / MEMORY_FILE

    # -- management -------------------------------------------------------

    def prune(self, policy: PrunePolicy = PrunePolicy()) -> list[str]:
        with self._locked():
            state = self._read_state()
            count = state["session_count"]
            doomed = []
            for name, meta in state["skills"].items():
                last = meta["last_used_session"]
                if last is None:
                    last = meta["registered_session"]
                idle = last <= count - policy.unused_sessions
                failing = meta["consecutive_failures"] >= policy.consecutive_failures
                if idle or failing:
                    doomed.append(name)
            for name in sorted(doomed):
                shutil.rmtree(self.skill_dir(name), ignore_errors=True)
                del state["skills"][name]
                self._log("prune", name, None)
            self._write_state(state)
        return sorted(doomed)

    def merge(
        self, names: Iterable[str], merged: SkillPackage, eval_result: EvaluationResult
    ) -> RegistrationOutcome:
        """Replace ``names`` with ``merged`` in one step; all-or-nothing.

        The originals' memory files are concatenated into the merged skill's
        ``.memory.md`` in name order, each introduced by a source block.
        """
        names = sorted(set(names))
        self._check_package(merged)
        with self._locked():
            state = self._read_state()
            missing = [n for n in names if n not in state["skills"]]
            if missing:
                raise UnknownSkill(f"cannot merge unknown skill(s): {', '.join(missing)}")
            if not eval_result.all_passed:
                raise EvaluationFailed(
                    f"merged skill {merged.name!r} failed evaluation", eval_result.failures
                )
            if merged.name not in names and (
                merged.name in state["skills"] or self.skill_dir(merged.name).exists()
            ):
                raise DuplicateName(f"a skill named {merged.name!r} is already registered")

            memory = self._merged_memory(names)
            work = Path(tempfile.mkdtemp(prefix=".merge-", dir=self.root))
            trash = work / "originals"
            trash.mkdir()
            moved: list[str] = []
            try:
                staged = write_skill_package(merged, work)
                if memory:
                    (staged / MEMORY_FILE).write_text(memory, encoding="utf-8")
                for n in names:
                    self.skill_dir(n).rename(trash / n)
                    moved.append(n)
                staged.rename(self.skill_dir(merged.name))
            except BaseException as exc:
                for n in moved:
                    (trash / n).rename(self.skill_dir(n))
                shutil.rmtree(work, ignore_errors=True)
                if isinstance(exc, OSError):
                    raise IoFailure(f"merge failed, bank restored: {exc}") from exc
                raise
            new_state = json.loads(json.dumps(state))
            for n in names:
                del new_state["skills"][n]
            new_state["skills"][merged.name] = asdict(self._new_meta(merged, new_state))
            try:
                self._write_state(new_state)
            except BaseException:
                shutil.rmtree(self.skill_dir(merged.name), ignore_errors=True)
                for n in moved:
                    (trash / n).rename(self.skill_dir(n))
                shutil.rmtree(work, ignore_errors=True)
                raise
            shutil.rmtree(work, ignore_errors=True)
            for n in names:
                self._log("merge_remove", n, None)
            self._log("merge", merged.name, eval_result)
        return RegistrationOutcome(merged.name, self.skill_dir(merged.name))

    def _merged_memory(self, names: list[str]) -> str:
        parts = []
        for n in names:
            path = self.skill_dir(n) / MEMORY_FILE
            if not path.is_file():
                continue
            blocks = [b for b in read_blocks(path) if not b.pre_header]
            text = path.read_text(encoding="utf-8")
            stamp = blocks[0].timestamp if blocks else self.clock()
            header = format_header(stamp)
            parts.append(f"{header}\nmerged from skill `{n}`\n\n")
            parts.append(text if text.endswith("\n") else text + "\n")
        return "".join(parts)


def build_catalog(bank: SkillBank) -> list[CatalogEntry]:
    return bank.catalog_entries()


def _yaml_scalar(value: str) -> str:
    safe = (
        value
        and value == value.strip()
        and "\n" not in value
        and ": " not in value
        and " #" not in value
        and not value.endswith(":")
        and value[0] not in "\"'[]{}&*!|>%@`#,?-"
        and value.lower() not in ("null", "true", "false", "yes", "no", "~", "on", "off")
    )
    try:
        float(value)
        safe = False
    except ValueError:
        pass
    return value if safe else json.dumps(value, ensure_ascii=False)


def serialize_catalog(entries: Iterable[CatalogEntry]) -> str:
    """YAML list with exactly a ``name:`` and a ``description:`` line per entry."""
    lines = []
    for e in entries:
        lines.append(f"- name: {_yaml_scalar(e.name)}")
        lines.append(f"  description: {_yaml_scalar(e.description)}")
    return "".join(l + "\n" for l in lines)


def register_skill(bank: SkillBank, pkg: SkillPackage, eval_result: EvaluationResult) -> RegistrationOutcome:
    return bank.register(pkg, eval_result)


def resolve_skill(bank: SkillBank, name: str) -> tuple[SkillPackage, str]:
    return bank.resolve(name)


def prune_skills(bank: SkillBank, policy: PrunePolicy = PrunePolicy()) -> list[str]:
    return bank.prune(policy)


def merge_skills(
    bank: SkillBank, names: Iterable[str], merged: SkillPackage, eval_result: EvaluationResult
) -> RegistrationOutcome:
    return bank.merge(names, merged, eval_result)


def gate_sound(bank: SkillBank) -> bool:
    """Replay the registry log: every skill dir must trace to a passing registration."""
    live: dict[str, bool] = {}
    for entry in bank.registry_log():
        if entry["action"] in ("register", "merge"):
            live[entry["name"]] = entry["eval_passed"] is True
        elif entry["action"] in ("prune", "merge_remove"):
            live.pop(entry["name"], None)
    on_disk = {p.name for p in bank.root.iterdir() if p.is_dir() and not p.name.startswith(".")}
    return all(live.get(name, False) for name in on_disk)
