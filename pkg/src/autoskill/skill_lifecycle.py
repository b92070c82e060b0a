"""Skill creation, evaluation, refinement and distillation.

Generation is delegated to a model client; every gate (parsing, validation,
tests) runs locally. Pipelines report their stages through an ``emit``
callback as ``create``, ``distill``, ``evaluate``, ``refine``, ``register``
or ``abandon``.
"""

from __future__ import annotations

import importlib.util
import json
import re
import shlex
import shutil
import sys
import tempfile
from dataclasses import dataclass, replace
from pathlib import Path, PurePosixPath
from typing import Callable

from .config import EXEC_CODE_TIMEOUT_SECONDS
from .context_dag import active_payloads, replay_full_history
from .errors import (
    DuplicateName,
    EvaluationFailed,
    GenerationInvalid,
    InvalidPackage,
    InvalidSkillSpec,
    RefinementExhausted,
    SandboxError,
    SandboxFailure,
    SkillFormatError,
    SourceNotSuccessful,
)
from .model import ModelClient, ModelRequest
from .sandbox import SandboxHandle, close_sandbox, create_sandbox, sandbox_run, sandbox_upload
from .session_store import RunMeta, SessionWorkspace, load_run_meta, load_snapshot
from .skill_bank import EvaluationResult, FailedTest, RegistrationOutcome, SkillBank
from .skill_package import (
    KNOWN_SUBDIRS,
    MEMORY_FILE,
    NAME_RE,
    SKILL_FILE,
    SkillPackage,
    load_package,
    package_from_text,
    parse_skill_md,
    validate_package,
    write_skill_package,
)

Emit = Callable[[str, dict], None]
SandboxFactory = Callable[[], SandboxHandle]

DEFAULT_MAX_ROUNDS = 3
FAILURE_OUTPUT_CHARS = 4_000
PYTEST_NO_TESTS = 5

_HAS_PYTEST = importlib.util.find_spec("pytest") is not None

SYSTEM_PROMPTS = {
    "skill_md": (
        "You write SKILL.md files for reusable agent skills. Reply with the complete file only: "
        "a frontmatter block between '---' lines holding `name` and `description`, then a "
        "Markdown body explaining when and how to use the skill."
    ),
    "plan_structure": (
        "Plan the helper files for this skill. Reply with JSON {\"files\": [paths]} where every "
        "path lies under scripts/, tests/, resources/ or references/. Test programs go in "
        "tests/ named test_*.py or test_*.sh. Use an empty list for a documentation-only skill."
    ),
    "generate_files": (
        "Write the planned files. Reply with JSON {\"files\": {path: content}} covering exactly "
        "the planned paths."
    ),
    "refine": (
        "Some of this skill's tests failed. Reply with JSON {\"files\": {path: content}} holding "
        "complete replacement contents for the files to change. Paths are relative to the "
        "skill root."
    ),
    "distill": (
        "This task was solved successfully. Describe a reusable skill capturing the approach. "
        "Reply with JSON {\"purpose\": ..., \"inputs\": ..., \"expected_outputs\": ..., "
        "\"name\": optional kebab-case name}."
    ),
}


def _noop(stage: str, payload: dict) -> None:
    pass


def slugify(text: str, max_words: int = 6) -> str:
    words = re.findall(r"[a-z0-9]+", text.lower())[:max_words]
    return "-".join(words) or "skill"


@dataclass(frozen=True)
class SkillSpec:
    purpose: str
    inputs: str = ""
    expected_outputs: str = ""
    name: str | None = None

    def __post_init__(self):
        if not self.purpose or not self.purpose.strip():
            raise InvalidSkillSpec("skill spec needs a non-empty purpose")
        if self.name is not None and not NAME_RE.fullmatch(self.name):
            raise InvalidSkillSpec(f"skill name {self.name!r} is not kebab-case")

    def dir_name(self) -> str:
        return self.name or slugify(self.purpose)

    def to_prompt(self) -> str:
        return (
            f"Skill name: {self.dir_name()}\n"
            f"Purpose: {self.purpose}\n"
            f"Inputs: {self.inputs or '(unspecified)'}\n"
            f"Expected outputs: {self.expected_outputs or '(unspecified)'}\n"
        )

    @classmethod
    def from_dict(cls, data: dict) -> SkillSpec:
        if not isinstance(data, dict):
            raise InvalidSkillSpec("skill spec must be a JSON object")
        return cls(
            purpose=str(data.get("purpose", "")),
            inputs=str(data.get("inputs", "")),
            expected_outputs=str(data.get("expected_outputs", "")),
            name=data.get("name") or None,
        )


# -- parsing helpers -----------------------------------------------------------


def _strip_fences(text: str) -> str:
    s = text.strip("\n")
    if s.lstrip().startswith("```"):
        lines = s.strip().splitlines()
        lines = lines[1:]
        if lines and lines[-1].strip().startswith("```"):
            lines = lines[:-1]
        s = "\n".join(lines)
    return s if s.endswith("\n") else s + "\n"


def extract_json(text: str) -> dict:
    s = _strip_fences(text).strip()
    try:
        obj = json.loads(s)
    except json.JSONDecodeError:
        start, end = s.find("{"), s.rfind("}")
        if start < 0 or end <= start:
            raise ValueError("no JSON object in model output") from None
        try:
            obj = json.loads(s[start : end + 1])
        except json.JSONDecodeError as exc:
            raise ValueError(f"invalid JSON in model output: {exc}") from None
    if not isinstance(obj, dict):
        raise ValueError("model output must be a JSON object")
    return obj


class PatchRejected(ValueError):
    pass


def check_package_path(rel: str, *, allow_skill_md: bool = False) -> str:
    """Normalise a package-relative path or raise PatchRejected."""
    if not isinstance(rel, str) or not rel.strip():
        raise PatchRejected("empty path")
    pure = PurePosixPath(rel.replace("\\", "/"))
    if pure.is_absolute() or ".." in pure.parts:
        raise PatchRejected(f"{rel!r} points outside the package")
    norm = pure.as_posix()
    if norm == SKILL_FILE:
        if allow_skill_md:
            return norm
        raise PatchRejected("SKILL.md is generated in its own step")
    if pure.name == MEMORY_FILE:
        raise PatchRejected(f"{MEMORY_FILE} is not part of the package")
    if len(pure.parts) < 2 or pure.parts[0] not in KNOWN_SUBDIRS:
        raise PatchRejected(f"{rel!r} must live under one of {', '.join(KNOWN_SUBDIRS)}")
    return norm


# -- creation ------------------------------------------------------------------


def _ask(
    model: ModelClient,
    purpose: str,
    messages: list[str],
    parse: Callable[[str], object],
    emit: Emit,
    turn_index: int,
):
    """One model step with a single re-ask on malformed output."""
    req = ModelRequest(
        system=SYSTEM_PROMPTS[purpose],
        messages=tuple(messages),
        purpose=purpose,
        turn_index=turn_index,
    )
    text = model.request(req).text
    try:
        return parse(text)
    except (SkillFormatError, ValueError, KeyError, TypeError) as exc:
        emit("create", {"step": purpose, "ok": False, "error": str(exc), "reask": True})
        retry = replace(
            req,
            messages=req.messages
            + (text, f"That reply was invalid ({exc}). Send a corrected reply only."),
        )
        text = model.request(retry).text
        try:
            return parse(text)
        except (SkillFormatError, ValueError, KeyError, TypeError) as exc2:
            raise GenerationInvalid(f"{purpose}: {exc2}") from exc2


def create_skill(
    spec: SkillSpec,
    model: ModelClient,
    staging: str | Path,
    *,
    emit: Emit = _noop,
    turn_index: int = 0,
    context: str = "",
) -> SkillPackage:
    """Generate SKILL.md, plan the layout, generate files; stage under ``staging/<name>``."""
    name = spec.dir_name()
    brief = spec.to_prompt() + (f"\nContext:\n{context}" if context else "")

    def parse_md(text: str) -> str:
        md = _strip_fences(text)
        parse_skill_md(md, name)
        return md

    skill_md = _ask(model, "skill_md", [brief], parse_md, emit, turn_index)
    emit("create", {"step": "skill_md", "ok": True, "name": name})

    def parse_plan(text: str) -> list[str]:
        files = extract_json(text)["files"]
        if not isinstance(files, list):
            raise ValueError("'files' must be a list of paths")
        paths = [check_package_path(p) for p in files]
        if len(set(paths)) != len(paths):
            raise ValueError("duplicate paths in plan")
        return paths

    plan = _ask(model, "plan_structure", [brief, skill_md], parse_plan, emit, turn_index)
    emit("create", {"step": "plan_structure", "ok": True, "files": plan})

    contents: dict[str, str] = {}
    if plan:

        def parse_files(text: str) -> dict[str, str]:
            files = extract_json(text)["files"]
            if not isinstance(files, dict):
                raise ValueError("'files' must map paths to contents")
            out = {check_package_path(k): v for k, v in files.items()}
            if set(out) != set(plan):
                raise ValueError(
                    f"files do not match the plan (missing {sorted(set(plan) - set(out))}, "
                    f"extra {sorted(set(out) - set(plan))})"
                )
            if not all(isinstance(v, str) for v in out.values()):
                raise ValueError("file contents must be strings")
            return out

        contents = _ask(
            model, "generate_files", [brief, skill_md, json.dumps({"files": plan})], parse_files, emit, turn_index
        )
        emit("create", {"step": "generate_files", "ok": True, "files": sorted(contents)})

    pkg = package_from_text(skill_md, name, contents)
    staging = Path(staging)
    staging.mkdir(parents=True, exist_ok=True)
    if (staging / name).exists():
        shutil.rmtree(staging / name)
    path = write_skill_package(pkg, staging)
    report = validate_package(path)
    if not report.ok:
        raise GenerationInvalid("; ".join(f"{e.code}: {e.message}" for e in report.errors))
    return load_package(path)


# -- evaluation ----------------------------------------------------------------


def _test_commands(name: str, test: str) -> list[str]:
    py = shlex.quote(sys.executable)
    where = f"cd inputs/{shlex.quote(name)} && "
    if test.endswith(".sh"):
        return [where + f"sh {shlex.quote(test)}"]
    direct = where + f"{py} {shlex.quote(test)}"
    if _HAS_PYTEST:
        pytest = f"PYTEST_DISABLE_PLUGIN_AUTOLOAD=1 {py} -m pytest -q -p no:cacheprovider"
        return [where + f"{pytest} {shlex.quote(test)}", direct]
    return [direct]


def evaluate_skill(
    pkg: SkillPackage,
    sandbox_factory: SandboxFactory | None = None,
    timeout: float = EXEC_CODE_TIMEOUT_SECONDS,
    *,
    emit: Emit = _noop,
) -> EvaluationResult:
    """Run each test program in a fresh sandbox; exit 0 passes.

    Python tests run under pytest when it is available; a file pytest
    collects nothing from (exit 5) is run as a plain script instead.
    """
    factory = sandbox_factory or create_sandbox
    tests = pkg.test_files()
    failures: list[FailedTest] = []
    with tempfile.TemporaryDirectory(prefix="autoskill-eval-") as tmp:
        src = pkg.root
        if src is None and tests:
            src = write_skill_package(pkg, tmp)
        for test in tests:
            try:
                h = factory()
            except SandboxError as exc:
                raise SandboxFailure(f"cannot create evaluation sandbox: {exc}") from exc
            try:
                sandbox_upload(h, src, f"inputs/{pkg.name}")
                commands = _test_commands(pkg.name, test)
                result = sandbox_run(h, commands[0], timeout)
                if result.exit_code == PYTEST_NO_TESTS and len(commands) > 1 and not result.timed_out:
                    result = sandbox_run(h, commands[1], timeout)
            except SandboxError as exc:
                raise SandboxFailure(f"evaluating {test}: {exc}") from exc
            finally:
                close_sandbox(h)
            if result.exit_code != 0 or result.timed_out:
                output = (result.stdout + result.stderr)[-FAILURE_OUTPUT_CHARS:]
                failures.append(FailedTest(test, result.exit_code, output, result.timed_out))
    outcome = EvaluationResult(len(tests), len(tests) - len(failures), failures)
    emit(
        "evaluate",
        {
            "name": pkg.name,
            "tests_run": outcome.tests_run,
            "tests_passed": outcome.tests_passed,
            "failed": [f.test_file for f in failures],
            "timed_out": [f.test_file for f in failures if f.timed_out],
        },
    )
    return outcome


# -- refinement ----------------------------------------------------------------


def _failure_report(result: EvaluationResult) -> str:
    parts = [f"{result.tests_passed} of {result.tests_run} tests passed."]
    for f in result.failures:
        flag = " (timed out)" if f.timed_out else ""
        parts.append(f"## {f.test_file}: exit code {f.exit_code}{flag}\n{f.output}")
    return "\n\n".join(parts)


def _package_listing(pkg: SkillPackage) -> str:
    parts = [f"=== {SKILL_FILE} ===\n{pkg.skill_md}"]
    for rel, data in sorted(pkg.files.items()):
        parts.append(f"=== {rel} ===\n{data.decode('utf-8', errors='replace')}")
    return "\n".join(parts)


def _parse_patch(text: str) -> dict:
    files = extract_json(text)["files"]
    if not isinstance(files, dict) or not files:
        raise ValueError("'files' must be a non-empty object of path -> content")
    if not all(isinstance(v, str) for v in files.values()):
        raise ValueError("file contents must be strings")
    return files


def _apply_patch(root: Path, files: dict) -> dict[Path, bytes | None]:
    """Write full-file replacements; returns the previous contents for rollback."""
    base = root.resolve()
    targets = {}
    for rel, content in files.items():
        norm = check_package_path(rel, allow_skill_md=True)
        target = base.joinpath(*PurePosixPath(norm).parts)
        resolved = target.resolve()
        if base not in resolved.parents:
            raise PatchRejected(f"{rel!r} resolves outside the package")
        targets[target] = content
    backup: dict[Path, bytes | None] = {}
    for target, content in targets.items():
        backup[target] = target.read_bytes() if target.is_file() else None
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(content, encoding="utf-8")
    return backup


def _rollback(backup: dict[Path, bytes | None]) -> None:
    for target, data in backup.items():
        if data is None:
            target.unlink(missing_ok=True)
        else:
            target.write_bytes(data)


def refine_skill(
    pkg: SkillPackage,
    eval_result: EvaluationResult,
    model: ModelClient,
    max_rounds: int = DEFAULT_MAX_ROUNDS,
    *,
    sandbox_factory: SandboxFactory | None = None,
    timeout: float = EXEC_CODE_TIMEOUT_SECONDS,
    emit: Emit = _noop,
    turn_index: int = 0,
) -> tuple[SkillPackage, EvaluationResult]:
    """Patch a staged package until its tests pass or ``max_rounds`` run out.

    A patch that escapes the package or breaks SKILL.md is rolled back and the
    round counts as failed; its evaluate event is marked ``skipped``.
    """
    if eval_result.all_passed:
        raise ValueError("refine_skill needs an evaluation with failures")
    if pkg.root is None:
        raise ValueError("refine_skill works on a staged package (pkg.root is None)")
    root = Path(pkg.root)
    result = eval_result
    for rnd in range(1, max_rounds + 1):
        req = ModelRequest(
            system=SYSTEM_PROMPTS["refine"],
            messages=(_failure_report(result), _package_listing(pkg)),
            purpose="refine",
            turn_index=turn_index,
        )
        text = model.request(req).text
        try:
            files = _parse_patch(text)
        except (ValueError, KeyError) as exc:
            retry = replace(req, messages=req.messages + (text, f"Invalid reply ({exc}). Send JSON only."))
            text = model.request(retry).text
            try:
                files = _parse_patch(text)
            except (ValueError, KeyError) as exc2:
                raise GenerationInvalid(f"refine: {exc2}") from exc2
        try:
            backup = _apply_patch(root, files)
        except PatchRejected as exc:
            emit("refine", {"round": rnd, "accepted": False, "reason": str(exc)})
            emit("evaluate", {"name": pkg.name, "skipped": True, "reason": "patch rejected"})
            continue
        report = validate_package(root)
        if not report.ok:
            _rollback(backup)
            reason = "; ".join(f"{e.code}: {e.message}" for e in report.errors)
            emit("refine", {"round": rnd, "accepted": False, "reason": reason})
            emit("evaluate", {"name": pkg.name, "skipped": True, "reason": "patch broke the package"})
            continue
        emit("refine", {"round": rnd, "accepted": True, "files": sorted(files)})
        pkg = load_package(root)
        result = evaluate_skill(pkg, sandbox_factory, timeout, emit=emit)
        if result.all_passed:
            return pkg, result
    raise RefinementExhausted(
        f"{pkg.name}: tests still failing after {max_rounds} refinement round(s)", pkg, result
    )


# -- distillation --------------------------------------------------------------


@dataclass
class Trajectory:
    session_id: str
    turns: list[str]
    meta: RunMeta
    instruction: str = ""

    @property
    def successful(self) -> bool:
        return (self.meta.reward is not None and self.meta.reward > 0) or self.meta.success is True

    def serialize(self) -> str:
        parts = [f"# Task\n{self.instruction.strip()}"]
        for i, text in enumerate(self.turns, 1):
            parts.append(f"# Turn {i}\n{text}")
        return "\n\n".join(parts) + "\n"


def load_trajectory(ws: SessionWorkspace, *, full_history: bool = False) -> Trajectory:
    """Read a finished session; the active chain by default, or every original turn."""
    ctx = load_snapshot(ws)
    meta = load_run_meta(ws)
    if full_history:
        turns = [p.render() for p in replay_full_history(ctx)]
    else:
        turns = active_payloads(ctx)
    return Trajectory(ws.session_id, turns, meta, ws.instruction())


def append_provenance(pkg_root: Path, session_id: str) -> SkillPackage:
    path = Path(pkg_root) / SKILL_FILE
    text = path.read_text(encoding="utf-8")
    if not text.endswith("\n"):
        text += "\n"
    text += f"\n## Provenance\n\nsource_session: {session_id}\n"
    path.write_text(text, encoding="utf-8")
    return load_package(pkg_root)


def distill_skill_from_trajectory(
    traj: Trajectory,
    model: ModelClient,
    staging: str | Path,
    *,
    emit: Emit = _noop,
    turn_index: int = 0,
) -> SkillPackage:
    if not traj.successful:
        raise SourceNotSuccessful(
            f"session {traj.session_id} is not marked successful (reward {traj.meta.reward!r})"
        )
    serialized = traj.serialize()
    emit("distill", {"source_session": traj.session_id, "turns": len(traj.turns)})

    def parse_spec(text: str) -> SkillSpec:
        try:
            return SkillSpec.from_dict(extract_json(text))
        except InvalidSkillSpec as exc:
            raise ValueError(str(exc)) from exc

    spec = _ask(model, "distill", [serialized], parse_spec, emit, turn_index)
    pkg = create_skill(spec, model, staging, emit=emit, turn_index=turn_index, context=serialized)
    return append_provenance(pkg.root, traj.session_id)


# -- pipelines -----------------------------------------------------------------


@dataclass
class PipelineOutcome:
    registered: bool
    name: str
    package: SkillPackage | None = None
    result: EvaluationResult | None = None
    refine_rounds: int = 0
    registration: RegistrationOutcome | None = None
    reason: str = ""

    def describe(self) -> str:
        if not self.registered:
            return f"skill {self.name!r} abandoned: {self.reason}"
        r = self.result
        tests = f"{r.tests_passed}/{r.tests_run} tests passed" if r and r.tests_run else "no tests (unevaluated)"
        return (
            f"registered skill {self.name!r}: {tests}, "
            f"{self.refine_rounds} refinement round(s)"
        )


def evaluate_and_register(
    pkg: SkillPackage,
    model: ModelClient,
    bank: SkillBank,
    *,
    sandbox_factory: SandboxFactory | None = None,
    timeout: float = EXEC_CODE_TIMEOUT_SECONDS,
    max_rounds: int = DEFAULT_MAX_ROUNDS,
    emit: Emit = _noop,
    turn_index: int = 0,
) -> PipelineOutcome:
    """evaluate, refine while failing, then register or abandon."""
    rounds = 0

    def counting(stage: str, payload: dict) -> None:
        nonlocal rounds
        if stage == "refine":
            rounds += 1
        emit(stage, payload)

    result = evaluate_skill(pkg, sandbox_factory, timeout, emit=counting)
    if not result.all_passed:
        try:
            pkg, result = refine_skill(
                pkg,
                result,
                model,
                max_rounds,
                sandbox_factory=sandbox_factory,
                timeout=timeout,
                emit=counting,
                turn_index=turn_index,
            )
        except RefinementExhausted as exc:
            emit("abandon", {"name": pkg.name, "reason": "refinement exhausted"})
            return PipelineOutcome(False, pkg.name, exc.package, exc.result, rounds, reason=str(exc))
        except GenerationInvalid as exc:
            emit("abandon", {"name": pkg.name, "reason": f"invalid refinement output: {exc}"})
            raise
    try:
        reg = bank.register(pkg, result)
    except (DuplicateName, InvalidPackage, EvaluationFailed) as exc:
        emit("abandon", {"name": pkg.name, "reason": str(exc)})
        return PipelineOutcome(False, pkg.name, pkg, result, rounds, reason=str(exc))
    emit(
        "register",
        {"name": reg.name, "tests_run": result.tests_run, "warnings": reg.warnings},
    )
    if pkg.root is not None:
        shutil.rmtree(pkg.root, ignore_errors=True)
    return PipelineOutcome(True, reg.name, pkg, result, rounds, reg)


def create_and_register(
    spec: SkillSpec,
    model: ModelClient,
    bank: SkillBank,
    staging: str | Path,
    *,
    emit: Emit = _noop,
    turn_index: int = 0,
    **kw,
) -> PipelineOutcome:
    try:
        pkg = create_skill(spec, model, staging, emit=emit, turn_index=turn_index)
    except GenerationInvalid as exc:
        emit("abandon", {"name": spec.dir_name(), "reason": str(exc)})
        raise
    return evaluate_and_register(pkg, model, bank, emit=emit, turn_index=turn_index, **kw)


def distill_and_register(
    traj: Trajectory,
    model: ModelClient,
    bank: SkillBank,
    staging: str | Path,
    *,
    emit: Emit = _noop,
    turn_index: int = 0,
    **kw,
) -> PipelineOutcome:
    try:
        pkg = distill_skill_from_trajectory(traj, model, staging, emit=emit, turn_index=turn_index)
    except GenerationInvalid as exc:
        emit("abandon", {"name": None, "reason": str(exc)})
        raise
    return evaluate_and_register(pkg, model, bank, emit=emit, turn_index=turn_index, **kw)


def staging_root(home: str | Path) -> Path:
    return Path(home) / "staging"
