"""Command-line interface.

Exit codes: 0 success, 1 domain error, 2 usage error. Inspection commands
write JSON to stdout (``--plain`` for readable text); diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import config
from .agent_loop import RetryingModel, run_task
from .context_dag import replay_full_history
from .errors import AutoskillError, HomeNotInitialized
from .model import ModelClient, model_from_spec
from .session_store import (
    RunMeta,
    create_session,
    load_snapshot,
    open_session,
    resume_session,
)
from .skill_bank import PrunePolicy, SkillBank, serialize_catalog
from .skill_lifecycle import (
    PipelineOutcome,
    SkillSpec,
    create_and_register,
    distill_and_register,
    evaluate_skill,
    load_trajectory,
    staging_root,
)
from .skill_package import SKILL_FILE, load_package, validate_package


class UsageError(Exception):
    pass


def _out(data, plain: bool, text: str | None = None) -> None:
    if plain and text is not None:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")
    else:
        sys.stdout.write(json.dumps(data, indent=2, ensure_ascii=False) + "\n")


def _home(args) -> Path:
    home = config.resolve_home(args.home)
    if not config.is_initialized(home):
        raise HomeNotInitialized(f"{home} is not an initialised agent home (run `autoskill init`)")
    return home


def _model(args, home: Path) -> ModelClient:
    if not args.model:
        raise UsageError("this command needs --model scripted:<fixture.json> or --model remote")
    try:
        return model_from_spec(args.model, home)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _outcome_dict(o: PipelineOutcome) -> dict:
    return {
        "registered": o.registered,
        "name": o.name,
        "refine_rounds": o.refine_rounds,
        "result": o.result.to_dict() if o.result else None,
        "warnings": o.registration.warnings if o.registration else [],
        "reason": o.reason,
    }


def _pipeline_kwargs(home: Path) -> dict:
    cfg = config.load_config(home).loop
    return {"timeout": cfg.exec_code_timeout, "max_rounds": cfg.refine_max_rounds}


# -- commands -------------------------------------------------------------------


def cmd_init(args) -> int:
    home = config.resolve_home(args.home)
    existed = [s for s in config.HOME_SUBDIRS if (home / s).is_dir()]
    config.init_home(home)
    created = [s for s in config.HOME_SUBDIRS if s not in existed]
    _out({"home": str(home), "created": created}, args.plain, f"initialised {home}")
    return 0


def cmd_skill_validate(args) -> int:
    report = validate_package(args.dir)
    lines = [f"{'ok' if report.ok else 'invalid'}: {args.dir}"]
    lines += [f"error {f.code}: {f.message}" for f in report.errors]
    lines += [f"warning {f.code}: {f.message}" for f in report.warnings]
    _out(report.to_dict(), args.plain, "\n".join(lines))
    return 0 if report.ok else 1


def cmd_skill_create(args) -> int:
    home = _home(args)
    try:
        spec = SkillSpec.from_dict(json.loads(Path(args.spec).read_text(encoding="utf-8")))
    except json.JSONDecodeError as exc:
        raise UsageError(f"--spec is not valid JSON: {exc}") from exc
    cfg = config.load_config(home).loop
    model = RetryingModel(_model(args, home), cfg)
    outcome = create_and_register(
        spec, model, SkillBank.for_home(home), staging_root(home), **_pipeline_kwargs(home)
    )
    _out(_outcome_dict(outcome), args.plain, outcome.describe())
    return 0 if outcome.registered else 1


def cmd_skill_evaluate(args) -> int:
    home = config.resolve_home(args.home)
    timeout = config.load_config(home).loop.exec_code_timeout
    result = evaluate_skill(load_package(args.dir), timeout=timeout)
    text = f"{result.tests_passed}/{result.tests_run} tests passed"
    _out(result.to_dict(), args.plain, text)
    return 0 if result.all_passed else 1


def cmd_skill_register(args) -> int:
    home = _home(args)
    bank = SkillBank.for_home(home)
    pkg = load_package(args.dir)
    timeout = config.load_config(home).loop.exec_code_timeout
    result = evaluate_skill(pkg, timeout=timeout)
    reg = bank.register(pkg, result)
    data = {"name": reg.name, "path": str(reg.path), "warnings": reg.warnings, "result": result.to_dict()}
    _out(data, args.plain, f"registered {reg.name} at {reg.path}")
    return 0


def cmd_skill_distill(args) -> int:
    home = _home(args)
    ws = open_session(home, args.session)
    traj = load_trajectory(ws, full_history=args.full_history)
    if args.reward is not None:
        traj.meta = RunMeta.from_dict({**traj.meta.to_dict(), "reward": args.reward})
    cfg = config.load_config(home).loop
    model = RetryingModel(_model(args, home), cfg)
    outcome = distill_and_register(
        traj, model, SkillBank.for_home(home), staging_root(home), **_pipeline_kwargs(home)
    )
    _out(_outcome_dict(outcome), args.plain, outcome.describe())
    return 0 if outcome.registered else 1


def cmd_catalog(args) -> int:
    bank = SkillBank.for_home(_home(args))
    entries = bank.catalog_entries()
    if args.plain:
        width = max((len(e.name) for e in entries), default=4)
        for e in entries:
            sys.stdout.write(f"{e.name.ljust(width)}  {e.description}\n")
    else:
        sys.stdout.write(serialize_catalog(entries))
    return 0


def _injected(skills: str | None) -> list[Path]:
    if not skills:
        return []
    root = Path(skills)
    if not root.is_dir():
        raise UsageError(f"--skills {skills} is not a directory")
    if (root / SKILL_FILE).is_file():
        return [root]
    return sorted(p for p in root.iterdir() if p.is_dir() and (p / SKILL_FILE).is_file())


def _run_summary(ws, meta: RunMeta | None) -> tuple[dict, str]:
    data = {"session_id": ws.session_id, "workspace": str(ws.root), "run_meta": meta.to_dict() if meta else None}
    text = f"session {ws.session_id}: " + (f"finished after {meta.turn_count} turn(s)" if meta else "paused")
    return data, text


def cmd_session_run(args) -> int:
    home = _home(args)
    model = _model(args, home)
    inputs = []
    if args.inputs:
        src = Path(args.inputs)
        if not src.is_dir():
            raise UsageError(f"--inputs {args.inputs} is not a directory")
        inputs = sorted(src.iterdir())
    instruction = Path(args.instruction).read_text(encoding="utf-8")
    ws = create_session(home, instruction, inputs, _injected(args.skills))
    cfg = config.load_config(home).loop
    meta = run_task(ws, SkillBank.for_home(home), model, cfg, stop_after=args.max_turns)
    data, text = _run_summary(ws, meta)
    _out(data, args.plain, text)
    return 0


def cmd_session_resume(args) -> int:
    home = _home(args)
    ws, ctx = resume_session(home, args.session_id)
    model = _model(args, home)
    cfg = config.load_config(home).loop
    meta = run_task(ws, SkillBank.for_home(home), model, cfg, ctx=ctx, stop_after=args.max_turns)
    data, text = _run_summary(ws, meta)
    _out(data, args.plain, text)
    return 0


def cmd_events(args) -> int:
    ws = open_session(_home(args), args.session_id)
    with open(ws.events_jsonl, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            sys.stdout.buffer.write(chunk)
    sys.stdout.flush()
    return 0


def cmd_replay(args) -> int:
    ws = open_session(_home(args), args.session_id)
    turns = replay_full_history(load_snapshot(ws))
    if args.plain:
        text = "\n\n".join(f"--- turn {i} ---\n{p.render()}" for i, p in enumerate(turns, 1))
        _out(None, True, text)
    else:
        _out([p.to_dict() for p in turns], False)
    return 0


def cmd_prune(args) -> int:
    bank = SkillBank.for_home(_home(args))
    removed = bank.prune(PrunePolicy(args.unused, args.fails))
    _out({"removed": removed}, args.plain, "\n".join(removed) or "nothing pruned")
    return 0


# -- parser -----------------------------------------------------------------------


def _common(defaults: bool) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    d = (lambda v: v) if defaults else (lambda v: argparse.SUPPRESS)
    p.add_argument("--home", default=d(None), help="agent home (default $AUTOSKILL_HOME or ~/.autoskill)")
    p.add_argument("--model", default=d(None), help="scripted:<fixture.json> or remote")
    p.add_argument("--plain", action="store_true", default=d(False), help="human-readable output")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common(False)
    parser = argparse.ArgumentParser(prog="autoskill", parents=[_common(True)], description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("init", parents=[common], help="create the agent home").set_defaults(func=cmd_init)

    skill = sub.add_parser("skill", parents=[common], help="skill package commands")
    ssub = skill.add_subparsers(dest="skill_command", required=True)
    p = ssub.add_parser("validate", parents=[common], help="validate a skill directory")
    p.add_argument("dir")
    p.set_defaults(func=cmd_skill_validate)
    p = ssub.add_parser("create", parents=[common], help="generate, test and register a skill")
    p.add_argument("--spec", required=True, help="JSON file with purpose, inputs, expected_outputs, name")
    p.set_defaults(func=cmd_skill_create)
    p = ssub.add_parser("register", parents=[common], help="evaluate and register a skill directory")
    p.add_argument("dir")
    p.set_defaults(func=cmd_skill_register)
    p = ssub.add_parser("evaluate", parents=[common], help="run a skill's tests")
    p.add_argument("dir")
    p.set_defaults(func=cmd_skill_evaluate)
    p = ssub.add_parser("distill", parents=[common], help="turn a successful session into a skill")
    p.add_argument("--session", required=True)
    p.add_argument("--reward", type=float, default=None, help="override the session reward")
    p.add_argument("--full-history", action="store_true", help="use every original turn")
    p.set_defaults(func=cmd_skill_distill)

    sub.add_parser("catalog", parents=[common], help="print the skill catalog").set_defaults(func=cmd_catalog)

    session = sub.add_parser("session", parents=[common], help="run or resume a session")
    sesub = session.add_subparsers(dest="session_command", required=True)
    p = sesub.add_parser("run", parents=[common], help="start a new session")
    p.add_argument("--instruction", required=True)
    p.add_argument("--inputs")
    p.add_argument("--skills")
    p.add_argument("--max-turns", type=int, default=None, help="pause after this many turns")
    p.set_defaults(func=cmd_session_run)
    p = sesub.add_parser("resume", parents=[common], help="continue a paused session")
    p.add_argument("session_id")
    p.add_argument("--max-turns", type=int, default=None, help="pause after this many turns")
    p.set_defaults(func=cmd_session_resume)

    p = sub.add_parser("events", parents=[common], help="print a session's events.jsonl")
    p.add_argument("session_id")
    p.set_defaults(func=cmd_events)
    p = sub.add_parser("replay", parents=[common], help="print a session's full history")
    p.add_argument("session_id")
    p.set_defaults(func=cmd_replay)
    p = sub.add_parser("prune", parents=[common], help="remove idle or failing skills")
    p.add_argument("--unused", type=int, default=PrunePolicy.unused_sessions)
    p.add_argument("--fails", type=int, default=PrunePolicy.consecutive_failures)
    p.set_defaults(func=cmd_prune)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"autoskill: error: {exc}", file=sys.stderr)
        return 2
    except (AutoskillError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
