from __future__ import annotations

import json
from datetime import datetime, timedelta, timezone
from pathlib import Path

import pytest

from autoskill.config import init_home

FIXTURES = Path(__file__).parent / "fixtures"
SKILL_FIXTURES = FIXTURES / "skills"
SCRIPTS = FIXTURES / "scripts"
BASE_TIME = datetime(2026, 1, 2, 3, 4, 5, tzinfo=timezone.utc)


def skill_fixture_dirs() -> list[Path]:
    return sorted(p for p in SKILL_FIXTURES.iterdir() if p.is_dir())


def load_script(name: str) -> dict:
    return json.loads((SCRIPTS / name).read_text(encoding="utf-8"))


class TickClock:
    """Advances one second per reading."""

    def __init__(self, start: datetime = BASE_TIME):
        self.now = start

    def __call__(self) -> datetime:
        self.now += timedelta(seconds=1)
        return self.now


def seq_clock(ws):
    """Clock derived from the event count, so it survives a pause and resume."""
    return lambda: BASE_TIME + timedelta(seconds=ws.last_seq())


def no_sleep(_seconds: float) -> None:
    pass


@pytest.fixture
def home(tmp_path: Path) -> Path:
    return init_home(tmp_path / "home")


SID_TEN = "10" * 16


def run_scripted(
    home: Path,
    script: dict,
    *,
    split: int | None = None,
    budget=None,
    session_id: str = SID_TEN,
    instruction: str = "Run the ten scripted steps.",
    **kw,
):
    """Run a scripted session to completion, optionally pausing after ``split`` turns.

    The resumed half gets a fresh model and workspace handle, as a new process would.
    """
    from autoskill.agent_loop import run_task
    from autoskill.model import ScriptedModel
    from autoskill.session_store import create_session, open_session
    from autoskill.skill_bank import SkillBank

    ws = create_session(home, instruction, session_id=session_id)
    bank = SkillBank.for_home(home, seq_clock(ws))
    common = dict(sleep=no_sleep, budget=budget, **kw)
    if split is not None:
        first = run_task(ws, bank, ScriptedModel(script), clock=seq_clock(ws), stop_after=split, **common)
        assert first is None
        ws = open_session(home, session_id)
        bank = SkillBank.for_home(home, seq_clock(ws))
    meta = run_task(ws, bank, ScriptedModel(script), clock=seq_clock(ws), **common)
    return ws, meta


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
