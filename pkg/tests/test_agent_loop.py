from __future__ import annotations

import random
import re
import time
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from autoskill.agent_loop import (
    Tool,
    ToolRegistry,
    backoff_delay,
    call_model_with_retry,
    default_registry,
    dispatch_tool_call,
    execute_skill,
    gate_final_answer,
    parse_verdict,
    render_system_prompt,
    run_task,
    truncate_tool_output,
)
from autoskill.config import LoopConfig
from autoskill.context_dag import CompressionBudget, ToolCall, replay_full_history
from autoskill.errors import AlreadyFinalized, LoopAborted, ModelExhaustedRetries, ModelPermanentFailure, TransientModelError
from autoskill.memory_store import append_block, read_blocks
from autoskill.model import ModelRequest, ModelResponse, ScriptedModel
from autoskill.session_store import create_session, load_run_meta, load_snapshot
from autoskill.skill_bank import EvaluationResult, SkillBank
from autoskill.skill_package import load_package
from conftest import SKILL_FIXTURES, TickClock, load_script, no_sleep, run_scripted

MARKER_RE = re.compile(r"\n\[truncated: (\d+) chars omitted\]$")


# -- truncation ------------------------------------------------------------------


def test_truncation_at_exact_limit():
    assert LoopConfig().tool_text_limit == 8192
    assert truncate_tool_output("a" * 8192) == "a" * 8192
    out = truncate_tool_output("a" * 8193)
    assert len(out) == 8192
    omitted = int(MARKER_RE.search(out).group(1))
    assert out[: 8193 - omitted] == "a" * (8193 - omitted)
    assert len(out) - len(MARKER_RE.search(out).group(0)) == 8193 - omitted


@settings(max_examples=300, deadline=None)
@given(st.text(max_size=300), st.integers(40, 120))
def test_truncation_properties(text: str, limit: int):
    out = truncate_tool_output(text, limit)
    if len(text) <= limit:
        assert out == text
        return
    assert len(out) == limit
    m = MARKER_RE.search(out)
    kept = len(out) - len(m.group(0))
    assert int(m.group(1)) == len(text) - kept
    assert out[:kept] == text[:kept]


def test_truncation_with_tiny_limit():
    assert truncate_tool_output("x" * 50, 5) == "xxxxx"


# -- retry -----------------------------------------------------------------------


class Flaky:
    model_id = "flaky"

    def __init__(self, failures: int, permanent: bool = False):
        self.failures = failures
        self.permanent = permanent
        self.calls = 0

    def request(self, request):
        self.calls += 1
        if self.permanent:
            raise ModelPermanentFailure("no")
        if self.calls <= self.failures:
            raise TransientModelError(f"fail {self.calls}")
        return ModelResponse("ok")


@pytest.mark.parametrize("failures", [0, 1, 3, 5])
def test_retry_recovers_within_budget(failures: int):
    model, sleeps = Flaky(failures), []
    assert call_model_with_retry(model, ModelRequest("s", ()), sleep=sleeps.append, rng=random.Random(0)).text == "ok"
    assert model.calls == failures + 1
    assert len(sleeps) == failures


def test_retry_exhaustion_after_exactly_five_retries():
    model, sleeps, backoffs = Flaky(100), [], []
    with pytest.raises(ModelExhaustedRetries) as info:
        call_model_with_retry(
            model,
            ModelRequest("s", ()),
            sleep=sleeps.append,
            rng=random.Random(1),
            on_backoff=lambda a, d, e: backoffs.append(a),
        )
    assert LoopConfig().max_retry == 5
    assert model.calls == 6 and info.value.attempts == 6
    assert backoffs == [1, 2, 3, 4, 5]
    for retry, delay in enumerate(sleeps, 1):
        assert 0 <= delay <= 2 ** (retry - 1)


def test_permanent_failure_is_not_retried():
    model = Flaky(0, permanent=True)
    with pytest.raises(ModelPermanentFailure):
        call_model_with_retry(model, ModelRequest("s", ()), sleep=no_sleep)
    assert model.calls == 1


def test_backoff_is_full_jitter():
    rng = random.Random(3)
    for retry in range(1, 6):
        delays = [backoff_delay(retry, rng) for _ in range(200)]
        assert min(delays) >= 0 and max(delays) <= 2 ** (retry - 1)
        assert max(delays) > 0.8 * 2 ** (retry - 1)


# -- completion gate -------------------------------------------------------------


def test_gate_turns():
    cfg = LoopConfig()
    assert cfg.verify_completion_turn_threshold == 4
    for turn in (1, 2, 3):
        assert gate_final_answer(turn, cfg).action == "force_verify"
        assert not gate_final_answer(turn, cfg).accepted
        assert gate_final_answer(turn, cfg, lambda: (True, "done")).accepted
        assert not gate_final_answer(turn, cfg, lambda: (False, "no")).accepted
    called = []
    decision = gate_final_answer(4, cfg, lambda: called.append(1) or (False, ""))
    assert decision.accepted and decision.action == "accept" and called == []


@pytest.mark.parametrize(
    "text, complete",
    [('{"complete": true, "reason": "ok"}', True), ('```json\n{"complete": false}\n```', False), ("Yes, done", True), ("nope", False)],
)
def test_parse_verdict(text: str, complete: bool):
    assert parse_verdict(text)[0] is complete


# -- tool dispatch ---------------------------------------------------------------


def test_dispatch_errors_come_back_as_text():
    def boom(rt, x: int) -> str:
        raise RuntimeError("kaboom")

    reg = ToolRegistry([Tool("boom", "d", {}, boom), Tool("big", "d", {}, lambda rt: "y" * 10_000)])
    cfg = LoopConfig()
    assert dispatch_tool_call(reg, ToolCall("nope"), cfg) == "error: unknown tool nope"
    assert dispatch_tool_call(reg, ToolCall("boom", {"y": 1}), cfg).startswith("error: bad arguments for boom")
    assert dispatch_tool_call(reg, ToolCall("boom", {"x": 1}), cfg) == "error: RuntimeError: kaboom"
    assert len(dispatch_tool_call(reg, ToolCall("big"), cfg)) == 8192
    with pytest.raises(ValueError):
        reg.register(Tool("big", "d", {}, lambda rt: ""))


def test_dispatch_timeout_uses_class_limit():
    reg = ToolRegistry([Tool("slow", "d", {}, lambda rt: time.sleep(5) or "late")])
    start = time.monotonic()
    out = dispatch_tool_call(reg, ToolCall("slow"), LoopConfig(tool_timeout=0.2))
    assert out == "error: tool slow timed out after 0.2s"
    assert time.monotonic() - start < 2


def test_default_registry_tools():
    names = default_registry().names()
    assert set(names) == {
        "skill_create", "web_search", "read_skill", "terminal", "create_sandbox", "sandbox_run",
        "sandbox_upload", "sandbox_download", "close_sandbox", "verify_completion", "final_answer", "memory_append",
    }
    reg = default_registry()
    assert reg.get("terminal").timeout_class == "terminal"
    assert reg.get("sandbox_run").timeout_class == "exec"
    assert reg.get("verify_completion").timeout_class == "verify"
    assert LoopConfig().timeout_for("exec") == 60 and LoopConfig().timeout_for("tool") == 300
    assert LoopConfig().timeout_for("verify") == 120 and LoopConfig().timeout_for("model") == 300


# -- skills in the loop ----------------------------------------------------------


def test_execute_skill_surfaces_memory(home: Path):
    bank = SkillBank.for_home(home)
    bank.register(load_package(SKILL_FIXTURES / "date-normalize"), EvaluationResult(1, 1))
    ws = create_session(home, "x", injected_skills=[SKILL_FIXTURES / "word-count"])
    text = execute_skill(ws, bank, "date-normalize")
    assert "Skill memory (.memory.md):\n(empty)" in text
    assert "- skills/date-normalize/scripts/" in text
    append_block(bank.memory_path("date-normalize"), "prefer ISO dates", TickClock())
    assert "prefer ISO dates" in execute_skill(ws, bank, "date-normalize")
    assert "Skill `word-count`" in execute_skill(ws, bank, "word-count")


def test_system_prompt_lists_catalog_and_memory(home: Path):
    bank = SkillBank.for_home(home)
    bank.register(load_package(SKILL_FIXTURES / "csv-summarize"), EvaluationResult(0, 0))
    ws = create_session(home, "x")
    append_block(ws.memory_md, "session fact", TickClock())
    prompt = render_system_prompt(ws, bank, default_registry())
    assert "- name: csv-summarize" in prompt
    assert "session fact" in prompt
    assert "- terminal:" in prompt
    assert "$" not in prompt.replace("$SANDBOX_ROOT", "")


# -- full runs -------------------------------------------------------------------


def test_ten_turn_run(home: Path):
    ws, meta = run_scripted(home, load_script("ten_turns.json"))
    assert meta.turn_count == 10 and meta.completed and meta.model == "scripted-ten"
    assert load_run_meta(ws) == meta
    events = ws.read_events()
    assert [e.seq for e in events] == list(range(1, len(events) + 1))

    def of(kind, turn):
        return [e.payload for e in events if e.kind == kind and e.payload.get("turn") == turn]

    # turn 2: premature answer forces a verify and is rejected
    assert [p["tool"] for p in of("tool_call", 2)] == ["final_answer", "verify_completion"]
    assert of("tool_call", 2)[1]["forced"] is True
    obs = of("observation", 2)
    assert obs[0]["complete"] is False and obs[1]["accepted"] is False
    assert [p["purpose"] for p in of("model_call", 2)] == ["turn", "verify"]
    # turn 4: two transient failures, then success on attempt 3
    assert [p["attempt"] for p in of("retry", 4)] == [1, 2]
    assert of("model_call", 4)[0]["attempts"] == 3
    assert of("observation", 4)[1]["text"] == "error: unknown tool no_such_tool"
    # turn 5: offline web search
    assert "unavailable" in of("observation", 5)[1]["text"]
    # turn 7: a second sandbox cannot see the first one's outputs
    assert of("observation", 7)[2]["text"].splitlines()[-1] == "done"
    assert "hi.txt" not in of("observation", 7)[2]["text"]
    # turn 10: accepted without verification
    assert [p["tool"] for p in of("tool_call", 10)] == ["final_answer"]
    assert events[-1].kind == "final_answer" and events[-1].payload["text"] == "all ten steps done"
    assert ws.agent_message_md.read_text() == "all ten steps done"
    assert [b.content for b in read_blocks(ws.memory_md)] == ["checkpoint after turn 3"]
    assert len(replay_full_history(load_snapshot(ws))) == 10


def test_run_is_deterministic(tmp_path: Path):
    from autoskill.config import init_home

    outs = []
    for i in range(2):
        home = init_home(tmp_path / f"h{i}")
        ws, _ = run_scripted(home, load_script("ten_turns.json"))
        outs.append((ws.events_jsonl.read_bytes(), ws.ctx_state.read_bytes(), ws.agent_stdout.read_bytes()))
    assert outs[0] == outs[1]


def test_compression_event_precedes_model_call(home: Path):
    ws, _ = run_scripted(home, load_script("ten_turns.json"), budget=CompressionBudget(2000, 300, 2, 2))
    events = ws.read_events()
    compressions = [i for i, e in enumerate(events) if e.kind == "compression"]
    assert compressions
    levels = [events[i].payload["status"] for i in compressions]
    assert "level1" in levels and "level2" in levels
    assert levels.index("level1") < levels.index("level2")
    for i in compressions:
        turn = events[i].payload["turn"]
        following = [e for e in events[i + 1 :] if e.kind == "model_call" and e.payload["purpose"] == "turn"]
        assert following[0].payload["turn"] == turn
        # nothing from this turn's model answer was logged before the compression
        assert not any(e.kind == "plan" and e.payload["turn"] == turn for e in events[:i])
    assert len(replay_full_history(load_snapshot(ws))) == 10


def test_turn_limit_and_permanent_failure(home: Path):
    script = {"turns": [{"text": "thinking"}] * 3}
    ws = create_session(home, "x")
    with pytest.raises(LoopAborted):
        run_task(ws, SkillBank.for_home(home), ScriptedModel(script), LoopConfig(turn_limit=3), sleep=no_sleep)
    ws = create_session(home, "y")
    with pytest.raises(ModelPermanentFailure):
        run_task(ws, SkillBank.for_home(home), ScriptedModel({"turns": [{"fail": {"permanent": True}}]}), sleep=no_sleep)
    assert ws.read_events()[-1].payload["error"].startswith("scripted permanent failure")


def test_exhausted_retries_abort_the_run(home: Path):
    ws = create_session(home, "x")
    script = {"turns": [{"text": "t", "fail": {"transient": 6}}]}
    with pytest.raises(ModelExhaustedRetries):
        run_task(ws, SkillBank.for_home(home), ScriptedModel(script), sleep=no_sleep)
    kinds = [e.kind for e in ws.read_events()]
    assert kinds == ["retry"] * 5 + ["model_call"]
    assert ws.read_events()[-1].payload["attempts"] == 6


def test_finalized_session_cannot_run_again(home: Path):
    ws, _ = run_scripted(home, load_script("ten_turns.json"))
    with pytest.raises(AlreadyFinalized):
        run_task(ws, SkillBank.for_home(home), ScriptedModel(load_script("ten_turns.json")), sleep=no_sleep)


def test_memory_append_tiers_and_skill_failure_accounting(home: Path):
    bank = SkillBank.for_home(home)
    bank.register(load_package(SKILL_FIXTURES / "word-count"), EvaluationResult(1, 1))
    script = {
        "turns": [
            {"text": "load", "tool_calls": [{"name": "read_skill", "arguments": {"name": "word-count"}}]},
            {
                "text": "fail and take notes",
                "tool_calls": [
                    {"name": "terminal", "arguments": {"command": "exit 2"}},
                    {"name": "memory_append", "arguments": {"tier": "skill", "skill": "word-count", "content": "exit 2 means bad input"}},
                    {"name": "memory_append", "arguments": {"tier": "long_term", "content": "user prefers terse output"}},
                    {"name": "memory_append", "arguments": {"tier": "bogus", "content": "x"}},
                ],
            },
            {"text": "wrap up", "tool_calls": [{"name": "final_answer", "arguments": {"answer": "ok"}}]},
            {"text": "accepted", "tool_calls": [{"name": "final_answer", "arguments": {"answer": "ok"}}]},
        ],
        "default_verify": {"complete": False},
    }
    ws = create_session(home, "x")
    meta = run_task(ws, bank, ScriptedModel(script), clock=TickClock(), sleep=no_sleep)
    assert meta.turn_count == 4
    obs = [e.payload["text"] for e in ws.read_events() if e.kind == "observation"]
    assert any("note: skill `word-count` was in use" in o for o in obs)
    assert any(o.startswith("error: ValueError: tier must be") for o in obs)
    assert [b.content for b in read_blocks(bank.memory_path("word-count"))] == ["exit 2 means bad input"]
    assert [b.content for b in read_blocks(home / "memory/long_term_memory/memory.md")] == ["user prefers terse output"]
    meta_idx = bank.index()["word-count"]
    assert (meta_idx.failures, meta_idx.successes) == (1, 1)
