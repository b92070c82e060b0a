"""Model-client contract plus the scripted and HTTP implementations.

Every model interaction goes through ``ModelClient.request``. Failures are
classified by exception type: :class:`TransientModelError` is retried by the
loop, :class:`ModelPermanentFailure` propagates at once.
"""

from __future__ import annotations

import json
import os
import socket
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Protocol

from .context_dag import TokenUsage, ToolCall, head_summarizer
from .errors import ModelPermanentFailure, TransientModelError

PURPOSES = (
    "turn",
    "verify",
    "summarize",
    "skill_md",
    "plan_structure",
    "generate_files",
    "refine",
    "distill",
)


@dataclass(frozen=True)
class ModelRequest:
    system: str
    messages: tuple[str, ...]
    tools: tuple[dict, ...] = ()
    purpose: str = "turn"
    # 1-based turn the request belongs to; 0 outside a session loop
    turn_index: int = 0
    timeout: float | None = None


@dataclass(frozen=True)
class ModelResponse:
    text: str = ""
    tool_calls: tuple[ToolCall, ...] = ()
    usage: TokenUsage = TokenUsage()


class ModelClient(Protocol):
    model_id: str

    def request(self, request: ModelRequest) -> ModelResponse: ...


def _response_from(entry: Any) -> ModelResponse:
    if isinstance(entry, str):
        return ModelResponse(text=entry)
    text = entry.get("text", "")
    if "json" in entry:
        text = json.dumps(entry["json"], ensure_ascii=False)
    calls = tuple(ToolCall.from_dict(c) for c in entry.get("tool_calls", []))
    return ModelResponse(text, calls, TokenUsage.from_dict(entry.get("usage")))


class ScriptedModel:
    """Deterministic model that replays a script.

    Script shape::

        {
          "model_id": "scripted",
          "turns": [                       # turns[i] answers turn_index i + 1
            {"text": "...", "tool_calls": [{"name": ..., "arguments": {...}}],
             "usage": {"fresh_in": 10, "cached_in": 0, "output": 5},
             "verify": {"complete": true, "reason": "..."},
             "fail": {"transient": 2},      # fail the first N attempts
             "responses": {"skill_md": ["..."], "refine": [{"json": {...}}]}},
          ],
          "responses": {"skill_md": [...]}, # for requests outside a turn
          "summary_chars": 400
        }

    Answers depend only on (purpose, turn_index) and how many times that pair
    has been asked, so a run split across a resume replays identically.
    """

    def __init__(self, script: dict, model_id: str | None = None):
        self.script = script
        self.model_id = model_id or script.get("model_id", "scripted")
        self._cursor: dict[tuple[str, int], int] = {}
        self._attempts: dict[tuple[str, int], int] = {}
        self._summarize = head_summarizer(int(script.get("summary_chars", 400)))
        self.requests: list[ModelRequest] = []

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> ScriptedModel:
        return cls(json.loads(Path(path).read_text(encoding="utf-8")))

    def _turn_entry(self, turn_index: int) -> dict | None:
        turns = self.script.get("turns", [])
        if 1 <= turn_index <= len(turns):
            return turns[turn_index - 1]
        return None

    def _maybe_fail(self, key: tuple[str, int], entry: dict | None) -> None:
        fail = (entry or {}).get("fail") if key[0] == "turn" else None
        if not fail:
            return
        n = self._attempts.get(key, 0) + 1
        self._attempts[key] = n
        if fail.get("permanent"):
            raise ModelPermanentFailure(f"scripted permanent failure at turn {key[1]}")
        if n <= int(fail.get("transient", 0)):
            raise TransientModelError(f"scripted transient failure {n} at turn {key[1]}")

    def request(self, request: ModelRequest) -> ModelResponse:
        self.requests.append(request)
        key = (request.purpose, request.turn_index)
        entry = self._turn_entry(request.turn_index)
        self._maybe_fail(key, entry)
        if request.purpose == "turn":
            if entry is None:
                raise ModelPermanentFailure(f"script has no turn {request.turn_index}")
            return _response_from(entry)
        if request.purpose == "summarize":
            return ModelResponse(text=self._summarize(list(request.messages)))
        if request.purpose == "verify":
            verdict = (entry or {}).get("verify", self.script.get("default_verify", {"complete": False}))
            return ModelResponse(text=json.dumps(verdict))
        pool = (entry or {}).get("responses", {}) if request.turn_index else self.script.get("responses", {})
        answers = pool.get(request.purpose, [])
        i = self._cursor.get(key, 0)
        if i >= len(answers):
            raise ModelPermanentFailure(
                f"script has no {request.purpose!r} response #{i + 1} for turn {request.turn_index}"
            )
        self._cursor[key] = i + 1
        return _response_from(answers[i])


@dataclass
class HttpModelClient:
    """Client for an OpenAI-compatible ``/chat/completions`` endpoint."""

    endpoint: str
    model_id: str
    api_key: str | None = None
    timeout: float = 300.0
    extra_headers: dict[str, str] = field(default_factory=dict)

    def _payload(self, request: ModelRequest) -> dict:
        messages = [{"role": "system", "content": request.system}]
        for i, text in enumerate(request.messages):
            role = "user" if i == 0 else "assistant"
            messages.append({"role": role, "content": text})
        if len(messages) > 2:
            messages.append({"role": "user", "content": "Continue with the next step."})
        body: dict[str, Any] = {"model": self.model_id, "messages": messages}
        if request.tools:
            body["tools"] = [
                {
                    "type": "function",
                    "function": {
                        "name": t["name"],
                        "description": t.get("description", ""),
                        "parameters": t.get("parameters", {"type": "object", "properties": {}}),
                    },
                }
                for t in request.tools
            ]
        return body

    def request(self, request: ModelRequest) -> ModelResponse:
        data = json.dumps(self._payload(request)).encode("utf-8")
        headers = {"Content-Type": "application/json", **self.extra_headers}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        req = urllib.request.Request(
            self.endpoint.rstrip("/") + "/chat/completions", data=data, headers=headers, method="POST"
        )
        try:
            with urllib.request.urlopen(req, timeout=request.timeout or self.timeout) as resp:
                raw = json.loads(resp.read().decode("utf-8"))
        except urllib.error.HTTPError as exc:
            if exc.code == 429 or exc.code >= 500:
                raise TransientModelError(f"HTTP {exc.code} from model endpoint") from exc
            raise ModelPermanentFailure(f"HTTP {exc.code} from model endpoint") from exc
        except (urllib.error.URLError, socket.timeout, TimeoutError, ConnectionError) as exc:
            raise TransientModelError(f"model endpoint unreachable: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise TransientModelError("model endpoint returned invalid JSON") from exc
        return parse_chat_completion(raw)


def parse_chat_completion(raw: dict) -> ModelResponse:
    try:
        message = raw["choices"][0]["message"]
    except (KeyError, IndexError, TypeError) as exc:
        raise ModelPermanentFailure("unexpected completion shape") from exc
    calls = []
    for tc in message.get("tool_calls") or []:
        fn = tc.get("function", {})
        try:
            args = json.loads(fn.get("arguments") or "{}")
        except json.JSONDecodeError:
            args = {"_raw": fn.get("arguments")}
        calls.append(ToolCall(fn.get("name", ""), args if isinstance(args, dict) else {"_raw": args}))
    usage = raw.get("usage") or {}
    prompt = int(usage.get("prompt_tokens", 0))
    cached = int((usage.get("prompt_tokens_details") or {}).get("cached_tokens", 0))
    return ModelResponse(
        text=message.get("content") or "",
        tool_calls=tuple(calls),
        usage=TokenUsage(prompt - cached, cached, int(usage.get("completion_tokens", 0))),
    )


def model_from_spec(spec: str, home: Path | None = None) -> ModelClient:
    """Build a client from ``scripted:<fixture.json>`` or ``remote``."""
    if spec.startswith("scripted:"):
        return ScriptedModel.from_file(spec.split(":", 1)[1])
    if spec == "remote":
        from .config import load_config

        cfg = load_config(home or Path("."))
        if not cfg.model.endpoint:
            raise ModelPermanentFailure("remote model requires 'endpoint' in config.toml")
        return HttpModelClient(
            endpoint=cfg.model.endpoint,
            model_id=cfg.model.model_id,
            api_key=os.environ.get(cfg.model.api_key_env),
            timeout=cfg.loop.model_timeout,
        )
    raise ValueError(f"unknown model spec {spec!r}; use scripted:<file> or remote")
