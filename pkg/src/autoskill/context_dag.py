"""Conversation context as a DAG of turn nodes with two-level compression.

Each node carries two pointer sets. ``parent_id`` is mutable and defines the
active chain (tip -> root) that is sent to the model. ``history_prev`` /
``history_next`` are written once, when the next turn is appended, and
define the full original history. Compression only ever rewires
``parent_id`` or fills ``compressed_input``; the original ``input`` is never
touched, so the full history can always be replayed.
"""

from __future__ import annotations

import json
import math
import uuid
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator, Sequence

from .config import (
    COMPRESS_KEEP_FIRST_TURNS,
    COMPRESS_KEEP_LAST_TURNS,
    COMPRESS_TOKEN_THRESHOLD,
    NODE_COMPRESS_TOKEN_THRESHOLD,
)
from .errors import BrokenHistoryLink, ContextCorrupt, CycleDetected

SNAPSHOT_VERSION = 1

Summarizer = Callable[[list[str]], str]
TokenEstimator = Callable[[str], int]


@dataclass(frozen=True)
class TokenUsage:
    fresh_in: int = 0
    cached_in: int = 0
    output: int = 0

    def to_dict(self) -> dict[str, int]:
        return {"fresh_in": self.fresh_in, "cached_in": self.cached_in, "output": self.output}

    @classmethod
    def from_dict(cls, data: dict | None) -> TokenUsage:
        data = data or {}
        return cls(int(data.get("fresh_in", 0)), int(data.get("cached_in", 0)), int(data.get("output", 0)))


@dataclass(frozen=True)
class ToolCall:
    name: str
    arguments: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {"name": self.name, "arguments": self.arguments}

    @classmethod
    def from_dict(cls, data: dict) -> ToolCall:
        return cls(data["name"], dict(data.get("arguments") or {}))


@dataclass(frozen=True)
class TurnPayload:
    """Everything one Plan/Action/Observe step produced."""

    response: str = ""
    tool_calls: tuple[ToolCall, ...] = ()
    observations: tuple[str, ...] = ()
    usage: TokenUsage = TokenUsage()

    def is_empty(self) -> bool:
        return not (self.response or self.tool_calls or self.observations)

    def render(self) -> str:
        """Text form sent to the model; a bare response renders as itself."""
        parts = [self.response] if self.response else []
        for call in self.tool_calls:
            args = json.dumps(call.arguments, sort_keys=True, ensure_ascii=False)
            parts.append(f"[tool_call] {call.name} {args}")
        for obs in self.observations:
            parts.append(f"[observation] {obs}")
        return "\n".join(parts)

    def to_dict(self) -> dict[str, Any]:
        return {
            "response": self.response,
            "tool_calls": [c.to_dict() for c in self.tool_calls],
            "observations": list(self.observations),
            "usage": self.usage.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> TurnPayload:
        return cls(
            response=data.get("response", ""),
            tool_calls=tuple(ToolCall.from_dict(c) for c in data.get("tool_calls", [])),
            observations=tuple(data.get("observations", [])),
            usage=TokenUsage.from_dict(data.get("usage")),
        )


@dataclass
class ConversationNode:
    node_id: str
    input: TurnPayload | None
    compressed_input: str | None = None
    is_node_compressed: bool = False
    is_summary: bool = False
    parent_id: str | None = None
    history_prev: str | None = None
    history_next: str | None = None

    def read(self) -> str:
        """Active-chain view: the summary once compressed, else the original."""
        if self.is_summary or self.is_node_compressed:
            return self.compressed_input or ""
        return self.input.render() if self.input is not None else ""

    def to_dict(self) -> dict[str, Any]:
        return {
            "node_id": self.node_id,
            "input": None if self.input is None else self.input.to_dict(),
            "compressed_input": self.compressed_input,
            "is_node_compressed": self.is_node_compressed,
            "is_summary": self.is_summary,
            "parent_id": self.parent_id,
            "history_prev": self.history_prev,
            "history_next": self.history_next,
        }

    @classmethod
    def from_dict(cls, data: dict) -> ConversationNode:
        raw_input = data.get("input")
        return cls(
            node_id=data["node_id"],
            input=None if raw_input is None else TurnPayload.from_dict(raw_input),
            compressed_input=data.get("compressed_input"),
            is_node_compressed=bool(data.get("is_node_compressed", False)),
            is_summary=bool(data.get("is_summary", False)),
            parent_id=data.get("parent_id"),
            history_prev=data.get("history_prev"),
            history_next=data.get("history_next"),
        )


@dataclass(frozen=True)
class CompressionBudget:
    compress_token_threshold: int = COMPRESS_TOKEN_THRESHOLD
    node_compress_token_threshold: int = NODE_COMPRESS_TOKEN_THRESHOLD
    keep_first_turns: int = COMPRESS_KEEP_FIRST_TURNS
    keep_last_turns: int = COMPRESS_KEEP_LAST_TURNS

    def __post_init__(self):
        for name in (
            "compress_token_threshold",
            "node_compress_token_threshold",
            "keep_first_turns",
            "keep_last_turns",
        ):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def to_dict(self) -> dict[str, int]:
        return {
            "compress_token_threshold": self.compress_token_threshold,
            "node_compress_token_threshold": self.node_compress_token_threshold,
            "keep_first_turns": self.keep_first_turns,
            "keep_last_turns": self.keep_last_turns,
        }


def estimate_tokens(text: str | TurnPayload | ConversationNode | None) -> int:
    """ceil(utf-8 byte length / 4). Monotone in byte length."""
    if text is None:
        return 0
    if isinstance(text, ConversationNode):
        text = text.read()
    elif isinstance(text, TurnPayload):
        text = text.render()
    return math.ceil(len(text.encode("utf-8")) / 4)


@dataclass
class AgentContext:
    nodes: dict[str, ConversationNode] = field(default_factory=dict)
    root: str | None = None
    tip: str | None = None
    budget: CompressionBudget = field(default_factory=CompressionBudget)
    # newest non-summary node; where the next history link attaches
    history_tail: str | None = None
    # derive ids from node count instead of uuid4 (reproducible snapshots)
    sequential_ids: bool = False
    estimator: TokenEstimator = field(default=estimate_tokens, compare=False, repr=False)

    def new_id(self) -> str:
        if self.sequential_ids:
            return f"{len(self.nodes):032x}"
        return uuid.uuid4().hex

    def node_tokens(self, node: ConversationNode) -> int:
        return self.estimator(node.read())

    def active_tokens(self) -> int:
        return sum(self.node_tokens(n) for n in active_chain(self))

    def turn_count(self) -> int:
        return sum(1 for _ in _history_nodes(self))

    def to_dict(self) -> dict[str, Any]:
        return {
            "version": SNAPSHOT_VERSION,
            "root": self.root,
            "tip": self.tip,
            "history_tail": self.history_tail,
            "sequential_ids": self.sequential_ids,
            "budget": self.budget.to_dict(),
            "nodes": [n.to_dict() for n in self.nodes.values()],
        }

    @classmethod
    def from_dict(cls, data: dict) -> AgentContext:
        """Rebuild and check every pointer invariant; raises ContextCorrupt."""
        try:
            if data.get("version") != SNAPSHOT_VERSION:
                raise ContextCorrupt(f"unsupported snapshot version {data.get('version')!r}")
            nodes = {}
            for raw in data["nodes"]:
                node = ConversationNode.from_dict(raw)
                if node.node_id in nodes:
                    raise ContextCorrupt(f"duplicate node id {node.node_id}")
                nodes[node.node_id] = node
            ctx = cls(
                nodes=nodes,
                root=data["root"],
                tip=data["tip"],
                budget=CompressionBudget(**data.get("budget", {})),
                history_tail=data.get("history_tail"),
                sequential_ids=bool(data.get("sequential_ids", False)),
            )
        except ContextCorrupt:
            raise
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise ContextCorrupt(f"malformed context data: {exc}") from exc
        check_invariants(ctx)
        return ctx


def append_turn(ctx: AgentContext, payload: TurnPayload) -> str:
    if payload.is_empty():
        raise ValueError("cannot append an empty turn")
    node = ConversationNode(ctx.new_id(), payload, parent_id=ctx.tip, history_prev=ctx.history_tail)
    if ctx.history_tail is not None:
        ctx.nodes[ctx.history_tail].history_next = node.node_id
    ctx.nodes[node.node_id] = node
    if ctx.root is None:
        ctx.root = node.node_id
    ctx.tip = node.node_id
    ctx.history_tail = node.node_id
    return node.node_id


def active_chain(ctx: AgentContext) -> list[ConversationNode]:
    """Nodes reachable from the tip via parent_id, ordered root -> tip."""
    chain: list[ConversationNode] = []
    seen: set[str] = set()
    cur = ctx.tip
    while cur is not None:
        if cur in seen:
            raise CycleDetected(f"parent_id cycle through {cur}")
        seen.add(cur)
        node = ctx.nodes.get(cur)
        if node is None:
            raise ContextCorrupt(f"parent_id points at missing node {cur}")
        chain.append(node)
        cur = node.parent_id
    if chain and chain[-1].node_id != ctx.root:
        raise ContextCorrupt("active chain does not end at the root")
    chain.reverse()
    return chain


def active_payloads(ctx: AgentContext) -> list[str]:
    return [n.read() for n in active_chain(ctx)]


def _history_nodes(ctx: AgentContext) -> Iterator[ConversationNode]:
    cur, prev = ctx.root, None
    steps = 0
    while cur is not None:
        node = ctx.nodes.get(cur)
        if node is None:
            raise BrokenHistoryLink(f"history points at missing node {cur}")
        if node.is_summary:
            raise BrokenHistoryLink(f"summary node {cur} found on the history walk")
        if node.history_prev != prev:
            raise BrokenHistoryLink(f"node {cur} history_prev={node.history_prev}, expected {prev}")
        steps += 1
        if steps > len(ctx.nodes):
            raise BrokenHistoryLink("history walk does not terminate")
        yield node
        prev, cur = cur, node.history_next


def replay_full_history(ctx: AgentContext) -> list[TurnPayload]:
    """Original payloads in creation order, ignoring every compression."""
    return [n.input for n in _history_nodes(ctx)]


def check_invariants(ctx: AgentContext) -> None:
    if not ctx.nodes:
        if ctx.root is not None or ctx.tip is not None:
            raise ContextCorrupt("empty context with root/tip set")
        return
    for key in (ctx.root, ctx.tip, ctx.history_tail):
        if key not in ctx.nodes:
            raise ContextCorrupt(f"root/tip/history_tail {key!r} is not a node")
    for node in ctx.nodes.values():
        if node.is_summary and (node.history_prev or node.history_next):
            raise ContextCorrupt(f"summary node {node.node_id} has history pointers")
        if node.is_node_compressed and node.compressed_input is None:
            raise ContextCorrupt(f"node {node.node_id} flagged compressed without a summary")
        if not node.is_summary and node.input is None:
            raise ContextCorrupt(f"turn node {node.node_id} has no input")
    active_chain(ctx)
    history = list(_history_nodes(ctx))
    originals = [n for n in ctx.nodes.values() if not n.is_summary]
    if len(history) != len(originals):
        raise BrokenHistoryLink("history walk does not visit every turn node")
    if history[-1].node_id != ctx.history_tail:
        raise BrokenHistoryLink("history walk does not end at history_tail")


@dataclass
class CompressionReport:
    # untouched | level1 | level2 | chain_too_short
    status: str
    tokens_before: int
    tokens_after: int
    level1_attempted: bool = False
    level2_applied: bool = False
    compressed_nodes: list[str] = field(default_factory=list)
    summary_node: str | None = None
    collapsed_nodes: list[str] = field(default_factory=list)

    @property
    def level(self) -> int:
        return 2 if self.level2_applied else (1 if self.status == "level1" else 0)

    def to_event(self) -> dict[str, Any]:
        return {
            "status": self.status,
            "level": self.level,
            "tokens_before": self.tokens_before,
            "tokens_after": self.tokens_after,
            "level1_nodes": len(self.compressed_nodes),
            "level2_span": len(self.collapsed_nodes),
        }


def maybe_compress_history(ctx: AgentContext, summarizer: Summarizer) -> CompressionReport:
    """Bring the active chain back under budget.

    Level-1 summarises oversized middle nodes in place, oldest first, and
    stops as soon as the chain fits. If that is not enough, Level-2 replaces
    the whole middle span with one synthetic summary node. The first
    ``keep_first_turns`` and last ``keep_last_turns`` chain positions are
    never touched.
    """
    b = ctx.budget
    chain = active_chain(ctx)
    sizes = [ctx.node_tokens(n) for n in chain]
    total = sum(sizes)
    if total <= b.compress_token_threshold:
        return CompressionReport("untouched", total, total)
    if len(chain) <= b.keep_first_turns + b.keep_last_turns:
        return CompressionReport("chain_too_short", total, total)

    report = CompressionReport("level1", total, total, level1_attempted=True)
    middle = range(b.keep_first_turns, len(chain) - b.keep_last_turns)
    for i in middle:
        node = chain[i]
        if node.is_summary or node.is_node_compressed:
            continue
        if sizes[i] > b.node_compress_token_threshold:
            node.compressed_input = summarizer([node.input.render()])
            node.is_node_compressed = True
            report.compressed_nodes.append(node.node_id)
            new_size = ctx.node_tokens(node)
            total += new_size - sizes[i]
            sizes[i] = new_size
            if total <= b.compress_token_threshold:
                break
    report.tokens_after = total
    if total <= b.compress_token_threshold:
        return report

    span = chain[b.keep_first_turns : len(chain) - b.keep_last_turns]
    summary = ConversationNode(
        ctx.new_id(),
        None,
        compressed_input=summarizer([n.read() for n in span]),
        is_summary=True,
        parent_id=chain[b.keep_first_turns - 1].node_id,
    )
    ctx.nodes[summary.node_id] = summary
    chain[len(chain) - b.keep_last_turns].parent_id = summary.node_id
    report.status = "level2"
    report.level2_applied = True
    report.summary_node = summary.node_id
    report.collapsed_nodes = [n.node_id for n in span]
    report.tokens_after = ctx.active_tokens()
    return report


def head_summarizer(max_chars: int = 400) -> Summarizer:
    """Deterministic stand-in summariser: the head of the concatenated span."""

    def summarize(texts: Sequence[str]) -> str:
        joined = "\n".join(texts)
        return f"[summary of {len(texts)} item(s)] " + joined[:max_chars]

    return summarize
