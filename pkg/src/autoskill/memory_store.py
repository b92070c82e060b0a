"""Append-only Markdown memory shared by the long-term, session and per-skill tiers.

Block grammar::

    ## 2026-05-07 10:34:33 UTC
    <content lines>
    <blank line>

Writers append whole blocks under an advisory lock; existing bytes are never
rewritten. Readers split on header lines and hand content back verbatim.
"""

from __future__ import annotations

import fcntl
import os
import re
import time
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

from ._fsutil import TimeSource, utc_now
from .errors import EmptyContent, InvalidContent, IoFailure

HEADER_FORMAT = "## %Y-%m-%d %H:%M:%S UTC"
HEADER_RE = re.compile(r"^## (\d{4}-\d{2}-\d{2}) (\d{2}:\d{2}:\d{2}) UTC$")


@dataclass(frozen=True)
class MemoryBlock:
    timestamp: datetime | None
    content: str
    # True for text found before the first header (hand edits)
    pre_header: bool = False

    def render(self) -> str:
        return format_header(self.timestamp) + "\n" + self.content + "\n\n"


def format_header(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).strftime(HEADER_FORMAT)


def _parse_header(line: str) -> datetime | None:
    m = HEADER_RE.match(line)
    if not m:
        return None
    return datetime.strptime(f"{m.group(1)} {m.group(2)}", "%Y-%m-%d %H:%M:%S").replace(
        tzinfo=timezone.utc
    )


def _lines(text: str) -> list[str]:
    """Split on LF only, keeping terminators (str.splitlines also splits on \\x0c etc.)."""
    return re.findall(r"[^\n]*\n|[^\n]+$", text)


def normalize_content(content: str) -> str:
    """The exact content a block stores: trailing line breaks dropped, nothing else."""
    if not content.strip():
        raise EmptyContent("memory content is empty")
    body = content.rstrip("\r\n")
    for line in body.split("\n"):
        if HEADER_RE.match(line.rstrip("\r")):
            raise InvalidContent(f"content line looks like a block header: {line!r}")
    return body


def append_block(file: str | os.PathLike, content: str, clock: TimeSource = utc_now) -> MemoryBlock:
    """Append one timestamped block, creating the file on first write.

    Timestamps never go backwards within a file: a clock reading older than
    the last block is clamped to that block's time.
    """
    file = Path(file)
    body = normalize_content(content)
    ts = clock().astimezone(timezone.utc).replace(microsecond=0)
    try:
        file.parent.mkdir(parents=True, exist_ok=True)
        with open(file, "ab") as fh:
            fcntl.flock(fh.fileno(), fcntl.LOCK_EX)
            try:
                last = _last_timestamp(file)
                if last is not None and ts < last:
                    ts = last
                block = MemoryBlock(ts, body)
                # one write call per block so readers never see half a block
                fh.write(block.render().encode("utf-8"))
                fh.flush()
                os.fsync(fh.fileno())
            finally:
                fcntl.flock(fh.fileno(), fcntl.LOCK_UN)
    except OSError as exc:
        raise IoFailure(f"appending to {file}: {exc}") from exc
    return block


def _last_timestamp(file: Path) -> datetime | None:
    if not file.is_file():
        return None
    last = None
    for line in _lines(file.read_bytes().decode("utf-8")):
        ts = _parse_header(line.rstrip("\r\n"))
        if ts is not None:
            last = ts
    return last


def parse_blocks(text: str) -> list[MemoryBlock]:
    blocks: list[MemoryBlock] = []
    current_ts: datetime | None = None
    current: list[str] = []
    seen_header = False

    def flush():
        body = "".join(current)
        if seen_header:
            if body.endswith("\n\n"):
                body = body[:-2]
            elif body.endswith("\n"):
                body = body[:-1]
            blocks.append(MemoryBlock(current_ts, body))
        elif body.strip():
            blocks.append(MemoryBlock(None, body, pre_header=True))

    for line in _lines(text):
        ts = _parse_header(line.rstrip("\r\n"))
        if ts is None:
            current.append(line)
            continue
        flush()
        seen_header = True
        current_ts, current = ts, []
    flush()
    return blocks


def read_blocks(file: str | os.PathLike) -> list[MemoryBlock]:
    """Blocks in file order; an absent file reads as empty."""
    file = Path(file)
    if not file.exists():
        return []
    try:
        with open(file, "rb") as fh:
            try:
                fcntl.flock(fh.fileno(), fcntl.LOCK_SH | fcntl.LOCK_NB)
            except BlockingIOError:
                time.sleep(0.05)
                fcntl.flock(fh.fileno(), fcntl.LOCK_SH)
            try:
                text = fh.read().decode("utf-8")
            finally:
                fcntl.flock(fh.fileno(), fcntl.LOCK_UN)
    except OSError as exc:
        raise IoFailure(f"reading {file}: {exc}") from exc
    return parse_blocks(text)


def read_text(file: str | os.PathLike) -> str:
    file = Path(file)
    return file.read_text(encoding="utf-8") if file.is_file() else ""
