"""Sandbox lifecycle tools over a pluggable backend.

Only a local-process backend ships here. Its isolation is a private temp
directory per sandbox, a scrubbed environment and working-directory
confinement. That keeps side effects out of the host tree and away from
other sandboxes, but it is NOT kernel-level isolation: a hostile command can
still reach the host filesystem by absolute path. Use a container backend
for untrusted code.

Inside a sandbox the root is addressed as ``/sandbox``; commands see
``$SANDBOX_ROOT`` and have literal ``/sandbox`` path prefixes rewritten to
the real root.
"""

from __future__ import annotations

import itertools
import os
import re
import shutil
import signal
import subprocess
import sys
import tempfile
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path, PurePosixPath
from typing import Protocol

from .config import EXEC_CODE_TIMEOUT_SECONDS
from .errors import (
    BackendUnavailable,
    PathEscape,
    SandboxClosed,
    SandboxError,
    SandboxFileNotFound,
)

KILL_GRACE_SECONDS = 5.0
ENV_ALLOWLIST = ("PATH", "LANG", "LC_ALL", "LC_CTYPE", "TZ")
_SANDBOX_PREFIX_RE = re.compile(r"(?<![\w./-])/sandbox(?=/|\b|$)")


@dataclass(frozen=True)
class ExecResult:
    exit_code: int
    stdout: str
    stderr: str
    duration: float
    timed_out: bool = False

    def as_observation(self) -> str:
        parts = [f"exit_code: {self.exit_code}"]
        if self.timed_out:
            parts.append("timed_out: true")
        if self.stdout:
            parts.append("stdout:\n" + self.stdout.rstrip("\n"))
        if self.stderr:
            parts.append("stderr:\n" + self.stderr.rstrip("\n"))
        return "\n".join(parts)


@dataclass(frozen=True)
class SandboxConfig:
    shell: str = "/bin/sh"
    base_dir: str | None = None
    default_timeout: float = EXEC_CODE_TIMEOUT_SECONDS
    extra_env: dict[str, str] = field(default_factory=dict)


class SandboxBackend(Protocol):
    def create(self, sandbox_id: str, config: SandboxConfig) -> Path: ...

    def run(self, root: Path, command: str, timeout: float, config: SandboxConfig) -> ExecResult: ...

    def destroy(self, root: Path) -> None: ...


class LocalProcessBackend:
    """Runs commands as local subprocesses confined to a temp directory."""

    def create(self, sandbox_id: str, config: SandboxConfig) -> Path:
        if shutil.which(config.shell) is None:
            raise BackendUnavailable(f"shell {config.shell!r} not found")
        if config.base_dir is not None and not Path(config.base_dir).is_dir():
            raise BackendUnavailable(f"sandbox base dir {config.base_dir!r} is not a directory")
        try:
            root = Path(tempfile.mkdtemp(prefix=f"autoskill-{sandbox_id}-", dir=config.base_dir))
        except OSError as exc:
            raise BackendUnavailable(f"cannot create sandbox root: {exc}") from exc
        for sub in ("inputs", "outputs", ".tmp"):
            (root / sub).mkdir()
        return root

    def _env(self, root: Path, config: SandboxConfig) -> dict[str, str]:
        env = {k: os.environ[k] for k in ENV_ALLOWLIST if k in os.environ}
        py_dir = str(Path(sys.executable).parent)
        env["PATH"] = py_dir + os.pathsep + env.get("PATH", "/usr/bin:/bin")
        env.setdefault("LANG", "C.UTF-8")
        env.update(
            HOME=str(root),
            TMPDIR=str(root / ".tmp"),
            SANDBOX_ROOT=str(root),
            PYTHONDONTWRITEBYTECODE="1",
            PYTHONIOENCODING="utf-8",
        )
        env.update(config.extra_env)
        return env

    def run(self, root: Path, command: str, timeout: float, config: SandboxConfig) -> ExecResult:
        command = _SANDBOX_PREFIX_RE.sub(str(root).replace("\\", "\\\\"), command)
        start = time.monotonic()
        proc = subprocess.Popen(
            [config.shell, "-c", command],
            cwd=root,
            env=self._env(root, config),
            stdin=subprocess.DEVNULL,
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
            start_new_session=True,
        )
        timed_out = False
        try:
            out, err = proc.communicate(timeout=timeout)
        except subprocess.TimeoutExpired:
            timed_out = True
            try:
                os.killpg(proc.pid, signal.SIGKILL)
            except ProcessLookupError:
                pass
            try:
                out, err = proc.communicate(timeout=KILL_GRACE_SECONDS)
            except subprocess.TimeoutExpired:
                # grandchildren holding the pipes open; give up on their output
                proc.kill()
                out, err = b"", b""
        duration = time.monotonic() - start
        return ExecResult(
            exit_code=proc.returncode if proc.returncode is not None else -signal.SIGKILL,
            stdout=out.decode("utf-8", errors="replace"),
            stderr=err.decode("utf-8", errors="replace"),
            duration=duration,
            timed_out=timed_out,
        )

    def destroy(self, root: Path) -> None:
        shutil.rmtree(root, ignore_errors=True)


@dataclass
class SandboxHandle:
    sandbox_id: str
    root: Path
    backend: SandboxBackend = field(repr=False)
    config: SandboxConfig = field(repr=False)
    state: str = "open"
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @property
    def is_open(self) -> bool:
        return self.state == "open"

    def _check_open(self) -> None:
        if not self.is_open:
            raise SandboxClosed(f"sandbox {self.sandbox_id} is closed")

    def resolve(self, rel_path: str) -> Path:
        """Map a sandbox path to a host path, refusing anything outside the root."""
        self._check_open()
        p = str(rel_path).replace("\\", "/")
        if p == "/sandbox" or p.startswith("/sandbox/"):
            p = p[len("/sandbox"):].lstrip("/")
        pure = PurePosixPath(p)
        if pure.is_absolute():
            raise PathEscape(f"{rel_path!r} is outside the sandbox")
        root = self.root.resolve()
        target = root.joinpath(*pure.parts).resolve()
        if target != root and root not in target.parents:
            raise PathEscape(f"{rel_path!r} is outside the sandbox")
        return target


def _ids(start: int = 1):
    counter = itertools.count(start)
    return lambda: f"sbx-{next(counter)}"


def create_sandbox(
    config: SandboxConfig | None = None,
    backend: SandboxBackend | None = None,
    sandbox_id: str | None = None,
) -> SandboxHandle:
    config = config or SandboxConfig()
    backend = backend or LocalProcessBackend()
    sandbox_id = sandbox_id or f"sbx-{os.urandom(6).hex()}"
    root = backend.create(sandbox_id, config)
    return SandboxHandle(sandbox_id, root, backend, config)


def sandbox_run(h: SandboxHandle, command: str, timeout: float | None = None) -> ExecResult:
    h._check_open()
    with h._lock:
        return h.backend.run(h.root, command, timeout or h.config.default_timeout, h.config)


def sandbox_upload(h: SandboxHandle, host_file: str | os.PathLike, dest_rel_path: str | None = None) -> str:
    """Copy a host file (or directory) into the sandbox; defaults to ``inputs/<name>``.

    Returns the sandbox-relative destination.
    """
    host_file = Path(host_file)
    if not host_file.exists():
        raise SandboxFileNotFound(f"host file {host_file} does not exist")
    rel = dest_rel_path if dest_rel_path is not None else f"inputs/{host_file.name}"
    target = h.resolve(rel)
    if target == h.root.resolve():
        raise PathEscape("upload destination must name a path inside the sandbox")
    target.parent.mkdir(parents=True, exist_ok=True)
    if host_file.is_dir():
        shutil.copytree(host_file, target, dirs_exist_ok=True)
    else:
        shutil.copyfile(host_file, target)
    return target.relative_to(h.root.resolve()).as_posix()


def sandbox_download(h: SandboxHandle, src_rel_path: str) -> bytes:
    target = h.resolve(src_rel_path)
    if not target.is_file():
        raise SandboxFileNotFound(f"{src_rel_path!r} not found in sandbox {h.sandbox_id}")
    return target.read_bytes()


def close_sandbox(h: SandboxHandle) -> None:
    if h.state == "closed":
        return
    h.state = "closed"
    h.backend.destroy(h.root)


class SandboxManager:
    """Tracks the sandboxes of one session so teardown can close them all.

    Ids are sequential (``sbx-1``, ``sbx-2``...) so scripted runs are
    reproducible; ``first_id`` lets a resumed session continue the numbering.
    """

    def __init__(
        self,
        config: SandboxConfig | None = None,
        backend: SandboxBackend | None = None,
        first_id: int = 1,
    ):
        self.config = config or SandboxConfig()
        self.backend = backend or LocalProcessBackend()
        self._handles: dict[str, SandboxHandle] = {}
        self._next_id = _ids(first_id)

    def create(self) -> SandboxHandle:
        h = create_sandbox(self.config, self.backend, self._next_id())
        self._handles[h.sandbox_id] = h
        return h

    def get(self, sandbox_id: str) -> SandboxHandle:
        try:
            h = self._handles[sandbox_id]
        except KeyError:
            raise SandboxError(f"no sandbox with id {sandbox_id!r}") from None
        h._check_open()
        return h

    def open_handles(self) -> list[SandboxHandle]:
        return [h for h in self._handles.values() if h.is_open]

    def close(self, sandbox_id: str) -> None:
        h = self._handles.get(sandbox_id)
        if h is None:
            raise SandboxError(f"no sandbox with id {sandbox_id!r}")
        close_sandbox(h)

    def close_all(self) -> None:
        for h in self._handles.values():
            close_sandbox(h)

    def __enter__(self) -> SandboxManager:
        return self

    def __exit__(self, *exc) -> None:
        self.close_all()
