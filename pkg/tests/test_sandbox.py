from __future__ import annotations

import random
import time
from pathlib import Path

import pytest

from autoskill.errors import BackendUnavailable, PathEscape, SandboxClosed, SandboxError, SandboxFileNotFound
from autoskill.sandbox import (
    SandboxConfig,
    SandboxManager,
    close_sandbox,
    create_sandbox,
    sandbox_download,
    sandbox_run,
    sandbox_upload,
)


@pytest.fixture
def sbx():
    h = create_sandbox()
    yield h
    close_sandbox(h)


def test_layout_and_run(sbx):
    assert (sbx.root / "inputs").is_dir() and (sbx.root / "outputs").is_dir()
    r = sandbox_run(sbx, "pwd; echo err >&2; exit 3")
    assert r.exit_code == 3
    assert r.stdout.strip() == str(sbx.root)
    assert r.stderr.strip() == "err"
    assert not r.timed_out
    assert "exit_code: 3" in r.as_observation()


def test_sandbox_path_prefix_is_rewritten(sbx):
    r = sandbox_run(sbx, "echo hi > /sandbox/outputs/a.txt && cat /sandbox/outputs/a.txt && echo $SANDBOX_ROOT")
    assert r.stdout.splitlines() == ["hi", str(sbx.root)]
    assert sandbox_download(sbx, "/sandbox/outputs/a.txt") == b"hi\n"


def test_environment_is_scrubbed(sbx, monkeypatch):
    monkeypatch.setenv("SECRET_TOKEN", "leak")
    r = sandbox_run(sbx, "echo ${SECRET_TOKEN:-none}; echo $HOME")
    assert r.stdout.splitlines() == ["none", str(sbx.root)]


def test_upload_download_round_trip(sbx, tmp_path: Path):
    f = tmp_path / "data.bin"
    f.write_bytes(bytes(range(256)))
    assert sandbox_upload(sbx, f) == "inputs/data.bin"
    assert sandbox_upload(sbx, f, "work/copy.bin") == "work/copy.bin"
    assert sandbox_download(sbx, "work/copy.bin") == bytes(range(256))
    d = tmp_path / "dir"
    (d / "sub").mkdir(parents=True)
    (d / "sub" / "x.txt").write_text("x")
    sandbox_upload(sbx, d)
    assert sandbox_download(sbx, "inputs/dir/sub/x.txt") == b"x"
    with pytest.raises(SandboxFileNotFound):
        sandbox_upload(sbx, tmp_path / "missing")
    with pytest.raises(SandboxFileNotFound):
        sandbox_download(sbx, "outputs/none.txt")
    with pytest.raises(PathEscape):
        sandbox_upload(sbx, f, ".")


@pytest.mark.parametrize("path", ["../x", "inputs/../../x", "/etc/passwd", "/sandbox/../x", "a/b/../../../x"])
def test_path_escape_rejected(sbx, path: str):
    with pytest.raises(PathEscape):
        sbx.resolve(path)
    with pytest.raises(PathEscape):
        sandbox_download(sbx, path)


def test_symlink_escape_rejected(sbx, tmp_path: Path):
    outside = tmp_path / "outside.txt"
    outside.write_text("secret")
    (sbx.root / "link").symlink_to(outside)
    with pytest.raises(PathEscape):
        sandbox_download(sbx, "link")


def test_sandboxes_do_not_see_each_other():
    with SandboxManager() as mgr:
        a, b = mgr.create(), mgr.create()
        assert (a.sandbox_id, b.sandbox_id) == ("sbx-1", "sbx-2")
        sandbox_run(a, "echo private > outputs/mine.txt")
        assert sandbox_run(b, "ls outputs").stdout == ""
        with pytest.raises(SandboxFileNotFound):
            sandbox_download(b, "outputs/mine.txt")
        rel = "../" + a.root.name + "/outputs/mine.txt"
        with pytest.raises(PathEscape):
            sandbox_download(b, rel)
    assert not a.root.exists() and not b.root.exists()


def test_closed_sandbox_refuses_work():
    h = create_sandbox()
    close_sandbox(h)
    close_sandbox(h)  # idempotent
    assert not h.root.exists()
    with pytest.raises(SandboxClosed):
        sandbox_run(h, "true")
    with pytest.raises(SandboxClosed):
        sandbox_download(h, "x")


def test_manager_lookup_and_numbering():
    mgr = SandboxManager(first_id=7)
    try:
        h = mgr.create()
        assert h.sandbox_id == "sbx-7"
        assert mgr.get("sbx-7") is h
        with pytest.raises(SandboxError):
            mgr.get("sbx-1")
        mgr.close("sbx-7")
        with pytest.raises(SandboxClosed):
            mgr.get("sbx-7")
        assert mgr.open_handles() == []
    finally:
        mgr.close_all()


def test_backend_unavailable():
    with pytest.raises(BackendUnavailable):
        create_sandbox(SandboxConfig(shell="/no/such/shell"))
    with pytest.raises(BackendUnavailable):
        create_sandbox(SandboxConfig(base_dir="/no/such/dir"))


def test_timeout_kills_process_group(sbx):
    start = time.monotonic()
    r = sandbox_run(sbx, "sleep 30 & sleep 30; echo never", timeout=0.5)
    assert r.timed_out
    assert r.exit_code != 0
    assert "never" not in r.stdout
    assert time.monotonic() - start < 10


def test_randomized_relative_paths_stay_inside(sbx):
    rng = random.Random(7)
    parts = ["..", ".", "inputs", "outputs", "a", "b"]
    for _ in range(100):
        rel = "/".join(rng.choice(parts) for _ in range(rng.randint(1, 6)))
        depth, escapes = 0, False
        for p in rel.split("/"):
            depth += -1 if p == ".." else (0 if p == "." else 1)
            escapes = escapes or depth < 0
        if escapes:
            with pytest.raises(PathEscape):
                sbx.resolve(rel)
        else:
            target = sbx.resolve(rel)
            assert target == sbx.root.resolve() or sbx.root.resolve() in target.parents
