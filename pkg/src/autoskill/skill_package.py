"""Skill package format: SKILL.md frontmatter parsing, validation, writing and export.

A skill is a directory named after the skill, holding ``SKILL.md`` plus the
optional ``scripts/``, ``tests/``, ``resources/`` and ``references/``
subdirectories. A sibling ``.memory.md`` holds per-agent experience and is
never written by package operations nor shipped in archives.

The frontmatter grammar is a deliberately small YAML subset: one
``key: value`` per line, scalar strings only. Plain values may continue on
indented lines (folded with single spaces, as YAML does), values may be
double- or single-quoted, and ``|`` / ``>`` block scalars are accepted.
"""

from __future__ import annotations

import json
import os
import re
import shutil
import tarfile
import tempfile
from dataclasses import dataclass, field
from pathlib import Path, PurePosixPath

from ._fsutil import current_umask
from .errors import (
    DestinationExists,
    FrontmatterSyntaxError,
    IoFailure,
    MalformedName,
    MissingFrontmatter,
    MissingRequiredKey,
    NameMismatch,
    SkillFormatError,
)

SKILL_FILE = "SKILL.md"
MEMORY_FILE = ".memory.md"
KNOWN_SUBDIRS = ("scripts", "tests", "resources", "references")
REQUIRED_KEYS = ("name", "description")
DESCRIPTION_WARN_CHARS = 2_000

NAME_RE = re.compile(r"[a-z0-9]+(?:-[a-z0-9]+)*")
_KEY_LINE_RE = re.compile(r"^([A-Za-z_][A-Za-z0-9_.-]*)[ \t]*:(?:[ \t]+(.*?))?[ \t]*$")
_BLOCK_INDICATOR_RE = re.compile(r"^[|>][+-]?$")
_IGNORED_DIRS = {"__pycache__", ".pytest_cache"}


class MissingSkillMd(SkillFormatError):
    code = "MissingSkillMd"


@dataclass(frozen=True)
class SkillFrontmatter:
    name: str
    description: str
    extra: dict[str, str] = field(default_factory=dict)
    # how each key was written in the source: plain, double, single, literal, folded
    styles: dict[str, str] = field(default_factory=dict, compare=False, repr=False)
    # exact frontmatter text (both delimiters included) when parsed from a file
    source: str | None = field(default=None, compare=False, repr=False)

    @property
    def warnings(self) -> list[str]:
        out = [f"unknown frontmatter key {key!r}" for key in self.extra]
        if len(self.description) > DESCRIPTION_WARN_CHARS:
            out.append(
                f"description is {len(self.description)} chars (> {DESCRIPTION_WARN_CHARS})"
            )
        return out

    def values(self) -> dict[str, str]:
        return {"name": self.name, "description": self.description, **self.extra}


@dataclass(frozen=True)
class CatalogEntry:
    name: str
    description: str

    def to_dict(self) -> dict[str, str]:
        return {"name": self.name, "description": self.description}


@dataclass(frozen=True)
class SkillMemoryRef:
    path: Path
    exists: bool


def _split_header(text: str) -> tuple[str, list[str], str]:
    """Return (header text incl. delimiters, inner lines, body)."""
    # LF only: str.splitlines would also break on U+2028, \x85 and friends
    lines = [ln for ln in re.split(r"(?<=\n)", text) if ln]
    if not lines or lines[0].rstrip("\r\n") != "---":
        raise MissingFrontmatter("SKILL.md must start with a '---' line")
    for i in range(1, len(lines)):
        if lines[i].rstrip("\r\n") == "---":
            header = "".join(lines[: i + 1])
            inner = [ln.rstrip("\r\n") for ln in lines[1:i]]
            return header, inner, text[len(header):]
    raise MissingFrontmatter("frontmatter has no closing '---' line")


def _decode_scalar(raw: str, lineno: int) -> tuple[str, str]:
    if raw.startswith('"'):
        try:
            value = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise FrontmatterSyntaxError(f"line {lineno}: bad double-quoted value") from exc
        if not isinstance(value, str):
            raise FrontmatterSyntaxError(f"line {lineno}: bad double-quoted value")
        return value, "double"
    if raw.startswith("'"):
        if len(raw) < 2 or not raw.endswith("'"):
            raise FrontmatterSyntaxError(f"line {lineno}: unterminated single-quoted value")
        return raw[1:-1].replace("''", "'"), "single"
    return raw, "plain"


def _parse_inner(inner: list[str]) -> tuple[dict[str, str], dict[str, str]]:
    entries: list[list] = []  # [key, first raw value, continuation lines, lineno]
    for lineno, line in enumerate(inner, start=2):
        if not line.strip() or line.startswith("#"):
            continue
        if line[:1] in (" ", "\t"):
            if not entries:
                raise FrontmatterSyntaxError(f"line {lineno}: indented line before any key")
            entries[-1][2].append(line)
            continue
        m = _KEY_LINE_RE.match(line)
        if not m:
            raise FrontmatterSyntaxError(f"line {lineno}: expected 'key: value', got {line!r}")
        entries.append([m.group(1), m.group(2) or "", [], lineno])

    values: dict[str, str] = {}
    styles: dict[str, str] = {}
    for key, first, cont, lineno in entries:
        if key in values:
            raise FrontmatterSyntaxError(f"line {lineno}: duplicate key {key!r}")
        if _BLOCK_INDICATOR_RE.match(first):
            pieces = [c.strip() for c in cont]
            if first.startswith("|"):
                value, style = "\n".join(pieces), "literal"
            else:
                value, style = " ".join(p for p in pieces if p), "folded"
        elif first[:1] in ("'", '"'):
            if any(c.strip() for c in cont):
                raise FrontmatterSyntaxError(f"line {lineno}: quoted values must fit on one line")
            value, style = _decode_scalar(first, lineno)
        else:
            pieces = [first] + [c.strip() for c in cont]
            value, style = " ".join(p for p in pieces if p), "plain"
        values[key] = value
        styles[key] = style
    return values, styles


def parse_frontmatter(text: str) -> tuple[dict[str, str], str, str]:
    """Syntax-level split: (ordered key/value map, header text, body). No name checks."""
    header, inner, body = _split_header(text)
    values, _ = _parse_inner(inner)
    return values, header, body


def parse_skill_md(text: str, dir_name: str) -> tuple[SkillFrontmatter, str]:
    """Parse SKILL.md text for the skill directory ``dir_name``.

    Returns the frontmatter and the body, which is every byte after the
    closing delimiter line. Unknown keys are kept in order in ``extra`` and
    reported through ``SkillFrontmatter.warnings``.
    """
    header, inner, body = _split_header(text)
    values, styles = _parse_inner(inner)
    for key in REQUIRED_KEYS:
        if key not in values:
            raise MissingRequiredKey(f"frontmatter is missing required key {key!r}")
    name = values["name"]
    description = values["description"]
    if not description.strip():
        raise MissingRequiredKey("frontmatter 'description' is empty")
    if not NAME_RE.fullmatch(name):
        raise MalformedName(f"skill name {name!r} is not kebab-case")
    if name != dir_name:
        raise NameMismatch(f"frontmatter name {name!r} does not match directory {dir_name!r}")
    extra = {k: v for k, v in values.items() if k not in REQUIRED_KEYS}
    fm = SkillFrontmatter(name, description, extra, styles=styles, source=header)
    return fm, body


def _render_scalar(value: str) -> str:
    plain_ok = (
        value
        and value == value.strip()
        and "\n" not in value
        and "\r" not in value
        and ": " not in value
        and " #" not in value
        and not value.endswith(":")
        and value[0] not in "\"'[]{}&*!|>%@`#,?-"
    )
    return value if plain_ok else json.dumps(value, ensure_ascii=False)


def render_frontmatter(fm: SkillFrontmatter) -> str:
    if fm.source is not None:
        try:
            values, _ = _parse_inner(_split_header(fm.source)[1])
        except SkillFormatError:
            values = None
        if values == fm.values():
            return fm.source
    lines = ["---"]
    lines += [f"{k}: {_render_scalar(v)}" for k, v in fm.values().items()]
    lines.append("---")
    return "\n".join(lines) + "\n"


def render_skill_md(fm: SkillFrontmatter, body: str) -> str:
    """Inverse of parse_skill_md; byte-identical for unmodified parse results."""
    return render_frontmatter(fm) + body


@dataclass
class SkillPackage:
    frontmatter: SkillFrontmatter
    body: str
    # relative posix path -> content, for everything except SKILL.md and .memory.md
    files: dict[str, bytes] = field(default_factory=dict)
    empty_dirs: tuple[str, ...] = ()
    root: Path | None = field(default=None, compare=False)

    @property
    def name(self) -> str:
        return self.frontmatter.name

    @property
    def description(self) -> str:
        return self.frontmatter.description

    @property
    def skill_md(self) -> str:
        return render_skill_md(self.frontmatter, self.body)

    @property
    def subdirs(self) -> dict[str, list[str]]:
        """Known subdirectories that are present, with their file listings."""
        out: dict[str, list[str]] = {}
        for sub in KNOWN_SUBDIRS:
            listed = sorted(p for p in self.files if p.startswith(sub + "/"))
            if listed or any(d == sub or d.startswith(sub + "/") for d in self.empty_dirs):
                out[sub] = listed
        return out

    def test_files(self) -> list[str]:
        return sorted(p for p in self.files if p.startswith("tests/") and _is_test_program(p))

    @property
    def memory_path(self) -> Path | None:
        return None if self.root is None else self.root / MEMORY_FILE


def _is_test_program(rel: str) -> bool:
    name = PurePosixPath(rel).name
    stem, suffix = os.path.splitext(name)
    if suffix not in (".py", ".sh"):
        return False
    return stem.startswith("test_") or stem.endswith("_test")


def _walk_files(root: Path) -> tuple[dict[str, bytes], tuple[str, ...]]:
    files: dict[str, bytes] = {}
    empty: list[str] = []
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames[:] = sorted(d for d in dirnames if d not in _IGNORED_DIRS)
        rel_dir = Path(dirpath).relative_to(root)
        kept = [
            f for f in sorted(filenames)
            if not (rel_dir == Path(".") and f in (SKILL_FILE, MEMORY_FILE))
        ]
        for fname in kept:
            files[(rel_dir / fname).as_posix()] = (Path(dirpath) / fname).read_bytes()
        if rel_dir != Path(".") and not kept and not dirnames:
            empty.append(rel_dir.as_posix())
    return files, tuple(sorted(empty))


def load_package(root: str | os.PathLike) -> SkillPackage:
    """Read a skill directory into memory. Raises SkillFormatError subclasses."""
    root = Path(root)
    skill_md = root / SKILL_FILE
    if not skill_md.is_file():
        raise MissingSkillMd(f"{root} has no {SKILL_FILE}")
    try:
        text = skill_md.read_bytes().decode("utf-8")
    except UnicodeDecodeError as exc:
        raise SkillFormatError(f"{skill_md} is not valid UTF-8") from exc
    fm, body = parse_skill_md(text, root.name)
    files, empty = _walk_files(root)
    return SkillPackage(fm, body, files, empty, root=root)


def package_from_text(skill_md: str, dir_name: str, files: dict[str, bytes | str] | None = None) -> SkillPackage:
    fm, body = parse_skill_md(skill_md, dir_name)
    encoded = {
        k: v.encode("utf-8") if isinstance(v, str) else v for k, v in (files or {}).items()
    }
    return SkillPackage(fm, body, encoded)


@dataclass
class Finding:
    code: str
    message: str

    def to_dict(self) -> dict[str, str]:
        return {"code": self.code, "message": self.message}


@dataclass
class ValidationReport:
    root: Path
    errors: list[Finding] = field(default_factory=list)
    warnings: list[Finding] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors

    def to_dict(self) -> dict:
        return {
            "root": str(self.root),
            "ok": self.ok,
            "errors": [f.to_dict() for f in self.errors],
            "warnings": [f.to_dict() for f in self.warnings],
        }


def validate_package(root: str | os.PathLike) -> ValidationReport:
    """Check a skill directory against the package rules; never raises."""
    root = Path(root)
    report = ValidationReport(root)
    if not root.is_dir():
        report.errors.append(Finding("NotADirectory", f"{root} is not a directory"))
        return report
    skill_md = root / SKILL_FILE
    if not skill_md.is_file():
        report.errors.append(Finding("MissingSkillMd", f"{SKILL_FILE} not found in {root}"))
    else:
        try:
            text = skill_md.read_bytes().decode("utf-8")
            fm, _ = parse_skill_md(text, root.name)
        except UnicodeDecodeError:
            report.errors.append(Finding("EncodingError", f"{SKILL_FILE} is not valid UTF-8"))
        except SkillFormatError as exc:
            report.errors.append(Finding(exc.code, str(exc)))
        else:
            for key in fm.extra:
                report.warnings.append(
                    Finding("UnknownFrontmatterKey", f"unknown frontmatter key {key!r}")
                )
            if len(fm.description) > DESCRIPTION_WARN_CHARS:
                report.warnings.append(
                    Finding(
                        "LongDescription",
                        f"description is {len(fm.description)} chars (> {DESCRIPTION_WARN_CHARS})",
                    )
                )

    for entry in sorted(root.iterdir(), key=lambda p: p.name):
        if entry.name in (SKILL_FILE, MEMORY_FILE) or entry.name in _IGNORED_DIRS:
            continue
        if entry.name in KNOWN_SUBDIRS:
            if not entry.is_dir():
                report.warnings.append(
                    Finding("NotADirectory", f"{entry.name} should be a directory")
                )
            elif not any(p.is_file() for p in entry.rglob("*")):
                report.warnings.append(
                    Finding("EmptySubdirectory", f"{entry.name}/ present but empty")
                )
            continue
        report.warnings.append(Finding("UnknownEntry", f"unexpected top-level entry {entry.name!r}"))
    return report


def write_skill_package(pkg: SkillPackage, dest: str | os.PathLike) -> Path:
    """Write ``pkg`` as ``dest/<name>/``. Never writes ``.memory.md``."""
    dest = Path(dest)
    target = dest / pkg.name
    if target.exists():
        raise DestinationExists(f"{target} already exists")
    try:
        dest.mkdir(parents=True, exist_ok=True)
        tmp = Path(tempfile.mkdtemp(prefix=f".tmp-{pkg.name}-", dir=dest))
        try:
            tmp.chmod(0o777 & ~current_umask())
            (tmp / SKILL_FILE).write_bytes(pkg.skill_md.encode("utf-8"))
            for rel, data in pkg.files.items():
                path = _contained(tmp, rel)
                if path.name == MEMORY_FILE and path.parent == tmp:
                    continue
                path.parent.mkdir(parents=True, exist_ok=True)
                path.write_bytes(data)
            for rel in pkg.empty_dirs:
                _contained(tmp, rel).mkdir(parents=True, exist_ok=True)
            try:
                os.rename(tmp, target)
            except OSError as exc:
                if target.exists():
                    raise DestinationExists(f"{target} already exists") from exc
                raise
        except BaseException:
            shutil.rmtree(tmp, ignore_errors=True)
            raise
    except DestinationExists:
        raise
    except OSError as exc:
        raise IoFailure(f"writing {target}: {exc}") from exc
    return target


def _contained(root: Path, rel: str) -> Path:
    pure = PurePosixPath(rel)
    if pure.is_absolute() or ".." in pure.parts or not pure.parts:
        raise IoFailure(f"package path {rel!r} escapes the package root")
    return root.joinpath(*pure.parts)


def export_archive(root: str | os.PathLike, archive: str | os.PathLike) -> list[str]:
    """Pack a skill directory into a .tar.gz, leaving out every ``.memory.md``.

    Returns the archive member names.
    """
    root = Path(root)

    def _filter(info: tarfile.TarInfo) -> tarfile.TarInfo | None:
        parts = PurePosixPath(info.name).parts
        if parts[-1] == MEMORY_FILE or any(p in _IGNORED_DIRS for p in parts):
            return None
        return info

    with tarfile.open(archive, "w:gz") as tar:
        tar.add(root, arcname=root.name, filter=_filter)
    with tarfile.open(archive, "r:gz") as tar:
        return tar.getnames()


def catalog_entry(pkg: SkillPackage) -> CatalogEntry:
    return CatalogEntry(pkg.name, pkg.description)


def memory_ref(skill_root: str | os.PathLike) -> SkillMemoryRef:
    path = Path(skill_root) / MEMORY_FILE
    return SkillMemoryRef(path, path.is_file())
