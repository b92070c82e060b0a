from __future__ import annotations

import os
import tarfile
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from autoskill.errors import (
    DestinationExists,
    FrontmatterSyntaxError,
    MalformedName,
    MissingFrontmatter,
    MissingRequiredKey,
    NameMismatch,
)
from autoskill.skill_package import (
    MEMORY_FILE,
    SkillFrontmatter,
    catalog_entry,
    export_archive,
    load_package,
    memory_ref,
    package_from_text,
    parse_frontmatter,
    parse_skill_md,
    render_skill_md,
    validate_package,
    write_skill_package,
)
from conftest import SKILL_FIXTURES, skill_fixture_dirs

# The minimum viable skill file, placeholders and all.
SCHEMA_BLOCK = """---
name:        <kebab-case skill identifier; must match the directory name>
description: <one-paragraph natural-language description; this is what the
              agent reads when deciding whether to invoke the skill>
---

# <Skill title in Title Case>

## When to use
- Bullet list of triggering task types.

## Core principles
1. Numbered list of invariants the implementation must preserve.

## Recommended tools and libraries
- Concrete library names, CLI commands, or sandbox tools.

## Workflow
Step-by-step procedure the agent should follow at runtime.
"""


def tree_bytes(root: Path) -> dict[str, bytes]:
    return {
        p.relative_to(root).as_posix(): p.read_bytes()
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }


def test_fixture_corpus_is_large_enough():
    assert len(skill_fixture_dirs()) >= 20


@pytest.mark.parametrize("src", skill_fixture_dirs(), ids=lambda p: p.name)
def test_fixture_round_trip_is_byte_identical(src: Path, tmp_path: Path):
    pkg = load_package(src)
    out = write_skill_package(pkg, tmp_path)
    assert out == tmp_path / src.name
    assert tree_bytes(out) == tree_bytes(src)
    text = (src / "SKILL.md").read_text(encoding="utf-8")
    fm, body = parse_skill_md(text, src.name)
    assert render_skill_md(fm, body) == text


@pytest.mark.parametrize("src", skill_fixture_dirs(), ids=lambda p: p.name)
def test_fixtures_validate(src: Path):
    report = validate_package(src)
    assert report.ok, report.to_dict()


def test_schema_template_fixture_keeps_layout():
    text = (SKILL_FIXTURES / "schema-template" / "SKILL.md").read_text(encoding="utf-8")
    # identical to the schema block apart from the concrete name
    assert text.split("\n")[2:] == SCHEMA_BLOCK.split("\n")[2:]
    fm, body = parse_skill_md(text, "schema-template")
    assert fm.description.startswith("<one-paragraph natural-language description;")
    assert fm.description.endswith("invoke the skill>")
    assert body.startswith("\n# <Skill title in Title Case>")


def test_schema_block_verbatim_placeholder_name_is_malformed():
    values, _, _ = parse_frontmatter(SCHEMA_BLOCK)
    assert values["name"].startswith("<kebab-case")
    with pytest.raises(MalformedName):
        parse_skill_md(SCHEMA_BLOCK, "whatever")


def test_folded_and_literal_descriptions():
    fm, _ = parse_skill_md(
        (SKILL_FIXTURES / "folded-description" / "SKILL.md").read_text(), "folded-description"
    )
    assert "\n" not in fm.description
    fm, _ = parse_skill_md((SKILL_FIXTURES / "block-literal" / "SKILL.md").read_text(), "block-literal")
    assert "\n" in fm.description


def test_extra_keys_are_kept_in_order_with_a_warning():
    fm, _ = parse_skill_md((SKILL_FIXTURES / "versioned-skill" / "SKILL.md").read_text(), "versioned-skill")
    assert fm.extra == {"version": "2"}
    assert fm.warnings == ["unknown frontmatter key 'version'"]
    report = validate_package(SKILL_FIXTURES / "versioned-skill")
    assert report.ok
    assert [w.code for w in report.warnings] == ["UnknownFrontmatterKey"]


@pytest.mark.parametrize(
    "text, exc",
    [
        ("no frontmatter\n", MissingFrontmatter),
        ("---\nname: a\ndescription: b\n", MissingFrontmatter),
        ("---\nname: a\n---\n", MissingRequiredKey),
        ("---\ndescription: b\n---\n", MissingRequiredKey),
        ("---\nname: a\ndescription: \"  \"\n---\n", MissingRequiredKey),
        ("---\nname: Bad_Name\ndescription: b\n---\n", MalformedName),
        ("---\nname: a--b\ndescription: b\n---\n", MalformedName),
        ("---\nname: other\ndescription: b\n---\n", NameMismatch),
        ("---\nname: a\nname: a\ndescription: b\n---\n", FrontmatterSyntaxError),
        ("---\nname: a\ndescription: \"unterminated\n---\n", FrontmatterSyntaxError),
        ("---\n  indented: x\nname: a\ndescription: b\n---\n", FrontmatterSyntaxError),
        ("---\nname: a\njust text\n---\n", FrontmatterSyntaxError),
    ],
)
def test_parse_errors(text: str, exc: type):
    with pytest.raises(exc):
        parse_skill_md(text, "a")


def test_body_is_every_byte_after_the_closing_delimiter():
    text = "---\nname: a\ndescription: b\n---\n\n---\nnot frontmatter\n\n\n"
    _, body = parse_skill_md(text, "a")
    assert body == "\n---\nnot frontmatter\n\n\n"


def test_crlf_frontmatter_round_trips():
    text = "---\r\nname: a\r\ndescription: b c\r\n---\r\nbody\r\n"
    fm, body = parse_skill_md(text, "a")
    assert (fm.name, fm.description) == ("a", "b c")
    assert render_skill_md(fm, body) == text


names = st.from_regex(r"[a-z0-9]{1,8}(-[a-z0-9]{1,8}){0,3}", fullmatch=True)
descriptions = st.text(
    st.characters(blacklist_categories=("Cs",)), min_size=1, max_size=200
).filter(lambda s: s.strip())


@settings(max_examples=300, deadline=None)
@given(names, descriptions, st.text(max_size=300))
def test_rendered_frontmatter_parses_back(name: str, description: str, body: str):
    fm = SkillFrontmatter(name, description)
    text = render_skill_md(fm, body)
    fm2, body2 = parse_skill_md(text, name)
    assert (fm2.name, fm2.description, fm2.extra) == (name, description, {})
    assert body2 == body
    # and a second render of the parsed result is byte-identical
    assert render_skill_md(fm2, body2) == text


def test_validate_reports_structure_problems(tmp_path: Path):
    root = tmp_path / "demo"
    root.mkdir()
    (root / "SKILL.md").write_text("---\nname: demo\ndescription: d\n---\n")
    (root / "tests").mkdir()
    (root / "notes.txt").write_text("x")
    (root / "scripts").write_text("not a dir")
    report = validate_package(root)
    assert report.ok
    codes = sorted(w.code for w in report.warnings)
    assert codes == ["EmptySubdirectory", "NotADirectory", "UnknownEntry"]


def test_validate_errors(tmp_path: Path):
    assert [e.code for e in validate_package(tmp_path / "missing").errors] == ["NotADirectory"]
    root = tmp_path / "empty"
    root.mkdir()
    assert [e.code for e in validate_package(root).errors] == ["MissingSkillMd"]
    (root / "SKILL.md").write_bytes(b"---\nname: empty\ndescription: \xff\n---\n")
    assert [e.code for e in validate_package(root).errors] == ["EncodingError"]
    (root / "SKILL.md").write_text("---\nname: other\ndescription: d\n---\n")
    assert [e.code for e in validate_package(root).errors] == ["NameMismatch"]


def test_long_description_warns(tmp_path: Path):
    root = tmp_path / "long"
    root.mkdir()
    (root / "SKILL.md").write_text(f"---\nname: long\ndescription: {'w' * 2001}\n---\n")
    report = validate_package(root)
    assert report.ok
    assert [w.code for w in report.warnings] == ["LongDescription"]


def test_empty_subdirectory_survives_round_trip(tmp_path: Path):
    src = tmp_path / "src" / "hollow"
    (src / "tests").mkdir(parents=True)
    (src / "SKILL.md").write_text("---\nname: hollow\ndescription: d\n---\n")
    pkg = load_package(src)
    assert pkg.empty_dirs == ("tests",)
    assert pkg.subdirs == {"tests": []}
    out = write_skill_package(pkg, tmp_path / "out")
    assert (out / "tests").is_dir()


def test_write_refuses_existing_destination(tmp_path: Path):
    pkg = load_package(SKILL_FIXTURES / "csv-summarize")
    write_skill_package(pkg, tmp_path)
    with pytest.raises(DestinationExists):
        write_skill_package(pkg, tmp_path)


def test_written_package_honours_umask(tmp_path: Path):
    old = os.umask(0o022)
    try:
        out = write_skill_package(load_package(SKILL_FIXTURES / "csv-summarize"), tmp_path)
    finally:
        os.umask(old)
    assert out.stat().st_mode & 0o777 == 0o755


def test_memory_file_is_lazy_excluded_and_never_written(tmp_path: Path):
    src = tmp_path / "src" / "remember"
    src.mkdir(parents=True)
    (src / "SKILL.md").write_text("---\nname: remember\ndescription: d\n---\n")
    ref = memory_ref(src)
    assert not ref.exists and ref.path == src / MEMORY_FILE
    (src / MEMORY_FILE).write_text("## 2026-01-01 00:00:00 UTC\nlesson\n\n")
    (src / "scripts").mkdir()
    (src / "scripts" / "run.sh").write_text("echo hi\n")
    (src / "scripts" / MEMORY_FILE).write_text("nested\n")
    pkg = load_package(src)
    assert MEMORY_FILE not in pkg.files
    out = write_skill_package(pkg, tmp_path / "out")
    assert not (out / MEMORY_FILE).exists()

    names = export_archive(src, tmp_path / "remember.tar.gz")
    assert not any(n.endswith(MEMORY_FILE) for n in names)
    assert "remember/SKILL.md" in names and "remember/scripts/run.sh" in names
    with tarfile.open(tmp_path / "remember.tar.gz") as tar:
        assert sorted(tar.getnames()) == sorted(names)


def test_test_file_discovery():
    pkg = load_package(SKILL_FIXTURES / "fizzbuzz-buggy")
    assert pkg.test_files() == ["tests/test_count.sh", "tests/test_fizzbuzz.py"]
    helpers = load_package(SKILL_FIXTURES / "nested-helpers")
    assert all(Path(t).name.startswith("test_") or Path(t).stem.endswith("_test") for t in helpers.test_files())


def test_catalog_entry_and_package_from_text():
    pkg = package_from_text(
        "---\nname: inline\ndescription: Built in memory.\n---\nBody\n",
        "inline",
        {"scripts/a.py": "print(1)\n"},
    )
    assert catalog_entry(pkg).to_dict() == {"name": "inline", "description": "Built in memory."}
    assert pkg.files == {"scripts/a.py": b"print(1)\n"}
    assert pkg.subdirs == {"scripts": ["scripts/a.py"]}
