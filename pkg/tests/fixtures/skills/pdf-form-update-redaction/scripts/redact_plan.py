import json
import re
import sys

PATTERNS = {"ssn": r"\b\d{3}-\d{2}-\d{4}\b", "email": r"[\w.+-]+@[\w-]+\.[\w.]+"}


def plan(text):
    spans = []
    for kind, pat in PATTERNS.items():
        for m in re.finditer(pat, text):
            spans.append({"kind": kind, "start": m.start(), "end": m.end()})
    return sorted(spans, key=lambda s: s["start"])


if __name__ == "__main__":
    print(json.dumps(plan(sys.stdin.read())))
