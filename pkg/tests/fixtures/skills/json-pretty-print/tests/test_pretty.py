import subprocess
import sys


def test_sorted_and_indented():
    out = subprocess.run(
        [sys.executable, "scripts/pretty.py"], input='{"b":1,"a":2}', capture_output=True, text=True, check=True
    ).stdout
    assert out == '{\n  "a": 2,\n  "b": 1\n}\n'
