import subprocess
import sys


def test_iso():
    out = subprocess.run(
        [sys.executable, "scripts/iso.py"], input="07/05/2026\n", capture_output=True, text=True, check=True
    )
    assert out.stdout == "2026-05-07\n"


def test_bad_date_fails():
    out = subprocess.run([sys.executable, "scripts/iso.py"], input="2026-99-99\n", capture_output=True, text=True)
    assert out.returncode != 0
