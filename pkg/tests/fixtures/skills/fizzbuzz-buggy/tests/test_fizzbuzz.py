import subprocess
import sys


def test_first_fifteen():
    out = subprocess.run([sys.executable, "scripts/fizzbuzz.py", "15"], capture_output=True, text=True, check=True)
    lines = out.stdout.split()
    assert lines[2] == "Fizz"
    assert lines[4] == "Buzz"
    assert lines[14] == "FizzBuzz"
