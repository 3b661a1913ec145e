import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))


def pytest_runtest_logreport(report):
    # surface the acceptance criteria pass/fail lines even when pytest
    # captures test output
    if report.when == "call" and getattr(report, "capstdout", ""):
        for line in report.capstdout.splitlines():
            if line.startswith("[criterion"):
                print(f"\n{line}", end="")
