import sys
import time
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))
torch.set_num_threads(1)

GOLDEN = Path(__file__).parent / "golden"


@pytest.fixture
def golden_dir():
    return GOLDEN

_CRITERIA = []


class _Criterion:
    def __init__(self, name, budget_s):
        self.name, self.budget_s, self.detail = name, budget_s, ""

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        elapsed = time.perf_counter() - self.start
        over = self.budget_s is not None and elapsed >= self.budget_s
        ok = exc_type is None and not over
        why = self.detail
        if exc_type is not None:
            why = f"{exc_type.__name__}: {exc}".splitlines()[0]
        elif over:
            why = f"runtime {elapsed:.1f}s exceeds {self.budget_s}s budget; {why}"
        line = f"{'PASS' if ok else 'FAIL'}  {self.name}  [{elapsed:.1f}s]  {why}"
        _CRITERIA.append(line)
        print("\n" + line)
        if over and exc_type is None:
            raise AssertionError(line)
        return False


@pytest.fixture
def criterion():
    return _Criterion


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)
