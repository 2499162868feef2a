import numpy as np
import pytest

from nam.synthetic import write_demo_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def write_tiny_dataset(root, n_users=60, n_items=40, seed=0):
    return write_demo_dataset(root, n_users, n_items, seed)


@pytest.fixture
def tiny_manifest(tmp_path):
    return write_tiny_dataset(tmp_path)


# one line per acceptance criterion, printed at the end of the run
CRITERIA_LINES = []


def record_criterion(number, name, ok, detail=""):
    """``ok`` is True, False, or None for a criterion that could not run."""
    status = "SKIP" if ok is None else "PASS" if ok else "FAIL"
    line = f"criterion {number:>2} {name:<34} {status}  {detail}".rstrip()
    CRITERIA_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if CRITERIA_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA_LINES):
            terminalreporter.write_line(line)
