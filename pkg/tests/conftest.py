import os
import sys

import pytest
import torch

sys.path.insert(0, os.path.dirname(__file__))
torch.set_num_threads(1)


@pytest.fixture(scope="session")
def model_cache(tmp_path_factory):
    """Trained-model cache shared by every test in the session.

    ``SAFEDYN_TEST_CACHE`` points at a persistent directory to skip retraining
    between sessions; by default each session trains from scratch.
    """
    path = os.environ.get("SAFEDYN_TEST_CACHE")
    return path if path else str(tmp_path_factory.mktemp("models"))


ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance():
    """``record(number, ok, detail)`` collects one verdict line per acceptance criterion."""
    def record(number, ok, detail):
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append((number, line))
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
