import json
from pathlib import Path

import numpy as np
import pytest

from stochff.cli import HELDOUT_SEED, fixture_paths
from stochff.datatrain import generate_dataset
from stochff.network import load_model_files

FIXTURES = Path(__file__).parent / "fixtures"

# Lines appended by test_acceptance.py, echoed in the terminal summary.
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def model():
    return load_model_files(fixture_paths())


@pytest.fixture(scope="session")
def heldout():
    return generate_dataset(400, HELDOUT_SEED)


@pytest.fixture(scope="session")
def golden():
    return json.loads((FIXTURES / "golden.json").read_text())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
