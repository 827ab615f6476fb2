import os
import sys

import pytest

# shared oracle / case modules live next to the tests
sys.path.insert(0, os.path.dirname(__file__))

from filsynth.data import generate_synthetic_micro_dataset  # noqa: E402


@pytest.fixture(scope="session")
def micro8():
    return generate_synthetic_micro_dataset(8, 64, seed=1)


@pytest.fixture(scope="session")
def micro32():
    return generate_synthetic_micro_dataset(1, 32, seed=0)
