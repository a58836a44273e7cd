"""Shared fixtures for the laboratory test-suite."""
import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from model import InitialDataSpec, RadialGrid  # noqa: E402
from core import build_bump_data  # noqa: E402


@pytest.fixture
def default_spec():
    return InitialDataSpec()


@pytest.fixture
def small_radial_data(default_spec):
    """Default bump on r in [0, 8] with h = 0.02."""
    return build_bump_data(default_spec, RadialGrid(8.0, 401))
