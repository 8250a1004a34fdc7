"""Shared fixtures: repository root on sys.path plus tiny seeded models."""

import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from modules.verify import tiny_model  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def full_model():
    return tiny_model("delib-jatd-full", seed=3)


@pytest.fixture
def partial_model():
    return tiny_model("delib-jatd-partial", seed=3)


@pytest.fixture
def deliberation_model():
    return tiny_model("deliberation", seed=3)
