"""Shared fixtures: small specs sized for fast module tests."""

import numpy as np
import pytest

from sair.generator import synthetic_spec
from sair.semantics import EmbedderSpec

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log() -> list[str]:
    """Shared sink for the per-criterion summary lines."""
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_gen():
    return synthetic_spec(seed=3, latent_shape=(4, 16), output_shape=(32, 32, 3))


@pytest.fixture(scope="session")
def small_emb():
    return EmbedderSpec(resolution=8, dim=12, seed=5)


@pytest.fixture()
def rng():
    return np.random.default_rng(123)
