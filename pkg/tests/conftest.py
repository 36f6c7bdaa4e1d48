from __future__ import annotations

import numpy as np
import pytest
from hypothesis import settings

from trajkit.reward_cache import build_vocabulary, precompute_rewards
from trajkit.scene_metrics.generate import KIND_ORDER, generate_scene

settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile("default")

ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split("]")[0].split()[-1])):
            terminalreporter.write_line(line)


@pytest.fixture
def acceptance_lines(request):
    """Lines echoed in the terminal summary even when output is captured."""
    return request.config.stash[ACCEPTANCE]


@pytest.fixture(scope="session")
def small_corpus():
    """Two scenes of every kind."""
    return [generate_scene(k, s) for s in range(2) for k in KIND_ORDER]


@pytest.fixture(scope="session")
def vocab():
    return build_vocabulary(1024)


@pytest.fixture(scope="session")
def small_tables(small_corpus, vocab):
    return [precompute_rewards(s, vocab) for s in small_corpus]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
