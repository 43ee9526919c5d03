import numpy as np
import pytest
import torch

from eaq.episode_data import Episode, compute_reward_to_go

torch.set_num_threads(1)


def random_episode(rng, T=None, N=2, d_obs=3, num_actions=4, T_max=8, gamma=0.99):
    T = T or int(rng.integers(1, T_max + 1))
    e = Episode(
        rng.normal(size=(T, N, d_obs)),
        rng.integers(0, num_actions, size=(T, N)),
        rng.uniform(0, 2, size=T),
    )
    return compute_reward_to_go(e, gamma)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def episodes(rng):
    return [random_episode(rng) for _ in range(6)]


# one line per acceptance criterion, echoed at the end of the session
ACCEPTANCE_LINES = []


def record_criterion(name, passed, detail):
    line = f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
