from __future__ import annotations

import numpy as np
import pytest
from hypothesis import settings

from hybridrl.mdp import TabularMdp

# fixed example streams keep the statistical checks reproducible
settings.register_profile("repro", derandomize=True, print_blob=True)
settings.load_profile("repro")


def chain_mdp(gamma: float) -> TabularMdp:
    """s0 -> s1 with reward 1, s1 absorbing with reward 0; one action, reset at s0."""
    P = np.zeros((2, 1, 2))
    P[0, 0, 1] = 1.0
    P[1, 0, 1] = 1.0
    r = np.array([[1.0], [0.0]])
    mu0 = np.array([[1.0], [0.0]])
    return TabularMdp(P, r, mu0, gamma)


def single_state_mdp(reward: float, gamma: float) -> TabularMdp:
    return TabularMdp(np.ones((1, 1, 1)), np.array([[reward]]), np.ones((1, 1)), gamma)


def bandit_mdp(rewards, gamma: float = 0.0) -> TabularMdp:
    A = len(rewards)
    return TabularMdp(np.ones((1, A, 1)), np.array([rewards], dtype=float), np.full((1, A), 1.0 / A), gamma)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance_report():
    """Record one PASS/FAIL line per acceptance criterion; echoed in the terminal summary."""
    def report(name: str, ok: bool, detail: str) -> bool:
        line = f"{name}: {'PASS' if ok else 'FAIL'} | {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
