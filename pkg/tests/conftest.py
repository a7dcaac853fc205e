"""Shared fixtures plus a terminal summary of the acceptance verdicts."""

from __future__ import annotations

import pytest

from mfcrand.controls import default_lambda_family, random_lambda_family
from mfcrand.instances import build_instance, micro_instances

import numpy as np

ACCEPTANCE_LINES: list[str] = []


def record(criterion: int, ok: bool, detail: str) -> str:
    line = f"CRITERION {criterion:2d}: {'PASS' if ok else 'FAIL'} | {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def micro():
    return micro_instances(5, 2024)


@pytest.fixture(scope="session")
def small():
    """A fixed two-step, two-action instance for quick unit tests."""
    return build_instance(
        "small", 2, 1.0, [-1.0, 1.0],
        {"family": "linear", "bx": -0.5, "bm": 0.3, "ba": 1.0, "b0": 0.0, "sigma": 0.3, "sigma0": 0.2},
        {"family": "tracking", "cx": 0.2, "cm": 0.1, "ca": 0.05, "gx": 1.0, "gm": 0.5, "target": 0.4},
        [-0.6, 0.8])


@pytest.fixture(scope="session")
def small_lambdas(small):
    k = small.actions.size
    return (default_lambda_family(small.tree, k),
            random_lambda_family(small.tree, k, np.random.default_rng(7)))
