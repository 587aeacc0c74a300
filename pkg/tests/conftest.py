"""Shared fixtures and the acceptance-summary reporter.

Acceptance tests call ``record_acceptance`` so every criterion emits one
visible PASS/FAIL line in the terminal summary regardless of pytest's
output capturing.
"""

from __future__ import annotations

import warnings
from typing import List

import pytest

from oamlink.config import NearFieldWarning
from oamlink.linkeval import build_link_chain
from oamlink.presets import get_preset

warnings.simplefilter("ignore", NearFieldWarning)

_ACCEPTANCE_LINES: List[str] = []


def record_acceptance(number: int, name: str, passed: bool, detail: str) -> None:
    """Store (and print) the one-line verdict for one acceptance criterion."""
    verdict = "PASS" if passed else "FAIL"
    line = f"ACCEPTANCE {number:02d} [{name}]: {verdict} -- {detail}"
    _ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in _ACCEPTANCE_LINES:
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def fig7_config():
    return get_preset("fig7")


@pytest.fixture(scope="session")
def fig9_true_chain():
    return build_link_chain(get_preset("fig9"))


@pytest.fixture(scope="session")
def fig11_true_chain():
    return build_link_chain(get_preset("fig11"))
