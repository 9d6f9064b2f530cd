from __future__ import annotations

import sys
from pathlib import Path

import pytest

# Ensure imports like `import app` and `from vtpm...` work no matter how pytest is invoked
# (e.g. `pytest` vs `python -m pytest`) and regardless of the current working directory.
_REPO_DIR = Path(__file__).resolve().parents[1]
if str(_REPO_DIR) not in sys.path:
    sys.path.insert(0, str(_REPO_DIR))

from vtpm.core.commands import CommandEnv  # noqa: E402
from vtpm.core.rng import DeterministicRng  # noqa: E402
from vtpm.core.state import TpmState, new_state  # noqa: E402

# 1024-bit RSA keeps key generation fast; nothing under test depends on the size.
TEST_RSA_BITS = 1024


class ManualClock:
    """now_ms only moves when a test says so."""

    def __init__(self, start_ms: int = 1_000_000) -> None:
        self.now = start_ms

    def now_ms(self) -> int:
        return self.now

    def advance(self, ms: int) -> None:
        self.now += ms


@pytest.fixture
def clock() -> ManualClock:
    return ManualClock()


@pytest.fixture
def env(clock: ManualClock) -> CommandEnv:
    return CommandEnv(clock=clock, rng=DeterministicRng("env"), test_mode=True, rsa_bits=TEST_RSA_BITS)


@pytest.fixture
def state() -> TpmState:
    return new_state(DeterministicRng("state"))
