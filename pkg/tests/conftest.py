import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from tangleshare.ledger import NetworkConfig  # noqa: E402

# low difficulty keeps every attach in the millisecond range
FAST = NetworkConfig(difficulty=4, payload_max=512, name="test")


@pytest.fixture
def fast_config():
    return FAST


@pytest.fixture
def report(capsys):
    """Print one PASS/FAIL line, visible even with output capture on."""

    def emit(name: str, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'}  {name}: {detail}")

    return emit
