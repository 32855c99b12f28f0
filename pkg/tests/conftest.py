import json
import sys
from contextlib import contextmanager
from pathlib import Path

import pytest

HERE = Path(__file__).parent
DATA = HERE / "data"
FIXTURE = DATA / "fixture"
GOLDEN = DATA / "golden"

sys.path.insert(0, str(HERE))

_ACCEPTANCE: list[tuple[str, bool, str]] = []


def record_acceptance(name: str, ok: bool, detail: str = "") -> None:
    _ACCEPTANCE.append((name, ok, detail))


@contextmanager
def criterion(name: str):
    """Record PASS when the block finishes, FAIL (then re-raise) when it raises.

    The block may fill ``info["detail"]`` with a one-line summary.
    """
    info = {"detail": ""}
    try:
        yield info
    except BaseException as exc:
        record_acceptance(name, False, (info["detail"] + f" [{type(exc).__name__}: {exc}]").strip()[:300])
        raise
    record_acceptance(name, True, info["detail"])


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in _ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}".rstrip())


@pytest.fixture
def world():
    return json.loads((FIXTURE / "world.json").read_text())


@pytest.fixture
def questions_path():
    return FIXTURE / "questions.jsonl"
