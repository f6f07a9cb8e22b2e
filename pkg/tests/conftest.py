"""Collects acceptance verdicts and prints one line per criterion at the end of the run."""
import pytest

N_CRITERIA = 14
ACCEPTANCE: dict[int, tuple[bool, str]] = {}
_collected = {"acceptance": False}


@pytest.fixture
def verdict():
    def record(n: int, ok: bool, detail: str) -> None:
        ACCEPTANCE[n] = (bool(ok), detail)
        assert ok, f"criterion {n}: {detail}"
    return record


def pytest_collection_modifyitems(session, config, items):
    _collected["acceptance"] = any(item.path.name == "test_acceptance.py" for item in items)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _collected["acceptance"]:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        ok, detail = ACCEPTANCE.get(n, (False, "not evaluated (errored or deselected)"))
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
