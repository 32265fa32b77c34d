import pytest
from hypothesis import settings

# numba compilation and a shared single CPU make per-example timings noisy
settings.register_profile("default", deadline=None, print_blob=True)
settings.load_profile("default")

_VERDICTS: dict[str, tuple[bool, str]] = {}


@pytest.fixture
def verdict():
    """Record one pass/fail line for an acceptance criterion, then assert it."""
    def record(criterion: str, passed: bool, detail: str):
        _VERDICTS[criterion] = (bool(passed), detail)
        assert passed, f"criterion {criterion}: {detail}"
    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance")
    for k in sorted(_VERDICTS):
        ok, detail = _VERDICTS[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
