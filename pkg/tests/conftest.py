import pytest

from hypothesis import settings

settings.register_profile("default", deadline=None)
settings.load_profile("default")

CRITERIA = []


@pytest.fixture
def criterion(request):
    """Record one acceptance line: ``criterion(ok, detail)`` then assert ``ok``."""

    def record(ok, detail):
        CRITERIA.append((request.node.name, bool(ok), detail))
        print(f"{'PASS' if ok else 'FAIL'} {request.node.name}: {detail}")
        assert ok, detail

    return record


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in CRITERIA:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
