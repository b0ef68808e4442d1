import pytest

_VERDICTS = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion; returns ``ok``."""
    lines = request.config.stash.setdefault(_VERDICTS, [])

    def record(criterion: int, title: str, ok: bool, detail: str) -> bool:
        line = f"criterion {criterion} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
