import pytest

VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """Record one acceptance line; it is echoed now and again in the summary."""
    def record(n, ok, detail, warn=False):
        tag = "PASS" if ok else ("WARN" if warn else "FAIL")
        line = f"criterion {n}: {tag}  {detail}"
        VERDICTS.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
