import pytest

_RESULTS = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def verdict(request):
    """Record one pass/fail line per acceptance criterion.

    The lines are echoed immediately and repeated in the terminal summary,
    so they survive output capture.
    """
    results = request.config.stash.setdefault(_RESULTS, {})

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        results[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_RESULTS, {})
    if results:
        terminalreporter.section("acceptance criteria")
        for number in sorted(results):
            terminalreporter.write_line(results[number])
