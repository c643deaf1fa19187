import pytest

ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def record(request):
    """Store one acceptance verdict: ``record(n, passed, detail)``."""
    results = request.config.stash.setdefault(ACCEPTANCE, {})

    def _record(number, passed, detail):
        results[number] = (bool(passed), detail)
        print(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")

    return _record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(ACCEPTANCE, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        passed, detail = results[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
