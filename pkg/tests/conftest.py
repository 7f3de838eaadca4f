import pytest
from threadpoolctl import threadpool_limits

NUM_CRITERIA = 11
_results: dict[int, tuple[bool, str]] = {}


@pytest.fixture(scope="session", autouse=True)
def single_thread():
    # deterministic BLAS everywhere
    with threadpool_limits(1):
        yield


@pytest.fixture
def acceptance():
    """Record and print one outcome line for an acceptance criterion."""

    def record(number: int, ok: bool, detail: str) -> bool:
        _results[number] = (bool(ok), detail)
        print(f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    ran = [i for i in terminalreporter.stats.get("passed", []) + terminalreporter.stats.get("failed", [])
           if "test_acceptance" in i.nodeid]
    if not ran:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, NUM_CRITERIA + 1):
        if n in _results:
            ok, detail = _results[n]
            terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}")
        else:
            terminalreporter.write_line(f"[FAIL] criterion {n}: not run or crashed before reporting")
