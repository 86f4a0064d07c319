import pytest

# acceptance criteria append "(number, passed, detail)" here; printed at the end of the run
ACCEPTANCE: list[tuple[int, str, str]] = []


@pytest.fixture
def criterion():
    def record(number: int, passed: bool, detail: str, known: bool = False):
        status = "PASS" if passed else ("FAIL (known, see ledger)" if known else "FAIL")
        ACCEPTANCE.append((number, status, detail))
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, status, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {number:2d}: {status}: {detail}")
