import pytest

# (criterion number, title, passed, detail) rows filled in by the acceptance suite
ACCEPTANCE_ROWS = []


@pytest.fixture
def record():
    def _record(number, title, passed, detail=""):
        ACCEPTANCE_ROWS.append((number, title, bool(passed), detail))
        print(f"[criterion {number:>2}] {'PASS' if passed else 'FAIL'}  {title}: {detail}")
        return passed

    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_ROWS:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(ACCEPTANCE_ROWS, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {number:>2}  {'PASS' if passed else 'FAIL'}  {title}  ({detail})")
