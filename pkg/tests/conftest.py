import pytest

# "criterion N: PASS|FAIL ..." lines collected by the acceptance suite
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    def record(line: str):
        ACCEPTANCE_LINES.append(line)
        print(line)
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
