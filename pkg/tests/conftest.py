import pytest

# one line per acceptance criterion, echoed after the run
VERDICTS: list[str] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: long end-to-end criteria (minutes; deselect with -m 'not acceptance')")


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def verdict():
    def record(n: int, name: str, ok: bool, detail: str):
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'} {name} ({detail})"
        VERDICTS.append(line)
        print(line)
        return ok

    return record
