import pytest


def pytest_configure(config):
    config._acceptance_lines = []


@pytest.fixture
def report(request):
    """Record one pass/fail line for an acceptance criterion."""
    lines = request.config._acceptance_lines

    def add(cid, ok, detail):
        line = f"criterion {cid:<3} {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
    return add


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
