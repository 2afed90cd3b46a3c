from __future__ import annotations

import pytest

from planeqc import numerics as nx

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(autouse=True)
def fresh_tape():
    nx.set_precision("f32")
    nx.current_tape().clear()
    yield
    nx.current_tape().clear()
    nx.set_precision("f32")


@pytest.fixture
def verdict():
    """Record and print a one-line pass/fail verdict for an acceptance criterion."""
    def record(number: int, title: str, ok: bool, detail: str) -> bool:
        line = f"[criterion {number}] {'PASS' if ok else 'FAIL'} {title}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip("]"))):
            terminalreporter.write_line(line)
