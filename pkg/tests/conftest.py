"""Shared pytest plumbing: acceptance criteria report one PASS/FAIL line each."""

import pytest

_RESULTS: list[tuple[str, bool, str]] = []


class Criterion:
    def __init__(self, name: str):
        self.name = name

    def check(self, ok: bool, detail: str) -> None:
        ok = bool(ok)
        _RESULTS.append((self.name, ok, detail))
        print(f"{'PASS' if ok else 'FAIL'}  {self.name}: {detail}")
        assert ok, f"{self.name}: {detail}"


@pytest.fixture
def criterion(request):
    return Criterion(request.node.name)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in _RESULTS:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
