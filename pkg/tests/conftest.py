import pathlib

import pytest

FIXTURES = pathlib.Path(__file__).resolve().parent.parent / "fixtures"

_acceptance: list[str] = []


@pytest.fixture(scope="session")
def fixtures_dir() -> pathlib.Path:
    return FIXTURES


@pytest.fixture
def report():
    """Record one acceptance line; printed again in the terminal summary."""

    def _report(number: int, ok: bool, detail: str) -> None:
        line = f"CRITERION {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        _acceptance.append(line)
        assert ok, line

    return _report


def pytest_terminal_summary(terminalreporter):
    if _acceptance:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_acceptance):
            terminalreporter.write_line(line)
