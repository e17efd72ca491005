"""Collects one pass/fail line per acceptance criterion and prints them at the end of the run."""

import pytest

ACCEPTANCE: dict[str, tuple[bool, str]] = {}


@pytest.fixture()
def criterion():
    def record(name: str, ok: bool, detail: str = "") -> None:
        ACCEPTANCE[name] = (bool(ok), detail)
        print(f"\nACCEPTANCE {name}: {'PASS' if ok else 'FAIL'}  {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[name]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")
