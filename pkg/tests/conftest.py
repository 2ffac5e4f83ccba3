import pytest

_LINES: list[str] = []


class AcceptanceReport:
    """Collects one pass/fail line per acceptance criterion."""

    def line(self, criterion: int, ok: bool, detail: str) -> bool:
        text = f"criterion {criterion}: {'PASS' if ok else 'FAIL'} - {detail}"
        _LINES.append(text)
        print(text)
        return ok


@pytest.fixture(scope="session")
def acceptance() -> AcceptanceReport:
    return AcceptanceReport()


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for text in _LINES:
            terminalreporter.write_line(text)
