import pytest

from lossforge import nn

# verify softmax normalization on every forward pass during tests
nn.CHECK_SOFTMAX = True

_CRITERIA: dict[str, str] = {}


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line for an acceptance criterion."""
    def record(key: str, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'}  criterion {key}: {detail}"
        _CRITERIA[key] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_CRITERIA, key=lambda k: [int(x) if x.isdigit() else x
                                                 for x in k.replace(".", " ").split()]):
        terminalreporter.write_line(_CRITERIA[key])
