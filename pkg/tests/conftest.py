import pytest
import torch

from jointflow.rng import RngStream

DTYPE = torch.float64


@pytest.fixture
def rng():
    return RngStream(1234, "tests")


def t64(*rows):
    return torch.tensor(rows, dtype=DTYPE)


# one pass/fail line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
