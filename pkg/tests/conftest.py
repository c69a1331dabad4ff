import numpy as np
import pytest
import torch

from regdesk.schedule import LinearSchedule
from regdesk.synthdata import make_mixture
from regdesk.teacher import make_teacher


@pytest.fixture
def sched():
    return LinearSchedule()


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture(scope="session")
def desk_world():
    mix = make_mixture()
    teacher = make_teacher(32, mix.grid**2, mix.channels, mix.num_classes)
    return mix, teacher


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


# one line per acceptance criterion, printed after the run regardless of capture
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
