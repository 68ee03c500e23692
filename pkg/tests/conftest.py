import pytest

from mcdistill.data import DataConfig, gen_split
from mcdistill.train import NetConfig, Preset, train_teacher

TINY_DATA = DataConfig(n_samples=24, n_eval=12)
TINY = Preset(TINY_DATA, NetConfig(8, 1), NetConfig(4, 1), 2, 2)


@pytest.fixture(scope="session")
def tiny_split():
    return gen_split(TINY_DATA)


@pytest.fixture(scope="session")
def tiny_teacher(tiny_split):
    train, evals = tiny_split
    teacher, _ = train_teacher(TINY.teacher_config(), train, evals)
    return teacher


# criterion lines recorded by test_acceptance, echoed after the run
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
