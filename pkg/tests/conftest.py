import sys
from dataclasses import dataclass
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from resilinet.desk import desk_cnn, digits_datasets  # noqa: E402
from resilinet.modelio import profile_intervals  # noqa: E402
from resilinet.training import train_sgd  # noqa: E402
from resilinet.vulnerability import calibration_subset, channel_vulnerability  # noqa: E402

DESK_EPOCHS = 30
DESK_LR = 0.05
DESK_SEED = 0


@dataclass
class Desk:
    model: object
    train: object
    test: object
    intervals: object
    report: object
    data_dir: Path


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    """The trained desk-scale CNN with its profiled intervals and vulnerability report."""
    data_dir = tmp_path_factory.mktemp("digits")
    train, test = digits_datasets(data_dir)
    model = train_sgd(desk_cnn(seed=DESK_SEED), train, DESK_EPOCHS, DESK_LR, 32, DESK_SEED)
    intervals = profile_intervals(model, train)
    report = channel_vulnerability(model, calibration_subset(train, 1024, DESK_SEED), seed=DESK_SEED)
    return Desk(model, train, test, intervals, report, data_dir)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
