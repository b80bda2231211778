import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from supernet_rnnt.config import TrainConfig  # noqa: E402

SHORT = {
    "steps": 120,
    "eval_every": 20,
    "schedule.t0": 20,
    "schedule.delta_t": 10,
    "data.num_train": 200,
    "data.num_valid": 32,
    "data.num_test": 32,
}


def short_config(**extra) -> TrainConfig:
    return TrainConfig().replace(**{**SHORT, **extra})


@pytest.fixture(scope="session")
def short_run(tmp_path_factory):
    from supernet_rnnt.trainer import run_supernet

    out = tmp_path_factory.mktemp("short-run")
    return run_supernet(short_config(), out)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "VERDICTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
