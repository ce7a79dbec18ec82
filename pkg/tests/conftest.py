import sys

import pytest

from stswincl import data


@pytest.fixture(scope="session")
def tiny_root(tmp_path_factory):
    cfg = data.SynthConfig(num_videos=6, frames_per_video=6, height=32, width=32,
                           splits={"train": 4, "val": 1, "test": 1}, seed=0)
    return data.generate_synthetic(cfg, tmp_path_factory.mktemp("tiny"))


@pytest.fixture(scope="session")
def tiny(tiny_root):
    return data.load_dataset(tiny_root)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)
