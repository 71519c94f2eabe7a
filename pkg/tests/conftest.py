import pytest

from gwcstereo.config import NetworkConfig, TrainConfig
from gwcstereo.stereo_io import SyntheticConfig, rds_sample

TINY_NET = dict(unary_channels=8, gwc_groups=2, concat_channels=2, d_max=8,
                base_3d_channels=4, stage_blocks=(1, 1, 1, 1))

TINY_CONFIG_TEXT = """\
# tiny network for fast tests
d_max = 8
unary_channels = 8
gwc_groups = 2
concat_channels = 2
base_3d_channels = 4
stage_blocks = 1,1,1,1
lr = 0.001
batch_size = 2
max_iterations = 4
seed = 0
log_interval = 2
val_interval = 2
"""


@pytest.fixture
def tiny_net():
    return NetworkConfig(**TINY_NET)


@pytest.fixture
def tiny_train_cfg():
    return TrainConfig(max_iterations=4, log_interval=2, val_interval=2, seed=0)


@pytest.fixture
def tiny_samples():
    cfg = SyntheticConfig(height=16, width=32, d_max=8, seed=3)
    return [rds_sample(cfg, i) for i in range(6)]


@pytest.fixture
def tiny_config_file(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_CONFIG_TEXT)
    return path


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES, key=lambda k: (int("".join(c for c in k if c.isdigit())), k)):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
