import pytest
import torch

from spatchgan.config import config_from_dict
from spatchgan.discriminator import DiscriminatorConfig

TOY_GEN = {"base_channels": 4, "channel_cap": 16, "num_residual_blocks": 2}
TOY_DISC = {"base_channels": 4, "channel_cap": 16}


def toy_config(**overrides):
    data = {
        "image_size": 64, "total_iters": 20, "warmup_iters": 5, "batch_size": 2,
        "checkpoint_interval": 10, "eval_interval": 10,
        "disc": dict(TOY_DISC), "gen": dict(TOY_GEN), "data": {"augmentation": "none"},
    }
    for k, v in overrides.items():
        if isinstance(v, dict) and isinstance(data.get(k), dict):
            data[k].update(v)
        else:
            data[k] = v
    return config_from_dict(data)


@pytest.fixture
def small_disc_cfg():
    return DiscriminatorConfig(num_scales=4, base_channels=4, channel_cap=16)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
