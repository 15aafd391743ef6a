import numpy as np
import pytest
import torch

from pidimt.config import desk_config
from pidimt.model import PiDiMT, scene_limits
from pidimt.scenarios import batch_targets, generate_scenario


def tiny_model_config():
    cfg = desk_config().model
    cfg.d, cfg.n_heads, cfg.n_state = 12, 2, 4
    cfg.neighbors, cfg.statics, cfg.lanes, cfg.route_lanes = 2, 2, 3, 2
    cfg.history, cfg.future, cfg.lane_points = 8, 12, 5
    cfg.accel_hidden = 8
    return cfg


@pytest.fixture
def tiny_cfg():
    return tiny_model_config()


@pytest.fixture
def tiny_model(tiny_cfg):
    torch.manual_seed(0)
    return PiDiMT(tiny_cfg).eval()


@pytest.fixture
def tiny_batch(tiny_cfg):
    kinds = ["constant_velocity", "lane_follow_turn", "stop"]
    scenarios = [generate_scenario(k, i, scene_limits(tiny_cfg), tiny_cfg.future) for i, k in enumerate(kinds)]
    return batch_targets(scenarios, scene_limits(tiny_cfg))


def randomize_gates(model, seed=0, scale=0.3):
    """Give every zero-initialised gate row a random value so all subpaths carry signal."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale * (p.abs().mean() + 0.02))
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(0)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
