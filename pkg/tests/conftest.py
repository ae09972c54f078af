import pytest
import torch

from hamburger import nn as hnn
from hamburger.config import ModelConfig
from hamburger.hamburger import build_model


@pytest.fixture(autouse=True)
def _deterministic():
    hnn.set_deterministic(0)
    yield


def tiny_config(**changes) -> ModelConfig:
    base = dict(d_model=16, n_heads=2, n_layers=2, decoder_layers=1, tap_layers=(1, 2), max_context=256)
    base.update(changes)
    return ModelConfig(**base)


def jitter(model, scale=0.05, seed=1):
    """Push zero-initialised heads away from zero so every path carries signal."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(scale * torch.randn(p.shape, generator=gen))
    return model


@pytest.fixture
def tiny():
    return jitter(build_model(tiny_config(), seed=0))


ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
