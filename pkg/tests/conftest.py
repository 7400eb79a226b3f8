import numpy as np
import pytest
import torch

from invicl.model import ModelConfig, build_model
from invicl.schemes import PEScheme, Scheme


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_model(scheme=Scheme.INVICL, pe=PEScheme.SYMMETRIC, seed=0, d=3, max_examples=6, dtype=torch.float64, **kw):
    cfg = ModelConfig(layers=kw.pop("layers", 2), heads=2, embed_dim=16, d=d, max_examples=max_examples,
                      scheme=scheme, pe=pe, init_std=kw.pop("init_std", 0.3))
    return build_model(cfg, seed=seed, dtype=dtype)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
