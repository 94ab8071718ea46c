import os

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from mono3dvg.config import ModelConfig
from mono3dvg.datagen.dataset import DatasetConfig, generate_split
from mono3dvg.datagen.expressions import Vocabulary

settings.register_profile("repo", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "repo"))

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture(scope="session")
def vocab():
    return Vocabulary()


@pytest.fixture(scope="session")
def small_split():
    return generate_split("val", 24, DatasetConfig(splits={"val": 24}, seed=3))


@pytest.fixture
def tiny_model_cfg():
    return ModelConfig(dim=16, encoder_layers=1, depth_encoder_layers=1, decoder_layers=1,
                       backbone_channels=(8, 16, 16, 16), dropout=0.0)
