import numpy as np
import pytest
import torch

from sodawidenet import ModelConfig, build_model


@pytest.fixture(autouse=True)
def _fixed_seeds():
    torch.manual_seed(1234)
    np.random.seed(1234)


@pytest.fixture
def toy_config():
    return ModelConfig(variant="toy", stem_channels=4, stage_channels=(8, 8),
                       attn_dk=8, input_size=(16, 16))


@pytest.fixture
def toy_model(toy_config):
    return build_model(toy_config, seed=7)
