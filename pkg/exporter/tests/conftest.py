import numpy as np
import pytest
import torch
from torch import nn

from naflow_exporter import Checkpoint


def seeded(seed):
    torch.manual_seed(seed)


@pytest.fixture
def classifier_ckpt():
    """6-layer backbone: conv -> BN -> ReLU -> maxpool -> conv -> ReLU."""
    seeded(0)
    backbone = nn.Sequential(
        nn.Conv2d(3, 8, 3, padding=1),
        nn.BatchNorm2d(8),
        nn.ReLU(),
        nn.MaxPool2d(2, 2),
        nn.Conv2d(8, 16, 3, padding=1),
        nn.ReLU(),
    )
    # give batch norm non-trivial running statistics
    bn = backbone[1]
    bn.running_mean.copy_(torch.randn(8) * 0.2)
    bn.running_var.copy_(torch.rand(8) + 0.5)
    return Checkpoint(
        name="torch-classifier",
        input_shape=(3, 16, 16),
        backbone=backbone,
        head=nn.Linear(16, 5),
    )


@pytest.fixture
def embedding_ckpt():
    seeded(1)
    backbone = nn.Sequential(
        nn.Conv2d(3, 8, 3, padding=1),
        nn.ReLU(),
        nn.MaxPool2d(2, 2),
        nn.Conv2d(8, 16, 3, padding=1),
        nn.LeakyReLU(0.1),
    )
    return Checkpoint(
        name="torch-embedding",
        input_shape=(3, 16, 16),
        backbone=backbone,
        head=None,
        l2_normalize=True,
    )


@pytest.fixture
def golden_input():
    return np.random.default_rng(2).uniform(0.0, 1.0, (3, 16, 16))
