import torch
import pytest

from snflows.linalg import DTYPE


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)


def randn(gen, *shape, scale=1.0):
    return scale * torch.randn(*shape, generator=gen, dtype=DTYPE)


def t(values):
    return torch.tensor(values, dtype=DTYPE)
