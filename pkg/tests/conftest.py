import numpy as np
import pytest

from denseact.branches import NetworkConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    """Small network for gradient checks and structural tests."""
    return NetworkConfig(T=16, D=8, C=5, C_star=8, D_star=8, B=1, H=2, F=2, r_clip=4,
                         dropout_rate=0.1)
