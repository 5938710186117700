import numpy as np
import pytest
import torch

from modsiren.field_model import ModelConfig, init_shared
from modsiren.gradient_engine import ContextSet

torch.set_num_threads(1)


@pytest.fixture
def tiny_config():
    return ModelConfig(K=3, L=4, P=2, C=1, D=1, omega_first=3.0, omega_last=5.0)


@pytest.fixture
def tiny_shared(tiny_config):
    return init_shared(tiny_config, seed=1)


def random_context(rng, M, C=1, D=1):
    return ContextSet(rng.uniform(-1, 1, size=(M, C)), rng.uniform(0, 1, size=(M, D)))


def central_diff(f, x, h=1e-6):
    """Central finite differences of a scalar function over every entry of x."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        g.flat[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def rel_err(a, b):
    """Per-coordinate relative error with a small absolute floor on the scale."""
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)
