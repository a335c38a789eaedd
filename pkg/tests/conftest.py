import sys
from pathlib import Path

import numpy as np
import pytest
import torch

from peerdistill.models import PeerConfig

sys.path.insert(0, str(Path(__file__).parent))  # make `oracles` importable

# Tiny geometries sized for finite-difference sweeps: the reference conv
# kernel (50) would not fit 40 samples, hence the overrides.
TINY_CNN = PeerConfig(kind="cnn_lstm", n_channels=3, n_samples=40,
                      conv_channels=(3, 2), conv_kernels=(8, 4),
                      conv_strides=(4, 2), embed_region_dim=6,
                      embed_channel_dim=6, contrastive_dim=4)
TINY_TRF = PeerConfig(kind="transformer", n_channels=3, n_samples=40,
                      embed_region_dim=6, embed_channel_dim=6,
                      contrastive_dim=4, d_model=4, n_heads=2,
                      n_layers=1, ffn_mult=2)


def unit_rows(n, d, rng):
    v = rng.standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def balanced_labels(n, classes=4):
    assert n % classes == 0
    return np.repeat(np.arange(classes), n // classes)


def random_views(n, d, m, classes=4, seed=0, dtype=torch.float64):
    """m unit-norm view matrices [n][d] plus balanced labels."""
    rng = np.random.default_rng(seed)
    labels = balanced_labels(n, classes)
    views = [torch.tensor(unit_rows(n, d, rng), dtype=dtype) for _ in range(m)]
    return views, labels


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
