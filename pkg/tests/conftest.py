import numpy as np
import pytest

import autodiff as ad
from config import ArchConfig, LossWeights, ShiftSpec, TrainConfig
from datagen import gen_pair


@pytest.fixture(autouse=True)
def float64():
    ad.set_default_dtype(np.float64)
    yield
    ad.set_default_dtype(np.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_arch():
    """Dense architecture small enough for finite differences; stochastic layers off."""
    return ArchConfig(kind="dense", hidden=8, disc_hidden=8, noise_std=0.0, dropout=0.0)


@pytest.fixture
def moons():
    return gen_pair(ShiftSpec(family="two-moons", n_per_class=50, rotation_deg=30.0, seed=3))


@pytest.fixture
def weights():
    return LossWeights(lambda_d=0.1, lambda_p=0.5, lambda_div=0.2, lambda_ce=0.3, lambda_sv=0.7,
                       nu=4.0, eps_vat_source=0.5, eps_vat_target=0.5)


@pytest.fixture
def tiny_train(weights):
    return TrainConfig(iterations=10, batch_size=8, eval_every=5, seed=0, weights=weights)
