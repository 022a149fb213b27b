import numpy as np
import pytest
from hypothesis import settings

from ambifilter.model import ModelSpec, build_time_grid
from ambifilter.presets import make_coef

settings.register_profile("suite", max_examples=25, deadline=None)
settings.load_profile("suite")


@pytest.fixture(scope="session")
def tanh_model() -> ModelSpec:
    """Bounded test model: b = 0.2 tanh(x), sigma = 0.5, h = f = tanh(x).
    x0 sits in the curved region so drift perturbations actually matter."""
    return ModelSpec(b=make_coef("tanh", 0.2), sigma=make_coef("constant", 0.5),
                     h=make_coef("tanh", 1.0), f=make_coef("tanh", 1.0),
                     x0=0.8, T=1.0, k=0.25)


@pytest.fixture(scope="session")
def linear_model() -> ModelSpec:
    """Validation-only linear-Gaussian model (a=0, sigma=1, c=1, x0=0)."""
    return ModelSpec(b=make_coef("constant", 0.0), sigma=make_coef("constant", 1.0),
                     h=make_coef("identity"), f=make_coef("identity"),
                     x0=0.0, T=1.0, k=0.0)


@pytest.fixture(scope="session")
def grid50():
    return build_time_grid(1.0, 50)


def mc_se(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=float).ravel()
    return float(x.std(ddof=1) / np.sqrt(x.size))
