import numpy as np
import pytest

from audiotext import autodiff as ad


@pytest.fixture(autouse=True)
def float32_mode():
    ad.set_mode("float32")
    yield
    ad.set_mode("float32")


@pytest.fixture
def float64_mode():
    ad.set_mode("float64")
    yield
    ad.set_mode("float32")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
