import numpy as np
import pytest
from hypothesis import settings

from rads.config import RunConfig
from tests.helpers import make_series

settings.register_profile("fast", max_examples=50, deadline=None, derandomize=True)
settings.load_profile("fast")


@pytest.fixture
def noisy_cpu():
    """One hour of 5-second CPU samples around 30%."""
    rng = np.random.default_rng(7)
    return make_series(30 + rng.uniform(-5, 5, 720))


@pytest.fixture
def config(tmp_path):
    return RunConfig(store=tmp_path / "models", parallelism=2)
