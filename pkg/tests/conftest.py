import numpy as np
import pytest

from surrogate_services.experiments.sampling import sample_parameters


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def unit_field():
    return (1.0, 1.0, 1.0, 1.0)


@pytest.fixture
def parameters():
    """A few draws from the parameter box, reused across modules."""
    return sample_parameters(3, seed=7)
