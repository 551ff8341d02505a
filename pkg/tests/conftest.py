import numpy as np
import pytest

import regbench as rb


@pytest.fixture(scope="session")
def phantom_case():
    """One clean (no CBCT) default phantom shared across test modules."""
    return rb.make_phantom(seed=0, dims=(96, 96, 96), deform_magnitude=5.0)


@pytest.fixture(scope="session")
def small_case():
    """A fast 48-cube phantom with a gentler deformation for CLI tests."""
    return rb.make_phantom(seed=7, dims=(48, 48, 48), deform_magnitude=3.0)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
