import numpy as np
import pytest

from strataplan.popgen import PopulationConfig, synthesize


@pytest.fixture(scope="session")
def small_pop():
    """Cheap shared population: 5k units, 10 strata, 3 domains."""
    cfg = PopulationConfig(n_units=5_000, n_strata=10, n_domains=3, seed=424242)
    return synthesize(cfg)


@pytest.fixture(scope="session")
def desk_pop():
    """Desk-scale population used by the heavier statistical tests."""
    cfg = PopulationConfig(n_units=100_000, n_strata=50, n_domains=10, seed=20260301)
    return synthesize(cfg)


def assert_close(actual, expected, rel=1e-12, abs_tol=0.0):
    assert np.isclose(actual, expected, rtol=rel, atol=abs_tol), (actual, expected)
