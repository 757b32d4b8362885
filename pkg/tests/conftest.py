from dataclasses import replace

import pytest

from attkit.simulate import preset, simulate_cohort


@pytest.fixture(scope="session")
def paper_params():
    return preset("paper-1cov")


@pytest.fixture(scope="session")
def small_params(paper_params):
    """Scaled-down scenario for fast tests."""
    return replace(paper_params, n=200, seed=42)


@pytest.fixture(scope="session")
def small_panel(small_params):
    return simulate_cohort(small_params)
