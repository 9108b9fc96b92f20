import numpy as np
import pytest

from hdsplitplot import SplitPlotDesign, ar1_covariance


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def make_ar_design(d, n, rhos=(0.6, 0.65), means=None):
    """Two-group (or len(n)-group) design with AR covariances."""
    a = len(n)
    covs = np.stack([ar1_covariance(d, rhos[i % len(rhos)]) for i in range(a)])
    if means is None:
        means = np.zeros((a, d))
    return SplitPlotDesign(means=means, covariances=covs, n=n)


@pytest.fixture
def two_group_design():
    return make_ar_design(d=4, n=(6, 8))
