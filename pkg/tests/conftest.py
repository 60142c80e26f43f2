import numpy as np
import pytest

from lmrasch import CovariateSpec, FitConfig, ItemDesign, SimSpec, fit, simulate
from tests.oracle import separated_truth


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def quick_config():
    return FitConfig(max_iters=500, tol=1e-9, n_random_starts=1, threads=1)


@pytest.fixture(scope="session")
def simulated():
    """A simulated (k1=2, k2=2) dataset with one linked item and covariates at both levels."""
    design = ItemDesign(((1, 2, 3, 4), (1, 5, 6, 7), (8, 9, 10, 11)))
    design, truth = separated_truth(2, 2, design, p_c=1, p_i=1)
    spec = SimSpec(
        design=design,
        truth=truth,
        H=40,
        cluster_size_range=(4, 8),
        cluster_covariates=(CovariateSpec("school_type", "bernoulli", p=0.5),),
        subject_covariates=(CovariateSpec("education", "normal"),),
        seed=11,
        missing_rate=0.05,
    )
    dataset, latent = simulate(spec)
    return spec, dataset, latent


@pytest.fixture(scope="session")
def fitted(simulated):
    spec, dataset, _ = simulated
    config = FitConfig(max_iters=500, tol=1e-10, n_random_starts=1)
    return fit(spec.design, dataset, 2, 2, config)
