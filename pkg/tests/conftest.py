import numpy as np
import pytest

from debiaslab.synthetic import SyntheticConfig, generate_synthetic

BIAS_RHO = {"ruler": 0.5, "dark_corner": 0.5, "ink": -0.5}
BIAS_MARGINAL = {"ruler": 0.4, "dark_corner": 0.35, "ink": 0.3}


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """Shared biased dataset, small enough for fast unit tests."""
    out = tmp_path_factory.mktemp("synth-small")
    config = SyntheticConfig(
        n_samples=160,
        image_size=48,
        seed=123,
        artifact_rho=BIAS_RHO,
        artifact_marginal=BIAS_MARGINAL,
    )
    manifest = generate_synthetic(config, out)
    return config, out, manifest


@pytest.fixture(scope="session")
def medium_dataset(tmp_path_factory):
    """Larger dataset for statistical assertions (correlations, splits)."""
    out = tmp_path_factory.mktemp("synth-medium")
    config = SyntheticConfig(
        n_samples=2000,
        image_size=32,
        seed=321,
        artifact_rho=BIAS_RHO,
        artifact_marginal=BIAS_MARGINAL,
    )
    manifest = generate_synthetic(config, out)
    return config, out, manifest


@pytest.fixture()
def rng():
    return np.random.default_rng(2024)
