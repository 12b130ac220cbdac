import numpy as np
import pytest

from ordrisk.synthgen import GenConfig, generate_cohort, write_dataset

COHORT_SEED = 0


@pytest.fixture(scope="session")
def default_cohort():
    """The default 1,000-patient cohort at a fixed seed; shared because generation takes seconds."""
    return generate_cohort(GenConfig(), COHORT_SEED)


@pytest.fixture(scope="session")
def default_dataset(default_cohort, tmp_path_factory):
    return write_dataset(default_cohort, tmp_path_factory.mktemp("cohort") / "data")


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    cohort = generate_cohort(GenConfig(n_patients=120), 3)
    return write_dataset(cohort, tmp_path_factory.mktemp("small") / "data")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
