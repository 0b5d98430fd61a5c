"""Shared fixtures: one small deterministic phantom set reused across modules."""

import numpy as np
import pytest

from warpseg import data as datamod
from warpseg import preprocess


@pytest.fixture(scope="session")
def phantom_cfg():
    return datamod.PhantomConfig(side=64, seed=11)


@pytest.fixture(scope="session")
def small_cases(phantom_cfg):
    return [datamod.generate_phantom(phantom_cfg, i) for i in range(30)]


@pytest.fixture(scope="session")
def small_index(small_cases):
    return datamod.build_index(small_cases, seed=11)


@pytest.fixture(scope="session")
def prep_cases(small_cases):
    return [preprocess.preprocess_case(c, side=64) for c in small_cases]


@pytest.fixture(scope="session")
def prep_by_id(prep_cases):
    return {c.id: c for c in prep_cases}


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
