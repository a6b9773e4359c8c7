import numpy as np
import pytest

from lensctr.cli import TINY_MODEL, TINY_SCHEMA, tiny_batch
from lensctr.config import FeatureSchema


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_schema() -> FeatureSchema:
    return TINY_SCHEMA


@pytest.fixture
def tiny_model_cfg():
    return TINY_MODEL


@pytest.fixture
def make_batch():
    return tiny_batch
