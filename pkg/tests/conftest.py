import numpy as np
import pytest

from srafl import fields


@pytest.fixture
def tiny_fp():
    return fields.tiny_field()


@pytest.fixture
def small_fp():
    return fields.small_field()


@pytest.fixture
def default_fp():
    return fields.default_field()


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
