import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("lccalib", deadline=None, max_examples=60, derandomize=True)
settings.load_profile("lccalib")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_rotation_vector(rng, max_angle=np.pi - 0.01):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return axis * rng.uniform(1e-6, max_angle)
