import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from vfkmeans.core import Seed
from vfkmeans.data import SplitSpec, gen_mixed_gaussian, vsplit

settings.register_profile(
    "suite", deadline=None, max_examples=25,
    suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("suite")


@pytest.fixture
def small_views():
    """Two-party split of a small well-separated mixture, with labels."""
    view, labels = gen_mixed_gaussian(1200, 4, 3, seed=Seed(7))
    return vsplit(view, SplitSpec(parties=2), Seed(7)), view, np.asarray(labels)
