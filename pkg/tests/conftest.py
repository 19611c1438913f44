import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from geosdg import vit

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def tiny_cfg():
    """Two blocks, dim 16: small enough for exhaustive finite differences."""
    return vit.ModelConfig(image_size=8, bands=2, patch_size=4, depth=2, dim=16, heads=2, proto_count=8)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
