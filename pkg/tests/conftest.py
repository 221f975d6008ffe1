import numpy as np
import pytest
from hypothesis import HealthCheck, settings

import coralsynth as cs

settings.register_profile(
    "default",
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_net():
    """3 convs with a pool and relus in between; enough structure for backprop."""
    spec = cs.NetworkSpec((
        cs.conv("a1", 4), cs.relu("ra1"),
        cs.conv("a2", 5), cs.relu("ra2"), cs.pool("pa"),
        cs.conv("b1", 6), cs.relu("rb1"),
    ))
    return cs.random_weights(spec, seed=11)


@pytest.fixture
def vgg_random():
    return cs.random_weights(cs.vgg16(), seed=0)


def random_image(rng, h=8, w=8, c=3, scale=30.0):
    return rng.normal(0.0, scale, size=(1, c, h, w))


@pytest.fixture
def make_image(rng):
    return lambda **kw: random_image(rng, **kw)
