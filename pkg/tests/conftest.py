import numpy as np
import pytest

from mmfp.channel import Area, ArrayGeometry, EnvironmentConfig, RadioConfig, build_environment


def small_config(**kw):
    base = dict(
        num_clusters=3,
        mpcs_per_cluster=4,
        vr_radius_range=(3.0, 6.0),
        scatterer_radius_range=(10.0, 30.0),
        area=Area.centered(4.0),
        array=ArrayGeometry.linear(8, (-10.0, -10.0)),
        radio=RadioConfig(300e6, 20e6, 8),
    )
    base.update(kw)
    return EnvironmentConfig(**base)


@pytest.fixture
def small_env():
    return build_environment(7, small_config())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
