import numpy as np
import pytest

from sdfshade import fields, scene


@pytest.fixture
def sphere():
    return fields.SphereSdf(0.5)


@pytest.fixture
def split_material():
    """Metallic gold upper hemisphere, matte red lower."""
    return fields.HemispherePbr((0, 0, 1),
                                [1.0, 0.77, 0.34, 1.0, 0.3],
                                [0.7, 0.25, 0.2, 0.0, 0.9])


@pytest.fixture
def gray_material():
    return fields.ConstantPbr(np.array([0.5, 0.5, 0.5, 0.0, 1.0]))


@pytest.fixture
def light():
    return scene.DirectionalLight((0.3, 0.2, 0.9), (1.0, 1.0, 1.0))


@pytest.fixture
def cam48():
    return scene.canonical_cameras(2.7, 0.7, 48)[0]


@pytest.fixture
def cfg_fast():
    return scene.RenderConfig(n_ray=48, tile_size=24, bound_radius=0.8,
                              jitter=True, seed=0)


@pytest.fixture
def cfg_uniform():
    return scene.RenderConfig(n_ray=64, tile_size=24, bound_radius=0.8,
                              jitter=False, seed=0)


@pytest.fixture
def grid_pair():
    rng = np.random.default_rng(11)
    sdf = fields.GridSdf.sphere_init(16, 0.5)
    sdf.values += rng.normal(0.0, 0.01, sdf.values.shape)
    pbr = fields.GridPbr(rng.uniform(0.1, 0.9, (16, 16, 16, 5)))
    return sdf, pbr
