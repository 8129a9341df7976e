import numpy as np
import pytest

from openfield.field import FieldConfig, init_params
from openfield.scenegen import Primitive, SceneSpec, generate_scene


@pytest.fixture
def unit_sphere_scene():
    spec = SceneSpec(
        bbox_min=(-2.0, -2.0, -6.0), bbox_max=(2.0, 2.0, 2.0),
        primitives=[Primitive(shape="sphere", center=(0.0, 0.0, 0.0),
                              radius=1.0, class_id=0, albedo=(1.0, 0.0, 0.0))],
        background_color=(0.0, 0.0, 0.0))
    return generate_scene(spec)


@pytest.fixture
def two_box_scene():
    spec = SceneSpec(
        bbox_min=(0.0, 0.0, 0.0), bbox_max=(4.0, 4.0, 3.0),
        primitives=[
            Primitive(shape="box", center=(2.0, 2.0, 0.2),
                      extents=(3.6, 3.6, 0.4), class_id=0,
                      albedo=(0.5, 0.5, 0.5)),
            Primitive(shape="box", center=(2.0, 2.0, 1.0),
                      extents=(0.8, 0.8, 0.8), class_id=1,
                      albedo=(0.9, 0.1, 0.1)),
        ],
        background_color=(0.0, 0.0, 0.0))
    return generate_scene(spec)


@pytest.fixture
def small_field():
    config = FieldConfig(
        bbox_min=np.zeros(3), bbox_max=np.array([1.0, 1.0, 1.0]),
        density_resolution=(5, 4, 6), color_resolution=(4, 4, 4),
        feature_resolution=(3, 5, 4), feature_dim=6,
        background_color=np.array([0.1, 0.2, 0.3]))
    return init_params(config, seed=7)


def randomize_field(params, seed=0, scale=1.0):
    rng = np.random.default_rng(seed)
    params.density[:] = rng.normal(scale=scale, size=params.density.shape)
    params.color[:] = rng.normal(scale=scale, size=params.color.shape)
    params.feature[:] = rng.normal(scale=scale, size=params.feature.shape)
    return params
