import dataclasses

import numpy as np
import pytest
import torch

from sveavatar import scene as sc
from sveavatar.fields import NetConfig
from sveavatar.renderer import RenderConfig
from sveavatar.trainer import toy_config


def tiny_net(**kw):
    base = dict(n_expr=4, n_sve=2, pe_levels=2, gen_width=8, gen_layers=8, shortcut_width=8,
                deform_width=8, sdf_width=16, sdf_layers=2, feature_width=8, color_width=8,
                color_layers=2, hidden_activation="relu")
    base.update(kw)
    return NetConfig(**base)


def tiny_train_config(**kw):
    cfg = toy_config(net=tiny_net(), rays_per_step=32, coarse_steps=3, fine_steps=3,
                     render=RenderConfig(n_coarse=8, n_importance=4, up_sample_steps=1),
                     eval_render=RenderConfig(n_coarse=8, n_importance=4, up_sample_steps=1))
    return dataclasses.replace(cfg, **kw)


@pytest.fixture(scope="session")
def toy_scene():
    return sc.make_scene(0)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("small_ds")
    sc.generate_dataset(sc.make_scene(0), root, sc.DatasetConfig(n_frames=10, width=16, height=16))
    return sc.Dataset(root)


@pytest.fixture
def f64():
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(prev)


def sphere_scene(radius=1.0, k=2):
    return sc.SceneDefinition(base_radius=radius, bump_centers=np.zeros((0, 3)),
                              bump_widths=np.zeros(0), amplitude_matrix=np.zeros((0, k)))
