"""Spatially-varying expression conditioned SDF radiance fields, at toy scale.

Modules: :mod:`scene` (synthetic analytic scenes and datasets), :mod:`fields`
(generation / deformation / SDF-colour networks), :mod:`renderer` (SDF volume
rendering), :mod:`sampler` (region-weighted pixel sampling), :mod:`trainer`
(coarse-to-fine optimisation and ablations), :mod:`evaluate` and :mod:`cli`.
"""
from ._accel import HAS_NUMBA, backend
from .fields import NetConfig, SVEField, init_params
from .renderer import AnalyticField, RenderConfig, render_image
from .scene import Dataset, DatasetConfig, SceneConfig, generate_dataset, make_scene
from .trainer import TrainConfig, toy_config, train

__version__ = "0.1.0"

__all__ = [
    "HAS_NUMBA", "backend", "NetConfig", "SVEField", "init_params", "AnalyticField",
    "RenderConfig", "render_image", "Dataset", "DatasetConfig", "SceneConfig",
    "generate_dataset", "make_scene", "TrainConfig", "toy_config", "train",
]
