"""Held-out evaluation, reenactment and mesh-vs-oracle geometry error."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
import torch

from . import metrics
from . import scene as sc
from .renderer import RenderConfig, extract_mesh, render_image


class ConfigMismatch(RuntimeError):
    pass


@dataclass
class MetricsReport:
    mae: float
    psnr: float
    ssim: float
    n_frames: int
    split: str
    lpips: float | None = None
    per_frame: list = dataclasses.field(default_factory=list)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def check_compatible(model, dataset):
    if model.cfg.n_expr != dataset.n_expr:
        raise ConfigMismatch(
            f"config hash mismatch: checkpoint expects K={model.cfg.n_expr}, dataset has K={dataset.n_expr}")


def _render_cfg(cfg, dataset):
    return dataclasses.replace(cfg or RenderConfig(n_coarse=128, n_importance=64),
                               bound_radius=dataset.bound_radius)


def evaluate(model, dataset, split="heldout", render_cfg: RenderConfig | None = None,
             masked: bool = False) -> MetricsReport:
    """Render every frame of ``split`` and average MAE / PSNR / SSIM over frames."""
    check_compatible(model, dataset)
    cfg = _render_cfg(render_cfg, dataset)
    rows = []
    for frame in dataset.split(split):
        pred = render_image(model, frame.camera, frame.expression, cfg)["rgb"]
        gt = frame.rgb
        if masked:
            pred = np.where(frame.mask[..., None] > 0, pred, gt)
        rows.append({"frame_id": frame.frame_id, "mae": metrics.mae(pred, gt),
                     "psnr": metrics.psnr(pred, gt), "ssim": metrics.ssim(pred, gt)})
    if not rows:
        return MetricsReport(float("nan"), float("nan"), float("nan"), 0, split)
    return MetricsReport(
        mae=float(np.mean([r["mae"] for r in rows])),
        psnr=float(np.mean([r["psnr"] for r in rows])),
        ssim=float(np.mean([r["ssim"] for r in rows])),
        n_frames=len(rows), split=split, per_frame=rows,
    )


def reenact(model, expressions, camera, render_cfg: RenderConfig | None = None, bound_radius=1.6) -> list:
    """Render one frame per expression vector under a fixed camera."""
    cfg = dataclasses.replace(render_cfg or RenderConfig(), bound_radius=bound_radius)
    k = model.cfg.n_expr if hasattr(model, "cfg") else model.scene.n_expr
    out = []
    for eps in expressions:
        eps = np.asarray(eps, dtype=np.float64)
        if eps.shape != (k,):
            raise ValueError(f"expression length {eps.shape} does not match K={k}")
        out.append(render_image(model, camera, eps, cfg))
    return out


def mesh_geometry_error(model, dataset, resolution: int = 64, split: str = "heldout",
                        max_frames: int = 4) -> float:
    """Mean |analytic sdf| at extracted mesh vertices, averaged over frames of ``split``."""
    errs = []
    for frame in dataset.split(split)[:max_frames]:
        verts, _ = extract_mesh(model, torch.as_tensor(frame.expression, dtype=torch.float32),
                                resolution, dataset.bound_radius)
        if len(verts) == 0:
            return float("inf")
        errs.append(np.abs(sc.analytic_sdf(dataset.scene, verts, frame.expression)).mean())
    return float(np.mean(errs))


def sphere_silhouette_area(camera: sc.CameraModel, radius: float) -> float:
    """Pixel area of a centred sphere's image disc for a camera looking at its center."""
    d = np.linalg.norm(camera.translation)
    r_img = camera.fx * radius / np.sqrt(d * d - radius * radius)
    return float(np.pi * r_img * r_img)
