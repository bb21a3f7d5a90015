"""Coarse-to-fine optimisation of the SVE-conditioned field.

The coarse stage samples pixels uniformly and anchors geometry to the
pseudo-depth (surface points should have zero sdf, rendered depth should match).
The fine stage samples pixels by region through the adaptive sampler and feeds
per-region guidance losses back into its weights.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import sampler as smp
from .fields import NetConfig, SVEField, init_params
from .renderer import RenderConfig, RenderOutput, generate_rays, render_rays

log = logging.getLogger(__name__)

BCE_CLAMP = 1e-6
DEPTH_MODES = ("none", "init_only", "full")
LOG_FIELDS = ("step", "stage", "total", "rgb", "mask_bce", "eikonal", "depth", "surface_sdf")


class CheckpointMismatch(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lambda1: float = 1.0
    lambda2: float = 0.1
    coarse_steps: int = 2000
    fine_steps: int = 20000
    rays_per_step: int = 512
    learning_rate: float = 5e-4
    learning_rate_final: float = 5e-5
    w_rgb: float = 1.0
    w_mask: float = 0.1
    w_eik: float = 0.1
    w_depth: float = 0.5
    w_surf: float = 1.0
    use_sve: bool = True
    compress_sve: bool = True
    depth_supervision: str = "init_only"
    use_ais: bool = True
    ais_alpha: float = 0.01
    ais_mode: str = "area"  # sampling mass w_i * A_i; "weight" uses w_i alone
    region_reduction: str = "sum"  # or "mean" over a region's sampled pixels
    checkpoint_every: int = 0
    seed: int = 0
    net: NetConfig = field(default_factory=NetConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    eval_render: RenderConfig = field(
        default_factory=lambda: RenderConfig(n_coarse=128, n_importance=64, up_sample_steps=4))

    def __post_init__(self):
        if isinstance(self.net, dict):
            self.net = NetConfig(**self.net)
        if isinstance(self.render, dict):
            self.render = RenderConfig(**_tuples(self.render))
        if isinstance(self.eval_render, dict):
            self.eval_render = RenderConfig(**_tuples(self.eval_render))
        if self.depth_supervision not in DEPTH_MODES:
            raise ValueError(f"depth_supervision must be one of {DEPTH_MODES}")
        weights = (self.lambda1, self.lambda2, self.w_rgb, self.w_mask, self.w_eik, self.w_depth, self.w_surf)
        if min(weights) < 0 or self.coarse_steps < 0 or self.fine_steps < 0:
            raise ValueError("loss weights and step counts must be non-negative")

    def net_config(self) -> NetConfig:
        """Network configuration with the ablation switches applied."""
        n_sve = self.net.n_sve if self.compress_sve else self.net.n_expr
        return dataclasses.replace(self.net, use_sve=self.use_sve, compress_sve=self.compress_sve,
                                   n_sve=n_sve)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("checkpoint_every")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def _tuples(d):
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def toy_config(**overrides) -> TrainConfig:
    """Desk-scale preset for the 4-dimensional expression toy scenes."""
    net = NetConfig(n_expr=4, n_sve=2, pe_levels=4, gen_width=32, shortcut_width=32, deform_width=32,
                    sdf_width=64, feature_width=64, color_width=64, hidden_activation="relu")
    cfg = TrainConfig(
        coarse_steps=200, fine_steps=800, rays_per_step=512, learning_rate=1e-3,
        learning_rate_final=1e-4, net=net,
        render=RenderConfig(n_coarse=32, n_importance=16, up_sample_steps=2),
        eval_render=RenderConfig(n_coarse=64, n_importance=32, up_sample_steps=2),
    )
    return dataclasses.replace(cfg, **overrides)


@dataclass
class LossBreakdown:
    total: float
    rgb: float = 0.0
    mask_bce: float = 0.0
    eikonal: float = 0.0
    depth: float = 0.0
    surface_sdf: float = 0.0
    term_weights: dict = field(default_factory=dict)
    per_region: np.ndarray | None = None
    per_region_render: np.ndarray | None = None
    per_region_depth: np.ndarray | None = None
    stage: str = ""
    step: int = 0

    def weighted_sum(self) -> float:
        return sum(self.term_weights.get(k, 0.0) * getattr(self, k)
                   for k in ("rgb", "mask_bce", "eikonal", "depth", "surface_sdf"))

    def row(self) -> dict:
        return {k: getattr(self, k) for k in LOG_FIELDS}


def bce(pred, target):
    p = pred.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP)
    return -(target * torch.log(p) + (1.0 - target) * torch.log(1.0 - p))


def guidance_loss(pred_rgb, pred_mask, pred_depth, rgb, mask, depth, regions, n_regions, lambda1,
                  lambda2, reduction="sum"):
    """Per-region guidance losses ``(L, L_render, L_depth)``, each of length ``n_regions``.

    Per pixel: render = M |C_hat - C|_1 + BCE(M_hat, M) with the L1 norm taken as
    the mean absolute channel difference; depth = M |D_hat - D|.
    """
    pred_rgb, rgb = np.asarray(pred_rgb, np.float64), np.asarray(rgb, np.float64)
    pred_mask, mask = np.asarray(pred_mask, np.float64), np.asarray(mask, np.float64)
    pred_depth, depth = np.asarray(pred_depth, np.float64), np.asarray(depth, np.float64)
    regions = np.asarray(regions, dtype=np.int64)
    n = len(regions)
    if not (len(pred_rgb) == len(rgb) == len(pred_mask) == len(mask) == len(pred_depth)
            == len(depth) == n):
        raise ValueError("prediction and target pixel sets are misaligned")
    p = np.clip(pred_mask, BCE_CLAMP, 1.0 - BCE_CLAMP)
    pix_bce = -(mask * np.log(p) + (1.0 - mask) * np.log(1.0 - p))
    pix_render = mask * np.abs(pred_rgb - rgb).mean(-1) + pix_bce
    pix_depth = mask * np.abs(pred_depth - depth)
    l_render = np.bincount(regions, weights=pix_render, minlength=n_regions)
    l_depth = np.bincount(regions, weights=pix_depth, minlength=n_regions)
    if reduction == "mean":
        counts = np.maximum(np.bincount(regions, minlength=n_regions), 1)
        l_render, l_depth = l_render / counts, l_depth / counts
    return lambda1 * l_render + lambda2 * l_depth, l_render, l_depth


def frame_targets(frame, pixels, dtype=torch.float32):
    u, v = pixels[:, 0], pixels[:, 1]
    return {
        "rgb": torch.as_tensor(frame.rgb[v, u], dtype=dtype),
        "mask": torch.as_tensor(frame.mask[v, u], dtype=dtype),
        "depth": torch.as_tensor(frame.pseudo_depth[v, u], dtype=dtype),
        "region": frame.region_map[v, u],
    }


def stage_terms(config: TrainConfig, stage: str) -> dict:
    w = {"rgb": config.w_rgb, "mask_bce": config.w_mask, "eikonal": config.w_eik,
         "depth": 0.0, "surface_sdf": 0.0}
    ds = config.depth_supervision
    if (stage == "coarse" and ds != "none") or (stage == "fine" and ds == "full"):
        w["depth"], w["surface_sdf"] = config.w_depth, config.w_surf
    return w


def compute_loss(model: SVEField, frame, pixels, config: TrainConfig, stage: str, rng=None,
                 t_values=None, render_cfg=None):
    """Parameter-update loss of one stage on the given pixels.

    Returns ``(total, LossBreakdown, RenderOutput, targets)``; ``total`` is a
    differentiable tensor, the breakdown holds plain floats.
    """
    render_cfg = render_cfg or config.render
    dtype = next(model.parameters()).dtype
    pixels = np.asarray(pixels, dtype=np.int64)[:, :2]
    rays = generate_rays(frame.camera, pixels, render_cfg.bound_radius, dtype=dtype)
    eps = torch.as_tensor(frame.expression, dtype=dtype)
    out = render_rays(model, rays, eps, render_cfg, rng=rng, create_graph=True, keep_internals=True,
                      t_values=t_values)
    tgt = frame_targets(frame, pixels, dtype)
    weights = stage_terms(config, stage)
    terms = {
        "rgb": (out.rgb - tgt["rgb"]).abs().mean(-1).mean(),
        "mask_bce": bce(out.mask, tgt["mask"]).mean(),
        "eikonal": ((out.gradients.norm(dim=-1) - 1.0) ** 2).mean(),
    }
    zero = torch.zeros((), dtype=dtype)
    terms["depth"] = (tgt["mask"] * (out.depth - tgt["depth"]).abs()).mean() if weights["depth"] else zero
    if weights["surface_sdf"] and tgt["mask"].sum() > 0:
        on = tgt["mask"] > 0.5
        surface = rays.origins[on] + tgt["depth"][on, None] * rays.dirs[on]
        terms["surface_sdf"] = model.sdf(surface, eps).abs().mean()
    else:
        terms["surface_sdf"] = zero
    total = sum(weights[k] * terms[k] for k in terms)
    bd = LossBreakdown(total=float(total.detach()), term_weights=weights, stage=stage,
                       **{k: float(v.detach()) for k, v in terms.items()})
    return total, bd, out, tgt


class Trainer:
    """Owns model, optimiser, sampler state and the numpy RNG of one run."""

    def __init__(self, dataset, config: TrainConfig, out_dir=None):
        self.dataset = dataset
        self.config = config
        self.out_dir = Path(out_dir) if out_dir is not None else None
        net = config.net_config()
        if net.n_expr != dataset.n_expr:
            raise CheckpointMismatch(
                f"config hash mismatch: network expects K={net.n_expr}, dataset has K={dataset.n_expr}")
        self.model = init_params(config.seed, net)
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=config.learning_rate)
        self.rng = np.random.default_rng(config.seed)
        self.weights = smp.init_weights(dataset.n_regions, config.ais_alpha)
        self.step = 0
        self.train_ids = dataset.manifest.ids("train")
        self._order: list = []
        self.history: list = []
        render = dataclasses.replace(config.render, bound_radius=dataset.bound_radius)
        self.render_cfg = render

    @property
    def total_steps(self) -> int:
        return self.config.coarse_steps + self.config.fine_steps

    def stage_at(self, step) -> str:
        return "coarse" if step < self.config.coarse_steps else "fine"

    def learning_rate(self, step) -> float:
        c = self.config
        if self.total_steps <= 1:
            return c.learning_rate
        return c.learning_rate * (c.learning_rate_final / c.learning_rate) ** (step / (self.total_steps - 1))

    def next_frame(self):
        if not self._order:
            self._order = [int(i) for i in self.rng.permutation(self.train_ids)]
        return self.dataset.frames[self._order.pop(0)]

    def _apply(self, total):
        for g in self.optimizer.param_groups:
            g["lr"] = self.learning_rate(self.step)
        self.optimizer.zero_grad(set_to_none=True)
        total.backward()
        self.optimizer.step()

    def coarse_step(self, frame) -> LossBreakdown:
        pix = smp.sample_uniform(frame.region_map, self.config.rays_per_step, self.rng)
        total, bd, _, _ = compute_loss(self.model, frame, pix, self.config, "coarse", self.rng,
                                       render_cfg=self.render_cfg)
        self._apply(total)
        return bd

    def fine_step(self, frame) -> LossBreakdown:
        c = self.config
        if c.use_ais:
            pix = smp.sample_pixels(frame.region_map, self.weights, c.rays_per_step, self.rng, c.ais_mode)
        else:
            pix = smp.sample_uniform(frame.region_map, c.rays_per_step, self.rng)
        total, bd, out, tgt = compute_loss(self.model, frame, pix, c, "fine", self.rng,
                                           render_cfg=self.render_cfg)
        per, ren, dep = guidance_loss(
            out.rgb.detach().numpy(), out.mask.detach().numpy(), out.depth.detach().numpy(),
            tgt["rgb"].numpy(), tgt["mask"].numpy(), tgt["depth"].numpy(), pix[:, 2],
            self.dataset.n_regions, c.lambda1, c.lambda2, c.region_reduction)
        bd.per_region, bd.per_region_render, bd.per_region_depth = per, ren, dep
        if c.use_ais:
            areas = smp.region_areas(frame.region_map, self.dataset.n_regions)
            self.weights = smp.update_weights(self.weights, per, areas)
        self._apply(total)
        return bd

    def train_step(self) -> LossBreakdown:
        frame = self.next_frame()
        stage = self.stage_at(self.step)
        bd = self.coarse_step(frame) if stage == "coarse" else self.fine_step(frame)
        bd.step = self.step
        self.step += 1
        return bd

    def run(self, log_every: int = 100):
        c = self.config
        loss_log = weight_log = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            resumed = self.step > 0
            loss_log = self.out_dir / "train_log.csv"
            if not resumed:
                with open(loss_log, "w", newline="") as fh:
                    csv.writer(fh).writerow(LOG_FIELDS)
            weight_log = smp.WeightLog(self.out_dir / "weights.csv", self.weights.n, append=resumed)
        while self.step < self.total_steps:
            bd = self.train_step()
            self.history.append(bd)
            if loss_log is not None:
                with open(loss_log, "a", newline="") as fh:
                    csv.writer(fh).writerow([bd.row()[k] for k in LOG_FIELDS])
                if bd.stage == "fine" and c.use_ais:
                    weight_log.write(self.weights)
            if log_every and self.step % log_every == 0:
                log.info("step %d %s total=%.5f rgb=%.5f inv_std=%.1f", self.step, bd.stage, bd.total,
                         bd.rgb, float(self.model.inv_std.detach()))
            if self.out_dir is not None and c.checkpoint_every and self.step % c.checkpoint_every == 0:
                self.save(self.out_dir)
        if self.out_dir is not None:
            self.save(self.out_dir)
        return self.history

    # -- persistence -----------------------------------------------------

    def save(self, directory):
        from .checkpoint import save_checkpoint

        return save_checkpoint(self, directory)

    def load(self, directory):
        from .checkpoint import load_checkpoint

        load_checkpoint(self, directory)
        return self


def train(dataset, config: TrainConfig, out_dir=None, log_every: int = 100) -> Trainer:
    """Run (or resume) the coarse and fine stages; returns the finished trainer."""
    trainer = Trainer(dataset, config, out_dir)
    if out_dir is not None and (Path(out_dir) / "checkpoint.json").exists():
        trainer.load(out_dir)
    trainer.run(log_every)
    return trainer


ABLATIONS = {
    "w/o SVE": {"use_sve": False},
    "SVE w/o compress": {"compress_sve": False},
    "w/o DS": {"depth_supervision": "none"},
    "DS-full": {"depth_supervision": "full"},
    "w/o AIS": {"use_ais": False},
    "ours": {},
}


@dataclass
class AblationResult:
    rows: dict  # variant -> {"L1", "PSNR", "SSIM"} medians over seeds
    geometry: dict  # variant -> median mean |analytic sdf| at mesh vertices
    per_seed: dict  # variant -> list of per-seed dicts

    def table(self) -> list:
        return [[name, r["L1"], r["PSNR"], r["SSIM"]] for name, r in self.rows.items()]

    def markdown(self) -> str:
        lines = ["| | L1↓ | PSNR↑ | SSIM↑ | LPIPS↓ | geometry err↓ |", "|---|---|---|---|---|---|"]
        for name, r in self.rows.items():
            lines.append(f"| {name} | {r['L1']:.4f} | {r['PSNR']:.3f} | {r['SSIM']:.3f} | n/a "
                         f"| {self.geometry[name]:.4f} |")
        return "\n".join(lines) + "\n"


def _stored_metrics(run_dir, key, mesh_resolution):
    # metrics written by an earlier suite run for the same config, scene and grid
    path = Path(run_dir) / "metrics.json" if run_dir is not None else None
    if path is None or not path.exists():
        return None
    d = json.loads(path.read_text())
    if d.get("key") != list(key) or d.get("mesh_resolution") != mesh_resolution:
        return None
    return d["metrics"]


def run_ablation_suite(dataset, base_config: TrainConfig, seeds=(0, 1, 2), out_dir=None,
                       variants=None, mesh_resolution: int = 64, cache: dict | None = None) -> AblationResult:
    """Train every ablation variant for every seed and evaluate on the held-out split."""
    from .evaluate import evaluate, mesh_geometry_error

    variants = variants or list(ABLATIONS)
    per_seed = {}
    for name in variants:
        per_seed[name] = []
        for seed in seeds:
            cfg = dataclasses.replace(base_config, seed=seed, **ABLATIONS[name])
            key = (cfg.config_hash(), dataset.manifest.scene_hash)
            if cache is not None and key in cache:
                per_seed[name].append(cache[key])
                continue
            run_dir = None
            if out_dir is not None:
                run_dir = Path(out_dir) / f"{name.replace('/', '').replace(' ', '_')}_s{seed}"
            stored = _stored_metrics(run_dir, key, mesh_resolution)
            if stored is not None:
                res = stored
            else:
                trainer = train(dataset, cfg, run_dir, log_every=0)
                rep = evaluate(trainer.model, dataset, "heldout", trainer.config.eval_render)
                geo = mesh_geometry_error(trainer.model, dataset, resolution=mesh_resolution)
                res = {"L1": rep.mae, "PSNR": rep.psnr, "SSIM": rep.ssim, "geometry": geo, "seed": seed}
                if run_dir is not None:
                    (run_dir / "metrics.json").write_text(json.dumps(
                        {"key": list(key), "mesh_resolution": mesh_resolution, "metrics": res}, indent=2))
            log.info("ablation %s seed %d: %s", name, seed, res)
            per_seed[name].append(res)
            if cache is not None:
                cache[key] = res
    rows, geometry = {}, {}
    for name, results in per_seed.items():
        rows[name] = {m: float(np.median([r[m] for r in results])) for m in ("L1", "PSNR", "SSIM")}
        geometry[name] = float(np.median([r["geometry"] for r in results]))
    result = AblationResult(rows, geometry, per_seed)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "ablation.md").write_text(result.markdown())
        (Path(out_dir) / "ablation.json").write_text(json.dumps(
            {"rows": rows, "geometry": geometry, "per_seed": per_seed}, indent=2, default=float))
    return result
