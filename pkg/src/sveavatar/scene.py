"""Synthetic expression-driven scenes with an analytic signed distance oracle.

A scene is a sphere whose radius is modulated by ``M`` smooth angular bumps.
Bump amplitudes are linear in the per-frame expression vector, so every
frame's geometry is known in closed form and can be sphere traced to produce
ground-truth RGB, mask, pseudo-depth and region labels.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ._accel import HAS_NUMBA, maybe_njit

BACKGROUND_COLOR = (0.5, 0.5, 0.5)
BACKGROUND_LABEL = 0
LIGHT_DIR = np.array([-0.4, 0.6, 1.0]) / np.linalg.norm([-0.4, 0.6, 1.0])
AMBIENT = 0.35
DIFFUSE = 0.65
ALBEDO_RULES = ("radial_waves", "flat")

# fixed low-frequency texture basis for "radial_waves"
_WAVE_DIRS = np.array([[1.0, 0.4, 0.2], [-0.3, 1.0, 0.5], [0.2, -0.6, 1.0]])
_WAVE_PHASE = np.array([0.3, 1.7, 2.9])
_WAVE_FREQ = 2.2


class SceneError(ValueError):
    pass


@dataclass
class SceneConfig:
    n_bumps: int = 3
    n_expr: int = 4
    base_radius: float = 1.0
    width_range: tuple = (0.35, 0.55)
    amplitude: float = 0.12  # per-unit-expression amplitude of a bump's own driver
    cross_talk: float = 0.02  # amplitude of the off-diagonal couplings
    expression_range: float = 1.0  # training expressions live in [-r, r]^K
    albedo: str = "radial_waves"
    center_cone_deg: float = 50.0  # bumps face the +z camera side
    min_separation_deg: float = 35.0
    bound_scale: float = 1.6


@dataclass
class SceneDefinition:
    base_radius: float
    bump_centers: np.ndarray  # (M, 3) unit vectors
    bump_widths: np.ndarray  # (M,) angular widths in radians
    amplitude_matrix: np.ndarray  # (M, K)
    albedo_fn_id: str = "radial_waves"
    expression_range: float = 1.0
    bound_radius: float | None = None

    def __post_init__(self):
        self.bump_centers = np.asarray(self.bump_centers, dtype=np.float64).reshape(-1, 3)
        self.bump_widths = np.asarray(self.bump_widths, dtype=np.float64).reshape(-1)
        self.amplitude_matrix = np.asarray(self.amplitude_matrix, dtype=np.float64)
        m = len(self.bump_centers)
        if self.amplitude_matrix.ndim != 2 or self.amplitude_matrix.shape[0] != m:
            raise SceneError("amplitude_matrix must have shape (M, K)")
        if len(self.bump_widths) != m:
            raise SceneError("one width per bump required")
        if m and not np.allclose(np.linalg.norm(self.bump_centers, axis=1), 1.0, atol=1e-9):
            raise SceneError("bump centers must have unit norm")
        if np.any(self.bump_widths <= 0):
            raise SceneError("bump widths must be positive")
        if self.albedo_fn_id not in ALBEDO_RULES:
            raise SceneError(f"unknown albedo rule {self.albedo_fn_id!r}")
        if self.max_total_amplitude() >= self.base_radius / 2:
            raise SceneError("scene would self-intersect")
        if self.bound_radius is None:
            self.bound_radius = 1.6 * self.base_radius

    @property
    def n_bumps(self) -> int:
        return len(self.bump_centers)

    @property
    def n_expr(self) -> int:
        return self.amplitude_matrix.shape[1]

    @property
    def n_regions(self) -> int:
        # a bump-free sphere still gets one foreground label
        return max(self.n_bumps, 1) + 1

    def max_total_amplitude(self) -> float:
        # sup over the box [-r, r]^K of sum_m |a_m(eps)| is bounded by r * sum |A|
        return float(self.expression_range * np.abs(self.amplitude_matrix).sum())

    def amplitudes(self, eps) -> np.ndarray:
        eps = np.asarray(eps, dtype=np.float64).reshape(-1)
        if eps.shape[0] != self.n_expr:
            raise SceneError(f"expression has length {eps.shape[0]}, scene expects {self.n_expr}")
        return self.amplitude_matrix @ eps

    def to_dict(self) -> dict:
        return {
            "base_radius": float(self.base_radius),
            "bump_centers": self.bump_centers.tolist(),
            "bump_widths": self.bump_widths.tolist(),
            "amplitude_matrix": self.amplitude_matrix.tolist(),
            "albedo_fn_id": self.albedo_fn_id,
            "expression_range": float(self.expression_range),
            "bound_radius": float(self.bound_radius),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneDefinition":
        return cls(**d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray  # camera -> world
    translation: np.ndarray  # camera center in world coordinates
    width: int
    height: int

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.validate()

    def validate(self):
        r = self.rotation
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-6) or abs(np.linalg.det(r) - 1.0) > 1e-6:
            raise ValueError("camera rotation must be orthonormal with determinant +1")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @classmethod
    def look_at(cls, eye, target=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0), width=48, height=48,
                fov_deg=48.0) -> "CameraModel":
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, up)
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        rot = np.stack([right, down, fwd], axis=1)
        f = 0.5 * width / math.tan(math.radians(fov_deg) / 2)
        return cls(fx=f, fy=f, cx=width / 2, cy=height / 2, rotation=rot, translation=eye,
                   width=width, height=height)

    def to_dict(self) -> dict:
        return {
            "fx": float(self.fx), "fy": float(self.fy), "cx": float(self.cx), "cy": float(self.cy),
            "rotation": self.rotation.tolist(), "translation": self.translation.tolist(),
            "width": int(self.width), "height": int(self.height),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        return cls(**d)

    def pixel_directions(self, us, vs) -> np.ndarray:
        us = np.asarray(us, dtype=np.float64)
        vs = np.asarray(vs, dtype=np.float64)
        local = np.stack([(us + 0.5 - self.cx) / self.fx, (vs + 0.5 - self.cy) / self.fy,
                          np.ones_like(us)], axis=-1)
        dirs = local @ self.rotation.T
        return dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)


@dataclass
class FrameRecord:
    frame_id: int
    rgb: np.ndarray  # (H, W, 3) float in [0, 1]
    mask: np.ndarray  # (H, W) float in {0, 1}
    pseudo_depth: np.ndarray  # (H, W) float32, 0 off the mask
    region_map: np.ndarray  # (H, W) int, BACKGROUND_LABEL off the mask
    expression: np.ndarray  # (K,)
    camera: CameraModel
    split: str = "train"


def make_scene(seed: int, config: SceneConfig | None = None) -> SceneDefinition:
    config = config or SceneConfig()
    if config.n_bumps < 1:
        raise SceneError("at least one bump is required")
    if config.n_expr < 1:
        raise SceneError("expression dimension must be >= 1")
    rng = np.random.default_rng(seed)
    cone = math.radians(config.center_cone_deg)
    min_sep = math.cos(math.radians(config.min_separation_deg))
    centers = []
    for _ in range(10000):
        if len(centers) == config.n_bumps:
            break
        # uniform on the spherical cap around +z
        z = rng.uniform(math.cos(cone), 1.0)
        phi = rng.uniform(0, 2 * math.pi)
        s = math.sqrt(1 - z * z)
        c = np.array([s * math.cos(phi), s * math.sin(phi), z])
        if all(c @ o < min_sep for o in centers):
            centers.append(c)
    if len(centers) < config.n_bumps:
        raise SceneError("could not place bumps with the requested separation")
    widths = rng.uniform(*config.width_range, size=config.n_bumps)
    amp = rng.uniform(-config.cross_talk, config.cross_talk, size=(config.n_bumps, config.n_expr))
    for m in range(config.n_bumps):
        sign = 1.0 if rng.random() < 0.5 else -1.0
        amp[m, m % config.n_expr] = sign * config.amplitude
    return SceneDefinition(
        base_radius=config.base_radius,
        bump_centers=np.array(centers),
        bump_widths=widths,
        amplitude_matrix=amp,
        albedo_fn_id=config.albedo,
        expression_range=config.expression_range,
        bound_radius=config.bound_scale * config.base_radius,
    )


# ---------------------------------------------------------------------------
# analytic geometry (vectorised numpy)

def _directions(p):
    r = np.linalg.norm(p, axis=-1, keepdims=True)
    safe = np.where(r > 0, r, 1.0)
    u = np.where(r > 0, p / safe, np.array([0.0, 0.0, 1.0]))
    return u, r[..., 0]


def _kernels(scene: SceneDefinition, u):
    cos = u @ scene.bump_centers.T
    return np.exp((cos - 1.0) / scene.bump_widths**2), cos


def surface_radius(scene: SceneDefinition, u, eps):
    """Radius of the deformed surface along unit directions ``u``."""
    k, _ = _kernels(scene, np.asarray(u, dtype=np.float64))
    return scene.base_radius + k @ scene.amplitudes(eps)


def analytic_sdf(scene: SceneDefinition, p, eps):
    """Signed distance proxy ``|p| - r(p/|p|)``; negative inside.

    ``p`` may be a single point or an ``(..., 3)`` array.  At the origin the
    direction is taken as +z by convention.
    """
    p = np.asarray(p, dtype=np.float64)
    u, r = _directions(p)
    out = r - surface_radius(scene, u, eps)
    return float(out) if out.ndim == 0 else out


def analytic_sdf_gradient(scene: SceneDefinition, p, eps):
    p = np.asarray(p, dtype=np.float64)
    u, r = _directions(p)
    a = scene.amplitudes(eps)
    k, cos = _kernels(scene, u)
    coef = a * k / scene.bump_widths**2  # (..., M)
    tangential = coef @ scene.bump_centers - (coef * cos).sum(-1, keepdims=True) * u
    return u - tangential / np.maximum(r, 1e-12)[..., None]


def albedo(scene: SceneDefinition, u):
    u = np.asarray(u, dtype=np.float64)
    if scene.albedo_fn_id == "flat":
        return np.broadcast_to(np.array([0.8, 0.55, 0.45]), u.shape).copy()
    return 0.55 + 0.3 * np.sin(_WAVE_FREQ * (u @ _WAVE_DIRS.T) + _WAVE_PHASE)


def shade(scene: SceneDefinition, p, eps):
    """Ground-truth color at surface points: albedo times fixed Lambertian light."""
    p = np.asarray(p, dtype=np.float64)
    n = analytic_sdf_gradient(scene, p, eps)
    n = n / np.linalg.norm(n, axis=-1, keepdims=True)
    u, _ = _directions(p)
    lam = AMBIENT + DIFFUSE * np.clip(n @ LIGHT_DIR, 0.0, None)
    return np.clip(albedo(scene, u) * lam[..., None], 0.0, 1.0)


def region_of(scene: SceneDefinition, p):
    """Foreground label of points: 1 + index of the nearest bump center."""
    u, _ = _directions(np.asarray(p, dtype=np.float64))
    if scene.n_bumps == 0:
        return np.ones(u.shape[:-1], dtype=np.int64)
    return np.argmax(u @ scene.bump_centers.T, axis=-1) + 1


# ---------------------------------------------------------------------------
# sphere tracing kernels

@maybe_njit
def _sdf_point(px, py, pz, base, centers, widths, amps):
    r = math.sqrt(px * px + py * py + pz * pz)
    if r > 0.0:
        ux, uy, uz = px / r, py / r, pz / r
    else:
        ux, uy, uz = 0.0, 0.0, 1.0
    rad = base
    for m in range(centers.shape[0]):
        c = ux * centers[m, 0] + uy * centers[m, 1] + uz * centers[m, 2]
        rad += amps[m] * math.exp((c - 1.0) / (widths[m] * widths[m]))
    return r - rad


@maybe_njit
def _trace_loop(origins, dirs, bound, base, centers, widths, amps, max_steps, tol):
    n = origins.shape[0]
    t_hit = np.zeros(n)
    hit = np.zeros(n, dtype=np.bool_)
    for i in range(n):
        ox, oy, oz = origins[i, 0], origins[i, 1], origins[i, 2]
        dx, dy, dz = dirs[i, 0], dirs[i, 1], dirs[i, 2]
        mid = -(ox * dx + oy * dy + oz * dz)
        cx, cy, cz = ox + mid * dx, oy + mid * dy, oz + mid * dz
        closest2 = cx * cx + cy * cy + cz * cz
        if closest2 >= bound * bound:
            continue
        half = math.sqrt(bound * bound - closest2)
        t = max(mid - half, 0.0)
        t_far = mid + half
        f = 1e30
        for _ in range(max_steps):
            f = _sdf_point(ox + t * dx, oy + t * dy, oz + t * dz, base, centers, widths, amps)
            if abs(f) < tol:
                break
            t += f
            if t > t_far:
                break
        if t <= t_far and abs(f) < tol:
            hit[i] = True
            t_hit[i] = t
    return t_hit, hit


def _trace_numpy(origins, dirs, bound, base, centers, widths, amps, max_steps, tol):
    n = origins.shape[0]
    t_hit = np.zeros(n)
    hit = np.zeros(n, dtype=bool)
    mid = -(origins * dirs).sum(-1)
    closest2 = ((origins + mid[:, None] * dirs) ** 2).sum(-1)
    inside = closest2 < bound * bound
    half = np.sqrt(np.where(inside, bound * bound - closest2, 0.0))
    t = np.maximum(mid - half, 0.0)
    t_far = mid + half
    f = np.full(n, 1e30)
    active = inside.copy()
    for _ in range(max_steps):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        p = origins[idx] + t[idx, None] * dirs[idx]
        r = np.linalg.norm(p, axis=-1)
        u = np.where(r[:, None] > 0, p / np.where(r > 0, r, 1.0)[:, None], np.array([0.0, 0.0, 1.0]))
        k = np.exp((u @ centers.T - 1.0) / widths**2)
        fi = r - (base + k @ amps)
        f[idx] = fi
        done = np.abs(fi) < tol
        t[idx[~done]] += fi[~done]
        escaped = t[idx] > t_far[idx]
        active[idx[done | escaped]] = False
    hit = inside & (t <= t_far) & (np.abs(f) < tol)
    t_hit[hit] = t[hit]
    return t_hit, hit


def sphere_trace(scene: SceneDefinition, origins, dirs, eps, max_steps=256, tol=1e-5,
                 use_numba=None):
    """Trace rays against the deformed surface. Returns ``(t, hit)``."""
    origins = np.ascontiguousarray(np.broadcast_to(origins, np.shape(dirs)), dtype=np.float64)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64)
    amps = scene.amplitudes(eps)
    use_numba = HAS_NUMBA if use_numba is None else (use_numba and HAS_NUMBA)
    fn = _trace_loop if use_numba else _trace_numpy
    return fn(origins, dirs, float(scene.bound_radius), float(scene.base_radius),
              np.ascontiguousarray(scene.bump_centers), np.ascontiguousarray(scene.bump_widths),
              np.ascontiguousarray(amps), int(max_steps), float(tol))


def render_ground_truth(scene: SceneDefinition, camera: CameraModel, eps, t: int = 0,
                        use_numba=None) -> FrameRecord:
    camera.validate()
    eps = np.asarray(eps, dtype=np.float64)
    h, w = camera.height, camera.width
    vs, us = np.mgrid[0:h, 0:w]
    dirs = camera.pixel_directions(us.ravel(), vs.ravel())
    depth, hit = sphere_trace(scene, camera.translation, dirs, eps, use_numba=use_numba)
    rgb = np.tile(np.array(BACKGROUND_COLOR), (h * w, 1))
    region = np.full(h * w, BACKGROUND_LABEL, dtype=np.int64)
    if hit.any():
        pts = camera.translation + depth[hit, None] * dirs[hit]
        rgb[hit] = shade(scene, pts, eps)
        region[hit] = region_of(scene, pts)
    return FrameRecord(
        frame_id=int(t),
        rgb=rgb.reshape(h, w, 3),
        mask=hit.reshape(h, w).astype(np.float64),
        pseudo_depth=np.where(hit, depth, 0.0).reshape(h, w).astype(np.float32),
        region_map=region.reshape(h, w),
        expression=eps.copy(),
        camera=camera,
    )


# ---------------------------------------------------------------------------
# trajectories and on-disk datasets

@dataclass
class DatasetConfig:
    n_frames: int = 40
    width: int = 48
    height: int = 48
    split_ratio: float = 0.8
    split_rule: str = "interleave"  # or "tail"
    expression_rule: str = "smooth_random"
    n_harmonics: int = 3
    camera_rule: str = "sway"  # or "fixed"
    camera_distance: float = 3.6
    sway_deg: float = 12.0
    fov_deg: float = 40.0
    seed: int = 0


def expression_trajectory(n_frames: int, k: int, rng, rule="smooth_random", n_harmonics=3,
                          scale=1.0) -> np.ndarray:
    """Band-limited expression curves with per-component peak magnitude ``scale``."""
    if rule == "zero":
        return np.zeros((n_frames, k))
    if rule != "smooth_random":
        raise ValueError(f"unknown expression rule {rule!r}")
    s = np.arange(n_frames) / max(n_frames, 1)
    out = np.zeros((n_frames, k))
    for j in range(k):
        freqs = rng.uniform(0.5, 3.0, size=n_harmonics)
        phases = rng.uniform(0, 2 * np.pi, size=n_harmonics)
        mags = rng.uniform(0.3, 1.0, size=n_harmonics)
        curve = (mags * np.sin(2 * np.pi * freqs * s[:, None] + phases)).sum(-1)
        out[:, j] = curve / max(np.abs(curve).max(), 1e-12)
    return scale * out


def camera_trajectory(n_frames: int, cfg: DatasetConfig, rng) -> list:
    if cfg.camera_rule == "fixed":
        yaw = pitch = np.zeros(n_frames)
    elif cfg.camera_rule == "sway":
        s = np.arange(n_frames) / max(n_frames, 1)
        f1, f2 = rng.uniform(0.7, 1.6, size=2)
        p1, p2 = rng.uniform(0, 2 * np.pi, size=2)
        yaw = np.radians(cfg.sway_deg) * np.sin(2 * np.pi * f1 * s + p1)
        pitch = 0.5 * np.radians(cfg.sway_deg) * np.sin(2 * np.pi * f2 * s + p2)
    else:
        raise ValueError(f"unknown camera rule {cfg.camera_rule!r}")
    cams = []
    for a, b in zip(yaw, pitch):
        eye = cfg.camera_distance * np.array([math.sin(a) * math.cos(b), math.sin(b),
                                              math.cos(a) * math.cos(b)])
        cams.append(CameraModel.look_at(eye, width=cfg.width, height=cfg.height, fov_deg=cfg.fov_deg))
    return cams


def split_tags(n_frames: int, ratio: float, rule: str = "interleave") -> list:
    n_train = int(round(ratio * n_frames))
    n_held = n_frames - n_train
    if rule == "tail":
        return ["train"] * n_train + ["heldout"] * n_held
    if rule != "interleave":
        raise ValueError(f"unknown split rule {rule!r}")
    tags = ["train"] * n_frames
    if n_held:
        # evenly spread held-out frames, offset from the ends
        for i in np.linspace(0, n_frames - 1, n_held + 2)[1:-1].round().astype(int):
            tags[i] = "heldout"
    return tags


@dataclass
class DatasetManifest:
    scene_hash: str
    n_expr: int
    n_regions: int
    width: int
    height: int
    frames: list  # [{"frame_id": t, "split": tag}]
    scene: dict = field(default_factory=dict)
    background: list = field(default_factory=lambda: list(BACKGROUND_COLOR))
    background_label: int = BACKGROUND_LABEL
    bound_radius: float = 1.6
    dataset_config: dict = field(default_factory=dict)

    def ids(self, split=None) -> list:
        return [f["frame_id"] for f in self.frames if split in (None, "all") or f["split"] == split]


def generate_dataset(scene: SceneDefinition, out_dir, cfg: DatasetConfig | None = None,
                     use_numba=None) -> DatasetManifest:
    from . import io as sio

    cfg = cfg or DatasetConfig()
    out = Path(out_dir)
    frames_dir = out / "frames"
    try:
        frames_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {frames_dir}: {exc}") from exc
    rng = np.random.default_rng(cfg.seed)
    eps_seq = expression_trajectory(cfg.n_frames, scene.n_expr, rng, cfg.expression_rule,
                                    cfg.n_harmonics, scene.expression_range)
    cams = camera_trajectory(cfg.n_frames, cfg, rng)
    tags = split_tags(cfg.n_frames, cfg.split_ratio, cfg.split_rule)
    for t in range(cfg.n_frames):
        rec = render_ground_truth(scene, cams[t], eps_seq[t], t, use_numba=use_numba)
        sio.write_frame(frames_dir, rec)
    manifest = DatasetManifest(
        scene_hash=scene.config_hash(), n_expr=scene.n_expr, n_regions=scene.n_regions,
        width=cfg.width, height=cfg.height,
        frames=[{"frame_id": t, "split": tags[t]} for t in range(cfg.n_frames)],
        scene=scene.to_dict(), bound_radius=float(scene.bound_radius),
        dataset_config=asdict(cfg),
    )
    sio.write_json(out / "manifest.json", asdict(manifest))
    return manifest


class Dataset:
    """In-memory view of a dataset directory written by :func:`generate_dataset`."""

    def __init__(self, root):
        from . import io as sio

        self.root = Path(root)
        path = self.root / "manifest.json"
        if not path.exists():
            raise FileNotFoundError(f"no manifest at {path}")
        self.manifest = DatasetManifest(**json.loads(path.read_text()))
        self.scene = SceneDefinition.from_dict(self.manifest.scene) if self.manifest.scene else None
        tags = {f["frame_id"]: f["split"] for f in self.manifest.frames}
        self.frames = {}
        for t, tag in tags.items():
            rec = sio.read_frame(self.root / "frames", t, self.manifest.width, self.manifest.height)
            rec.split = tag
            self.frames[t] = rec

    @property
    def n_expr(self) -> int:
        return self.manifest.n_expr

    @property
    def n_regions(self) -> int:
        return self.manifest.n_regions

    @property
    def bound_radius(self) -> float:
        return self.manifest.bound_radius

    def split(self, tag) -> list:
        return [self.frames[t] for t in self.manifest.ids(tag)]

    def __len__(self):
        return len(self.frames)
