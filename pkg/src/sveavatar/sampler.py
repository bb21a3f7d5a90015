"""Region-weighted pixel sampling with loss-guided EMA weight updates."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from ._accel import HAS_NUMBA, maybe_njit


@dataclass
class RegionWeights:
    w: np.ndarray
    step: int = 0
    alpha: float = 0.01
    areas: np.ndarray = field(default=None)

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        if self.areas is None:
            self.areas = np.zeros(len(self.w), dtype=np.int64)

    @property
    def n(self) -> int:
        return len(self.w)

    def copy(self) -> "RegionWeights":
        return RegionWeights(self.w.copy(), self.step, self.alpha, self.areas.copy())

    def to_dict(self) -> dict:
        return {"w": self.w.tolist(), "step": self.step, "alpha": self.alpha,
                "areas": self.areas.tolist()}

    @classmethod
    def from_dict(cls, d) -> "RegionWeights":
        return cls(np.asarray(d["w"]), d["step"], d["alpha"], np.asarray(d["areas"], dtype=np.int64))


def init_weights(n: int, alpha: float = 0.01) -> RegionWeights:
    if n < 1:
        raise ValueError("number of regions must be >= 1")
    return RegionWeights(np.full(n, 1.0 / n), 0, alpha)


def region_areas(region_map, n: int) -> np.ndarray:
    labels = np.asarray(region_map).ravel()
    if labels.size and (labels.min() < 0 or labels.max() >= n):
        raise ValueError(f"region label outside [0, {n})")
    return np.bincount(labels, minlength=n).astype(np.int64)


@maybe_njit
def _gather_region_pixels(order, offsets, areas, regions, u):
    out = np.empty(regions.shape[0], dtype=np.int64)
    for i in range(regions.shape[0]):
        r = regions[i]
        k = int(u[i] * areas[r])
        if k >= areas[r]:
            k = areas[r] - 1
        out[i] = order[offsets[r] + k]
    return out


def _gather_numpy(order, offsets, areas, regions, u):
    k = np.minimum((u * areas[regions]).astype(np.int64), areas[regions] - 1)
    return order[offsets[regions] + k]


def region_probabilities(weights: RegionWeights, areas, mode: str = "area") -> np.ndarray:
    areas = np.asarray(areas, dtype=np.float64)
    mass = weights.w * areas if mode == "area" else np.where(areas > 0, weights.w, 0.0)
    total = mass.sum()
    if total <= 0:
        raise ValueError("empty frame: no region has positive area")
    return mass / total


def sample_pixels(region_map, weights: RegionWeights, n_rays: int, rng, mode: str = "area"):
    """Draw ``n_rays`` pixels: a region with probability proportional to
    ``w_i * A_i`` (``mode="area"``) or ``w_i`` (``mode="weight"``), then a
    pixel uniformly inside it.  Returns an ``(n_rays, 3)`` array of ``(u, v, region)``."""
    if n_rays < 1:
        raise ValueError("n_rays must be >= 1")
    region_map = np.asarray(region_map)
    h, w = region_map.shape
    areas = region_areas(region_map, weights.n)
    probs = region_probabilities(weights, areas, mode)
    regions = rng.choice(weights.n, size=n_rays, p=probs)
    labels = region_map.ravel()
    order = np.argsort(labels, kind="stable")
    offsets = np.concatenate([[0], np.cumsum(areas)[:-1]]).astype(np.int64)
    u = rng.random(n_rays)
    gather = _gather_region_pixels if HAS_NUMBA else _gather_numpy
    flat = gather(order, offsets, areas, regions.astype(np.int64), u)
    return np.stack([flat % w, flat // w, regions], axis=-1)


def sample_uniform(region_map, n_rays: int, rng):
    region_map = np.asarray(region_map)
    h, w = region_map.shape
    flat = rng.integers(0, h * w, size=n_rays)
    return np.stack([flat % w, flat // w, region_map.ravel()[flat]], axis=-1)


def update_weights(weights: RegionWeights, losses, areas) -> RegionWeights:
    """One EMA step of the loss-guided region weights.

    guidance_i = L_i / (w_i * A_i * sum_j L_j) where defined, else 0;
    w_i <- alpha * guidance_i + (1 - alpha) * w_i.
    """
    losses = np.asarray(losses, dtype=np.float64)
    areas = np.asarray(areas, dtype=np.int64)
    if losses.shape != weights.w.shape or areas.shape != weights.w.shape:
        raise ValueError("losses and areas must have one entry per region")
    if np.any(losses < 0) or not np.all(np.isfinite(losses)):
        raise ValueError("region losses must be finite and non-negative")
    total = losses.sum()
    guidance = np.zeros_like(losses)
    ok = (areas > 0) & (total > 0)
    guidance[ok] = losses[ok] / (weights.w[ok] * areas[ok] * total)
    new_w = weights.alpha * guidance + (1.0 - weights.alpha) * weights.w
    return RegionWeights(new_w, weights.step + 1, weights.alpha, areas.copy())


class WeightLog:
    """Append-only CSV of ``step, w_0 .. w_{N-1}``."""

    def __init__(self, path, n: int, append: bool = False):
        self.path = path
        self.n = n
        if not append:
            with open(path, "w", newline="") as fh:
                csv.writer(fh).writerow(["step"] + [f"w_{i}" for i in range(n)])

    def write(self, weights: RegionWeights):
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow([weights.step] + [repr(float(x)) for x in weights.w])
