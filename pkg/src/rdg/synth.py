"""Synthetic scenes with known ground truth, and a coarse-depth corruption model."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .scene import Camera, GaussianSet, logit, look_at
from .splatter import render

LAYOUTS = ("clustered", "uniform")


@dataclass
class SceneSpec:
    n_gaussians: int = 200
    layout: str = "clustered"
    n_train: int = 3
    n_eval: int = 2
    resolution: int = 64
    seed: int = 0
    camera_distance: float = 3.5
    arc_degrees: float = 50.0
    focal_scale: float = 1.5  # focal length in units of image width
    depth_margin: float = 2.0  # near = distance - margin, far = distance + margin + 0.5 (covers the backdrop)

    def __post_init__(self):
        if self.n_gaussians < 1:
            raise ValueError("n_gaussians must be >= 1")
        if self.n_train < 1:
            raise ValueError("n_train must be >= 1")
        if self.n_eval < 0:
            raise ValueError("n_eval must be >= 0")
        if self.layout not in LAYOUTS:
            raise ValueError(f"layout must be one of {LAYOUTS}")
        if self.resolution < 1:
            raise ValueError("resolution must be positive")
        if not 0 < self.depth_margin < self.camera_distance:
            raise ValueError("depth_margin must lie in (0, camera_distance)")


@dataclass
class SyntheticScene:
    gt_set: GaussianSet
    train_cameras: list[Camera]
    eval_cameras: list[Camera]
    gt_images: list[np.ndarray]  # train views first, then eval views
    gt_depths: list[np.ndarray]
    scene_extent: float
    spec: SceneSpec = field(default_factory=SceneSpec)

    @property
    def cameras(self) -> list[Camera]:
        return self.train_cameras + self.eval_cameras

    @property
    def n_train(self) -> int:
        return len(self.train_cameras)

    def train_views(self):
        n = self.n_train
        return list(zip(self.train_cameras, self.gt_images[:n], self.gt_depths[:n]))

    def eval_views(self):
        n = self.n_train
        return list(zip(self.eval_cameras, self.gt_images[n:], self.gt_depths[n:]))


def _random_quaternions(rng: np.random.Generator, n: int) -> np.ndarray:
    q = rng.standard_normal((n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return q * np.sign(q[:, :1] + 1e-300)


def _backdrop(n: int, rng: np.random.Generator):
    """Flat, wide, opaque primitives tiling a wall behind the box (z = 1.3)."""
    side = int(np.ceil(np.sqrt(n)))
    grid = np.linspace(-2.4, 2.4, side)
    xy = np.stack(np.meshgrid(grid, grid, indexing="xy"), -1).reshape(-1, 2)[:n]
    pos = np.column_stack([xy, np.full(n, 1.3)])
    spacing = grid[1] - grid[0] if side > 1 else 2.4
    log_scales = np.column_stack([np.full((n, 2), np.log(0.75 * spacing)), np.full(n, np.log(0.02))])
    rot = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    base = rng.uniform(0.2, 0.8, 3)
    colors = np.clip(base + 0.02 * rng.standard_normal((n, 3)), 0.0, 1.0)
    return pos, rot, log_scales, np.full(n, 0.98), colors


def sample_gt_set(spec: SceneSpec, rng: np.random.Generator) -> GaussianSet:
    """Primitives in the box [-1, 1]^3 with varied color, scale and opacity.

    The clustered layout gives each cluster one base color (objects), and
    spends a tenth of the budget on a backdrop wall so every pixel sees a
    surface. A single primitive sits at the origin.
    """
    n = spec.n_gaussians
    if n == 1:
        return GaussianSet(np.zeros((1, 3)), np.array([[1.0, 0, 0, 0]]), np.full((1, 3), np.log(0.1)), logit(np.array([0.9])), np.full((1, 3), 0.5))
    if spec.layout == "uniform":
        pos = rng.uniform(-1.0, 1.0, (n, 3))
        log_scales = rng.uniform(np.log(0.05), np.log(0.18), (n, 3))
        opacity = rng.uniform(0.6, 0.95, n)
        colors = rng.uniform(0.05, 0.95, (n, 3))
        return GaussianSet(pos, _random_quaternions(rng, n), log_scales, logit(opacity), colors)
    n_wall = max(1, n // 10)
    n_obj = n - n_wall
    n_clusters = max(1, n_obj // 25)
    centres = rng.uniform(-0.7, 0.7, (n_clusters, 3))
    palette = rng.uniform(0.05, 0.95, (n_clusters, 3))
    which = rng.integers(0, n_clusters, n_obj)
    pos = np.clip(centres[which] + 0.22 * rng.standard_normal((n_obj, 3)), -1.0, 1.0)
    log_scales = rng.uniform(np.log(0.06), np.log(0.16), (n_obj, 3))
    opacity = rng.uniform(0.7, 0.95, n_obj)
    colors = np.clip(palette[which] + 0.03 * rng.standard_normal((n_obj, 3)), 0.0, 1.0)
    wpos, wrot, wls, wop, wcol = _backdrop(n_wall, rng)
    return GaussianSet(
        np.concatenate([pos, wpos]),
        np.concatenate([_random_quaternions(rng, n_obj), wrot]),
        np.concatenate([log_scales, wls]),
        logit(np.concatenate([opacity, wop])),
        np.concatenate([colors, wcol]),
    )


def camera_rig(spec: SceneSpec) -> tuple[list[Camera], list[Camera]]:
    """Cameras on a horizontal arc facing the origin; eval views sit between train views."""
    n_total = spec.n_train + spec.n_eval
    half = np.radians(spec.arc_degrees) / 2.0
    angles = np.linspace(-half, half, n_total) if n_total > 1 else np.zeros(1)
    # spread eval slots evenly through the sequence so they interpolate between train views
    eval_slots = set()
    if spec.n_eval:
        eval_slots = {int(round(x)) for x in np.linspace(1, n_total - 2, spec.n_eval)} if n_total > 2 else {n_total - 1}
        k = 0
        while len(eval_slots) < spec.n_eval:
            eval_slots.add(k)
            k += 1
    focal = spec.focal_scale * spec.resolution
    near = spec.camera_distance - spec.depth_margin
    far = spec.camera_distance + spec.depth_margin + 0.5
    train, evals = [], []
    for i, a in enumerate(angles):
        eye = spec.camera_distance * np.array([np.sin(a), 0.0, -np.cos(a)])
        cam = look_at(eye, np.zeros(3), focal=focal, height=spec.resolution, width=spec.resolution, near=near, far=far)
        (evals if i in eval_slots else train).append(cam)
    return train, evals


def make_scene(spec: SceneSpec | dict) -> SyntheticScene:
    if isinstance(spec, dict):
        spec = SceneSpec(**spec)
    rng = np.random.default_rng(spec.seed)
    gt = sample_gt_set(spec, rng)
    train, evals = camera_rig(spec)
    images, depths = [], []
    for cam in train + evals:
        out = render(gt, cam)
        images.append(out.image)
        depths.append(out.depth)
    extent = float(np.max(np.linalg.norm(gt.positions, axis=1))) if len(gt) > 1 else 1.0
    return SyntheticScene(gt, train, evals, images, depths, extent, spec)


@dataclass(frozen=True)
class CorruptionModel:
    scale: float = 1.0
    shift: float = 0.0
    blur_sigma: float = 0.0
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.blur_sigma < 0 or self.noise_sigma < 0:
            raise ValueError("blur and noise sigmas must be non-negative")


MIN_DEPTH = 1e-6


def corrupt_depth(depth_gt: np.ndarray, model: CorruptionModel) -> np.ndarray:
    """Affine bias, Gaussian blur, then additive noise; clamped to stay positive."""
    d = model.scale * np.asarray(depth_gt, dtype=np.float64) + model.shift
    if model.blur_sigma > 0:
        d = gaussian_filter(d, model.blur_sigma, mode="nearest")
    if model.noise_sigma > 0:
        d = d + np.random.default_rng(model.seed).normal(0.0, model.noise_sigma, d.shape)
    return np.maximum(d, MIN_DEPTH)


def affine_align(x: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Least-squares ``a * x + b`` closest to ``ref``."""
    x = np.asarray(x, dtype=np.float64).ravel()
    A = np.stack([x, np.ones_like(x)], axis=1)
    coef, *_ = np.linalg.lstsq(A, np.asarray(ref, dtype=np.float64).ravel(), rcond=None)
    return (A @ coef).reshape(np.shape(ref))


def aligned_rmse(x: np.ndarray, ref: np.ndarray) -> float:
    return float(np.sqrt(np.mean((affine_align(x, ref) - ref) ** 2)))
