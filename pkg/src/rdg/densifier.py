"""Densification: gradient-driven clone/split, pruning, opacity resets, and
adaptive sampling of new primitives along rays through high-error depth patches."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .scene import Camera, GaussianSet, exact_logit, logit, quat_to_rotmat
from .splatter import GradientSet

log = logging.getLogger(__name__)

NEW_OPACITY = 0.1
SPLIT_CHILDREN = 2
SPLIT_SHRINK = 1.6


@dataclass
class ErrorPatchMap:
    patch_losses: np.ndarray  # (Ph, Pw)
    threshold: float
    selected: list[int]  # flat patch ids, row-major
    patch_px: int = 8

    def centre_pixel(self, pid: int) -> tuple[int, int]:
        """(row, col) of the pixel at the centre of patch ``pid``."""
        pr, pc = divmod(pid, self.patch_losses.shape[1])
        half = self.patch_px // 2
        return pr * self.patch_px + half, pc * self.patch_px + half


@dataclass
class DensifyConfig:
    interval: int = 100
    k_samples: int = 8
    grad_threshold: float = 0.0002
    opacity_reset_steps: tuple[int, ...] = (1000, 3000)
    opacity_reset_value: float = 0.04
    prune_opacity: float = 0.005
    percent_dense: float = 0.01  # split when the largest scale exceeds this fraction of the scene extent
    densify_from: int = 100
    densify_until: int = 15000
    adaptive_sampling: bool = True
    sample_from: int = 1000
    per_patch_range: bool = False  # sample around the rendered depth instead of the camera's near/far
    patch_range_halfwidth: float = 0.25  # fraction of the patch depth, when per_patch_range is on
    max_primitives: int = 20000

    def __post_init__(self):
        if self.interval < 1:
            raise ValueError("interval must be >= 1")
        if self.k_samples < 1:
            raise ValueError("k_samples must be >= 1")


@dataclass
class DensifyStats:
    """Running sum of per-primitive screen-space gradient magnitudes."""

    grad_sum: np.ndarray
    count: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "DensifyStats":
        return cls(np.zeros(n), np.zeros(n, dtype=np.int64))

    def add(self, grads: GradientSet) -> None:
        self.grad_sum += np.where(grads.visible, grads.screen_grad, 0.0)
        self.count += grads.visible

    def mean(self) -> np.ndarray:
        return np.where(self.count > 0, self.grad_sum / np.maximum(self.count, 1), 0.0)


@dataclass
class DensifyReport:
    cloned: int = 0
    split: int = 0
    pruned: int = 0
    sampled: int = 0
    selected_patches: int = 0
    opacity_reset: bool = False
    before: int = 0
    after: int = 0


def select_error_patches(per_patch_loss: np.ndarray, patch_px: int = 8) -> ErrorPatchMap:
    """Patches whose loss is strictly above the mean patch loss."""
    losses = np.atleast_2d(np.asarray(per_patch_loss, dtype=np.float64))
    if losses.size == 0:
        raise ValueError("need at least one patch")
    thr = float(losses.mean())
    selected = [int(i) for i in np.flatnonzero(losses.ravel() > thr)]
    return ErrorPatchMap(losses, thr, selected, patch_px)


def sample_depths(near: float, far: float, k: int) -> np.ndarray:
    """``k`` depths spaced linearly over [near, far] inclusive; ``k = 1`` gives the midpoint."""
    if not near < far:
        raise ValueError("need near < far")
    if k == 1:
        return np.array([(near + far) / 2.0])
    return np.linspace(near, far, k)


def _local_scale(points: np.ndarray, existing: np.ndarray, fallback: float) -> np.ndarray:
    """Mean distance from each point to its three nearest existing primitives."""
    if len(existing) == 0:
        return np.full(len(points), fallback)
    k = min(3, len(existing))
    d, _ = cKDTree(existing).query(points, k=k)
    d = np.asarray(d).reshape(len(points), k)
    return np.maximum(d.mean(axis=1), 1e-4)


def sample_along_rays(
    selected: ErrorPatchMap,
    cam: Camera,
    depth_range: tuple[float, float] | None,
    k: int,
    image: np.ndarray,
    existing: GaussianSet | None = None,
    rendered_depth: np.ndarray | None = None,
    halfwidth: float = 0.25,
) -> GaussianSet:
    """New primitives along the rays through each selected patch's centre pixel.

    ``depth_range`` defaults to the camera's near/far. When ``rendered_depth``
    is given, each patch instead samples ``depth * (1 -+ halfwidth)`` around
    its centre pixel's rendered depth.
    """
    if not selected.selected:
        return GaussianSet.empty()
    near, far = depth_range if depth_range is not None else (cam.near, cam.far)
    positions, colors = [], []
    for pid in selected.selected:
        r, c = selected.centre_pixel(pid)
        if r >= cam.height or c >= cam.width:
            continue
        lo, hi = near, far
        if rendered_depth is not None and rendered_depth[r, c] > 0:
            z = float(rendered_depth[r, c])
            lo, hi = max(cam.near, z * (1 - halfwidth)), z * (1 + halfwidth)
        origin, direction = cam.ray(float(c), float(r))
        for d in sample_depths(lo, hi, k):
            positions.append(origin + d * direction)
            colors.append(image[r, c])
    if not positions:
        return GaussianSet.empty()
    pos = np.array(positions)
    ref = existing.positions if existing is not None else np.zeros((0, 3))
    scale = _local_scale(pos, ref, fallback=0.01 * (far - near))
    n = len(pos)
    return GaussianSet(
        pos,
        np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        np.repeat(np.log(scale)[:, None], 3, axis=1),
        np.full(n, float(logit(NEW_OPACITY))),
        np.clip(np.array(colors), 0.0, 1.0),
    )


def merge(gset: GaussianSet, new: GaussianSet) -> GaussianSet:
    """Existing primitives in order, then the new ones; the generation tag is bumped."""
    out = GaussianSet(
        np.concatenate([gset.positions, new.positions]),
        np.concatenate([gset.rotations, new.rotations]),
        np.concatenate([gset.log_scales, new.log_scales]),
        np.concatenate([gset.opacity_logits, new.opacity_logits]),
        np.concatenate([gset.colors, new.colors]),
        gset.generation_tag + 1,
    )
    return out


def reset_opacity(gset: GaussianSet, value: float) -> None:
    """Set every opacity to exactly ``value``."""
    gset.opacity_logits[:] = exact_logit(value)


@dataclass
class AdaptiveView:
    """What adaptive sampling needs from one training view."""

    camera: Camera
    image: np.ndarray
    per_patch_loss: np.ndarray
    rendered_depth: np.ndarray | None = None


@dataclass
class DensifyResult:
    gset: GaussianSet
    origin: np.ndarray  # index into the previous set per primitive, -1 for sampled ones
    report: DensifyReport = field(default_factory=DensifyReport)


def clone_and_split(gset: GaussianSet, mean_grad: np.ndarray, cfg: DensifyConfig, extent: float, rng: np.random.Generator):
    """Clone small high-gradient primitives and split large ones into two children."""
    hot = mean_grad > cfg.grad_threshold
    big = gset.scales.max(axis=1) > cfg.percent_dense * extent
    clone = np.flatnonzero(hot & ~big)
    split = np.flatnonzero(hot & big)
    keep = np.ones(len(gset), dtype=bool)
    keep[split] = False
    parts = [gset.subset(keep), gset.subset(clone)]
    origin = [np.flatnonzero(keep), clone]
    if len(split):
        src = gset.subset(np.repeat(split, SPLIT_CHILDREN))
        R = quat_to_rotmat(src.rotations / np.linalg.norm(src.rotations, axis=1, keepdims=True))
        local = rng.standard_normal((len(src), 3)) * src.scales
        src.positions = src.positions + np.einsum("nij,nj->ni", R, local)
        src.log_scales = src.log_scales - np.log(SPLIT_SHRINK)
        parts.append(src)
        origin.append(np.repeat(split, SPLIT_CHILDREN))
    out = parts[0]
    for p in parts[1:]:
        out = merge(out, p)
    out.generation_tag = gset.generation_tag
    return out, np.concatenate(origin), len(clone), len(split)


def schedule_step(
    gset: GaussianSet,
    stats: DensifyStats,
    t: int,
    cfg: DensifyConfig,
    *,
    extent: float = 1.0,
    views: list[AdaptiveView] | None = None,
    rng: np.random.Generator | None = None,
) -> DensifyResult:
    """Run whatever densification events fall on step ``t``.

    Densify steps (multiples of ``cfg.interval`` within the densify window)
    clone/split, prune, and then (from ``cfg.sample_from`` on) add samples
    along rays of high-error patches. Opacity resets run last.
    """
    if t < 0:
        raise ValueError("step must be non-negative")
    n0 = len(gset)
    report = DensifyReport(before=n0)
    origin = np.arange(n0)
    out = gset
    densify = t > 0 and t % cfg.interval == 0 and cfg.densify_from <= t <= cfg.densify_until
    if densify:
        rng = rng if rng is not None else np.random.default_rng(t)
        mean_grad = stats.mean()
        if n0 < cfg.max_primitives:
            out, origin, report.cloned, report.split = clone_and_split(out, mean_grad, cfg, extent, rng)
        alive = out.opacities >= cfg.prune_opacity
        report.pruned = int((~alive).sum())
        out = out.subset(alive)
        origin = origin[alive]
        if cfg.adaptive_sampling and t >= cfg.sample_from and views:
            for v in views:
                sel = select_error_patches(v.per_patch_loss)
                report.selected_patches += len(sel.selected)
                new = sample_along_rays(
                    sel,
                    v.camera,
                    None,
                    cfg.k_samples,
                    v.image,
                    out,
                    v.rendered_depth if cfg.per_patch_range else None,
                    cfg.patch_range_halfwidth,
                )
                report.sampled += len(new)
                out = merge(out, new)
                origin = np.concatenate([origin, np.full(len(new), -1)])
        out.generation_tag = gset.generation_tag + 1
    if t in cfg.opacity_reset_steps:
        if out is gset:
            out = gset.copy()
        reset_opacity(out, cfg.opacity_reset_value)
        report.opacity_reset = True
    report.after = len(out)
    assert n0 - report.pruned <= report.after + report.split or not densify
    assert report.after <= n0 + report.cloned + report.split * (SPLIT_CHILDREN - 1) + report.sampled
    return DensifyResult(out, origin, report)
