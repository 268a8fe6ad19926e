"""Gaussian scene representation and pinhole camera.

Rasters are plain ndarrays: images are (H, W, 3) and depth maps (H, W),
both float64 and row-major.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

COV2D_FLOOR = 0.3  # px^2 added to the projected covariance diagonal


class BehindCamera(ValueError):
    """Raised when a primitive's view-space depth is not positive."""


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p / (1.0 - p))


def exact_logit(p: float) -> float:
    """Return the logit x whose ``sigmoid(x)`` lies closest to ``p``.

    Bit-exact when such an x exists; for most decimal ``p`` (0.04 included) the
    sigmoid skips over ``p`` and the nearest attainable value is a few ulps off.
    """
    x0 = float(logit(p))
    xs = x0 + np.arange(-64, 65) * np.spacing(x0)
    err = np.abs(sigmoid(xs) - p)
    return float(xs[np.argmin(err)])


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices from quaternions ``(w, x, y, z)``; accepts (4,) or (N, 4).

    Quaternions are normalized first.
    """
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((q.shape[0], 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R[0] if single else R


@dataclass(frozen=True)
class GaussianPrimitive:
    position: np.ndarray
    rotation: np.ndarray  # quaternion (w, x, y, z)
    log_scale: np.ndarray
    opacity_logit: float
    color: np.ndarray

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))


@dataclass
class GaussianSet:
    """Structure-of-arrays container for N Gaussian primitives.

    ``generation_tag`` is bumped whenever the primitive list changes shape
    (densify, prune, merge) so stale render tapes can be detected.
    """

    positions: np.ndarray  # (N, 3)
    rotations: np.ndarray  # (N, 4)
    log_scales: np.ndarray  # (N, 3)
    opacity_logits: np.ndarray  # (N,)
    colors: np.ndarray  # (N, 3)
    generation_tag: int = 0

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = self.positions.shape[0]
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(n, 4)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(n)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(n, 3)

    def __len__(self) -> int:
        return self.positions.shape[0]

    def __getitem__(self, i: int) -> GaussianPrimitive:
        return GaussianPrimitive(
            self.positions[i].copy(),
            self.rotations[i].copy(),
            self.log_scales[i].copy(),
            float(self.opacity_logits[i]),
            self.colors[i].copy(),
        )

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @classmethod
    def empty(cls) -> "GaussianSet":
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3)))

    @classmethod
    def from_primitives(cls, prims: Iterable[GaussianPrimitive], generation_tag: int = 0) -> "GaussianSet":
        prims = list(prims)
        if not prims:
            return cls.empty()
        return cls(
            np.stack([p.position for p in prims]),
            np.stack([p.rotation for p in prims]),
            np.stack([p.log_scale for p in prims]),
            np.array([p.opacity_logit for p in prims]),
            np.stack([p.color for p in prims]),
            generation_tag,
        )

    def copy(self) -> "GaussianSet":
        return GaussianSet(
            self.positions.copy(),
            self.rotations.copy(),
            self.log_scales.copy(),
            self.opacity_logits.copy(),
            self.colors.copy(),
            self.generation_tag,
        )

    def subset(self, index) -> "GaussianSet":
        """Select primitives by index/mask; keeps the generation tag."""
        return GaussianSet(
            self.positions[index],
            self.rotations[index],
            self.log_scales[index],
            self.opacity_logits[index],
            self.colors[index],
            self.generation_tag,
        )

    def permuted(self, perm: Sequence[int]) -> "GaussianSet":
        return self.subset(np.asarray(perm))

    def normalize_rotations(self) -> None:
        self.rotations /= np.linalg.norm(self.rotations, axis=1, keepdims=True)

    def to_dict(self) -> dict:
        return {
            "positions": self.positions.tolist(),
            "rotations": self.rotations.tolist(),
            "log_scales": self.log_scales.tolist(),
            "opacity_logits": self.opacity_logits.tolist(),
            "colors": self.colors.tolist(),
            "generation_tag": self.generation_tag,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianSet":
        return cls(
            d["positions"],
            d["rotations"],
            d["log_scales"],
            d["opacity_logits"],
            d["colors"],
            int(d.get("generation_tag", 0)),
        )


def covariances(gset: GaussianSet) -> np.ndarray:
    """World-space covariances ``R M M^T R^T`` for every primitive, (N, 3, 3)."""
    R = quat_to_rotmat(gset.rotations)
    M = R * np.exp(gset.log_scales)[:, None, :]
    return M @ np.transpose(M, (0, 2, 1))


def build_covariance(prim: GaussianPrimitive) -> np.ndarray:
    R = quat_to_rotmat(prim.rotation)
    M = R * np.exp(prim.log_scale)[None, :]
    return M @ M.T


@dataclass(frozen=True)
class Camera:
    """Pinhole camera with OpenCV axes (x right, y down, z forward).

    Pixel ``(row, col)`` has its center at image coordinates ``(col, row)``.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray  # world-to-camera rotation (3, 3)
    translation: np.ndarray  # world-to-camera translation (3,)
    height: int
    width: int
    near: float = 0.1
    far: float = 100.0

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        if not self.near > 0:
            raise ValueError("near must be positive")
        if not self.far > self.near:
            raise ValueError("far must exceed near")
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-6:
            raise ValueError("world_to_cam rotation is not orthonormal")

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def world_to_view(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def project_points(self, points: np.ndarray) -> np.ndarray:
        """Pixel coordinates ``(u, v)`` of world points, shape (N, 2)."""
        v = self.world_to_view(np.atleast_2d(points))
        return np.stack([self.fx * v[:, 0] / v[:, 2] + self.cx, self.fy * v[:, 1] / v[:, 2] + self.cy], axis=1)

    def ray(self, u: float, v: float) -> tuple[np.ndarray, np.ndarray]:
        """Origin and world direction of the ray through pixel coords (u, v).

        The direction is scaled so that ``origin + d * direction`` lies at
        view-space depth ``d``.
        """
        d_view = np.array([(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0])
        return self.center, self.rotation.T @ d_view

    def translated(self, offset: np.ndarray) -> "Camera":
        """Same camera after moving the world by ``offset`` (camera moves along)."""
        return replace(self, translation=self.translation - self.rotation @ np.asarray(offset, dtype=np.float64))

    def to_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
            "height": self.height,
            "width": self.width,
            "near": self.near,
            "far": self.far,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(
            float(d["fx"]),
            float(d["fy"]),
            float(d["cx"]),
            float(d["cy"]),
            np.asarray(d["rotation"], dtype=np.float64),
            np.asarray(d["translation"], dtype=np.float64),
            int(d["height"]),
            int(d["width"]),
            float(d.get("near", 0.1)),
            float(d.get("far", 100.0)),
        )


def look_at(
    eye,
    target,
    up=(0.0, -1.0, 0.0),
    *,
    focal: float,
    height: int,
    width: int,
    near: float = 0.1,
    far: float = 100.0,
) -> Camera:
    """Camera at ``eye`` looking at ``target``; ``up`` is the world direction drawn upward."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    # image y points down, so the camera's y axis is opposite to the requested up
    down = -np.asarray(up, dtype=np.float64)
    right = np.cross(down, forward)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    return Camera(
        focal,
        focal,
        (width - 1) / 2.0,
        (height - 1) / 2.0,
        R,
        -R @ eye,
        height,
        width,
        near,
        far,
    )


@dataclass
class Projection:
    mean2d: np.ndarray
    cov2d: np.ndarray
    view_depth: float


def _projection_jacobian(t: np.ndarray, fx: float, fy: float) -> np.ndarray:
    """Perspective Jacobian at view-space points ``t`` (N, 3) -> (N, 2, 3)."""
    tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]
    J = np.zeros((t.shape[0], 2, 3))
    J[:, 0, 0] = fx / tz
    J[:, 0, 2] = -fx * tx / (tz * tz)
    J[:, 1, 1] = fy / tz
    J[:, 1, 2] = -fy * ty / (tz * tz)
    return J


def project_all(gset: GaussianSet, cam: Camera, cov_floor: float = COV2D_FLOOR):
    """Vectorized projection of every primitive.

    Returns ``(t_view, mean2d, cov2d, J, V)`` where ``V`` is the view-space
    3D covariance; no culling is applied here.
    """
    t = cam.world_to_view(gset.positions)
    Sigma = covariances(gset)
    W = cam.rotation
    V = W[None] @ Sigma @ W.T[None]
    J = _projection_jacobian(t, cam.fx, cam.fy)
    cov2d = J @ V @ np.transpose(J, (0, 2, 1))
    cov2d[:, 0, 0] += cov_floor
    cov2d[:, 1, 1] += cov_floor
    with np.errstate(divide="ignore", invalid="ignore"):
        mean2d = np.stack([cam.fx * t[:, 0] / t[:, 2] + cam.cx, cam.fy * t[:, 1] / t[:, 2] + cam.cy], axis=1)
    return t, mean2d, cov2d, J, V


def project_gaussian(prim: GaussianPrimitive, cam: Camera, cov_floor: float = COV2D_FLOOR) -> Projection:
    t = cam.world_to_view(prim.position[None])
    if t[0, 2] <= 0:
        raise BehindCamera(f"view-space depth {t[0, 2]:.4g} <= 0")
    single = GaussianSet(prim.position, prim.rotation, prim.log_scale, [prim.opacity_logit], prim.color)
    t, mean2d, cov2d, _, _ = project_all(single, cam, cov_floor)
    return Projection(mean2d[0], cov2d[0], float(t[0, 2]))
