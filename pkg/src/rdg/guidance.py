"""Relative depth guidance: patch descriptors, cosine-similarity tensors and the guidance loss.

Descriptors are a deterministic handcrafted stand-in for a learned feature
extractor. Per patch the 6-vector is::

    [mean luminance, luminance std, mean |d/dx|, mean |d/dy|,
     level-1 pyramid sample, level-2 pyramid sample]

where the pyramid samples are the means of the central 2x2 and 4x4 blocks.
Everything is differentiable and each forward has a matching ``*_vjp``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .losses import ShapeMismatch, schedule_weight

LUMA = np.array([0.299, 0.587, 0.114])
DESCRIPTOR_DIM = 6
_STD_EPS = 1e-6
_ABS_EPS = 1e-6
_ZERO_NORM = 1e-12


@dataclass
class GuidanceParams:
    b0: float = 0.4
    m: int = 6000
    patch_px: int = 8
    center_descriptors: bool = False
    schedule: str = "per_step"
    depth_gradients: bool = False
    mean_over_pairs: bool = False  # rdg_objective divides by the pair count

    def __post_init__(self):
        if not 0.0 < self.b0 < 1.0:
            raise ValueError("b0 must lie in (0, 1)")
        if self.m < 1:
            raise ValueError("m must be >= 1")


@dataclass
class PatchGrid:
    descriptors: np.ndarray  # (Ph, Pw, DESCRIPTOR_DIM)
    patch_px: int

    @property
    def vectors(self) -> np.ndarray:
        return self.descriptors.reshape(-1, self.descriptors.shape[-1])

    @property
    def descriptor_dim(self) -> int:
        return self.descriptors.shape[-1]

    @property
    def zero_norm(self) -> np.ndarray:
        return np.linalg.norm(self.vectors, axis=1) < _ZERO_NORM


@dataclass
class SimilarityTensor:
    values: np.ndarray  # (P^2, P^2)
    kind: str  # "image" or "depth"


def _luminance(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return img @ LUMA if img.ndim == 3 else img


def _central_diff(y: np.ndarray, axis: int) -> np.ndarray:
    n = y.shape[axis]
    hi = np.minimum(np.arange(n) + 1, n - 1)
    lo = np.maximum(np.arange(n) - 1, 0)
    return (np.take(y, hi, axis=axis) - np.take(y, lo, axis=axis)) / 2.0


def _central_diff_T(g: np.ndarray, axis: int) -> np.ndarray:
    """Adjoint of :func:`_central_diff` (replicate borders)."""
    n = g.shape[axis]
    hi = np.minimum(np.arange(n) + 1, n - 1)
    lo = np.maximum(np.arange(n) - 1, 0)
    out = np.zeros_like(g)
    gm = np.moveaxis(g, axis, 0)
    om = np.moveaxis(out, axis, 0)
    np.add.at(om, hi, gm / 2.0)
    np.add.at(om, lo, -gm / 2.0)
    return out


def _to_patches(y: np.ndarray, p: int) -> np.ndarray:
    ph, pw = y.shape[0] // p, y.shape[1] // p
    return y[: ph * p, : pw * p].reshape(ph, p, pw, p).transpose(0, 2, 1, 3)


def _from_patches(t: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    ph, pw, p, _ = t.shape
    out = np.zeros(shape)
    out[: ph * p, : pw * p] = t.transpose(0, 2, 1, 3).reshape(ph * p, pw * p)
    return out


def _centre_mask(p: int, size: int) -> np.ndarray:
    m = np.zeros((p, p))
    lo = max((p - size) // 2, 0)
    hi = min(lo + size, p)
    m[lo:hi, lo:hi] = 1.0 / ((hi - lo) ** 2)
    return m


def _descriptor_parts(y: np.ndarray, p: int):
    h, w = (y.shape[0] // p) * p, (y.shape[1] // p) * p
    y = y[:h, :w]
    gx = _central_diff(y, 1)
    gy = _central_diff(y, 0)
    Y = _to_patches(y, p)
    mean = Y.mean(axis=(2, 3))
    var = Y.var(axis=(2, 3))
    std = np.sqrt(var + _STD_EPS**2) - _STD_EPS
    ax = np.sqrt(gx**2 + _ABS_EPS**2) - _ABS_EPS
    ay = np.sqrt(gy**2 + _ABS_EPS**2) - _ABS_EPS
    mx = _to_patches(ax, p).mean(axis=(2, 3))
    my = _to_patches(ay, p).mean(axis=(2, 3))
    l1 = (Y * _centre_mask(p, 2)).sum(axis=(2, 3))
    l2 = (Y * _centre_mask(p, 4)).sum(axis=(2, 3))
    desc = np.stack([mean, std, mx, my, l1, l2], axis=-1)
    return desc, (y, gx, gy, Y, mean, var)


def extract_features(img: np.ndarray, patch_px: int = 8) -> PatchGrid:
    """Patch descriptors of an RGB image (luminance) or a single-channel map.

    The raster is cropped to the largest multiple of ``patch_px``.
    """
    desc, _ = _descriptor_parts(_luminance(img), patch_px)
    return PatchGrid(desc, patch_px)


def extract_features_vjp(img: np.ndarray, patch_px: int, d_desc: np.ndarray) -> np.ndarray:
    """Pull a descriptor cotangent (Ph, Pw, 6) back to the input raster."""
    img = np.asarray(img, dtype=np.float64)
    full = _luminance(img)
    p = patch_px
    _, (y, gx, gy, Y, mean, var) = _descriptor_parts(full, p)
    n = p * p
    d = d_desc
    dY = np.broadcast_to(d[..., 0][..., None, None] / n, Y.shape).copy()
    std_term = np.sqrt(var + _STD_EPS**2)
    dY += d[..., 1][..., None, None] * (Y - mean[..., None, None]) / (n * std_term[..., None, None])
    dY += d[..., 4][..., None, None] * _centre_mask(p, 2)
    dY += d[..., 5][..., None, None] * _centre_mask(p, 4)
    dy = _from_patches(dY, y.shape)
    dax = _from_patches(np.broadcast_to(d[..., 2][..., None, None] / n, Y.shape), y.shape)
    day = _from_patches(np.broadcast_to(d[..., 3][..., None, None] / n, Y.shape), y.shape)
    dgx = dax * gx / np.sqrt(gx**2 + _ABS_EPS**2)
    dgy = day * gy / np.sqrt(gy**2 + _ABS_EPS**2)
    dy += _central_diff_T(dgx, 1) + _central_diff_T(dgy, 0)
    dfull = np.zeros(full.shape)
    dfull[: y.shape[0], : y.shape[1]] = dy
    if img.ndim == 3:
        return dfull[..., None] * LUMA
    return dfull


def similarity(grid: PatchGrid, kind: str = "image", *, center: bool = False) -> SimilarityTensor:
    """Cosine similarity between every pair of patch descriptors.

    ``center`` subtracts the grid-mean descriptor first. Zero-norm patches
    get similarity 0 against everything, including themselves.
    """
    v = grid.vectors
    if center:
        v = v - v.mean(axis=0)
    norms = np.linalg.norm(v, axis=1)
    ok = norms >= _ZERO_NORM
    u = np.zeros_like(v)
    u[ok] = v[ok] / norms[ok, None]
    F = np.clip(u @ u.T, -1.0, 1.0)
    F[np.flatnonzero(ok), np.flatnonzero(ok)] = 1.0
    return SimilarityTensor(F, kind)


def similarity_vjp(grid: PatchGrid, dF: np.ndarray, *, center: bool = False) -> np.ndarray:
    """Pull dL/dF back to the descriptors; returns (Ph, Pw, dim)."""
    v = grid.vectors
    if center:
        v = v - v.mean(axis=0)
    norms = np.linalg.norm(v, axis=1)
    ok = norms >= _ZERO_NORM
    u = np.zeros_like(v)
    u[ok] = v[ok] / norms[ok, None]
    dF = np.array(dF, dtype=np.float64)
    # the diagonal is pinned to 1 and carries no gradient
    np.fill_diagonal(dF, 0.0)
    du = (dF + dF.T) @ u
    dv = np.zeros_like(v)
    dv[ok] = (du[ok] - u[ok] * (du[ok] * u[ok]).sum(axis=1, keepdims=True)) / norms[ok, None]
    if center:
        dv = dv - dv.mean(axis=0)
    return dv.reshape(grid.descriptors.shape)


def bias_schedule(b_prev: float, t: int, params: GuidanceParams) -> float:
    """One step of ``b(t) = b(t-1) ** (t / m)`` clamped to [1e-4, 1 - 1e-4]."""
    return schedule_weight(b_prev, t, params.m, params.schedule)


def rdg_loss(F: SimilarityTensor | np.ndarray, D: SimilarityTensor | np.ndarray, b: float):
    """Guidance loss over unordered off-diagonal pairs.

    Returns ``(loss, dL_dF, dL_dD)``; gradients are placed on the upper
    triangle (the entries the loss reads). ``max(F, 0)`` zeroes both the
    exponent and the F-gradient wherever F <= 0.
    """
    Fv = F.values if isinstance(F, SimilarityTensor) else np.asarray(F, dtype=np.float64)
    Dv = D.values if isinstance(D, SimilarityTensor) else np.asarray(D, dtype=np.float64)
    if Fv.shape != Dv.shape or Fv.ndim != 2 or Fv.shape[0] != Fv.shape[1]:
        raise ShapeMismatch(f"{Fv.shape} vs {Dv.shape}")
    iu = np.triu_indices(Fv.shape[0], k=1)
    f = Fv[iu]
    a = Dv[iu] - b
    fp = np.maximum(f, 0.0)
    x = -a * fp
    loss = float(np.logaddexp(0.0, x).sum())
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))  # logistic(x), overflow-safe
    dF = np.zeros_like(Fv)
    dD = np.zeros_like(Dv)
    dF[iu] = np.where(f > 0, -a * sig, 0.0)
    dD[iu] = -fp * sig
    return loss, dF, dD


def rdg_objective(image: np.ndarray, depth: np.ndarray, b: float, params: GuidanceParams):
    """Guidance loss of a rendered image/depth pair with gradients to both rasters.

    The depth gradient is zero unless ``params.depth_gradients`` is set.
    """
    p = params.patch_px
    fgrid = extract_features(image, p)
    dgrid = extract_features(depth, p)
    F = similarity(fgrid, "image", center=params.center_descriptors)
    D = similarity(dgrid, "depth", center=params.center_descriptors)
    loss, dF, dD = rdg_loss(F, D, b)
    if params.mean_over_pairs:
        n = F.values.shape[0]
        scale = 1.0 / max(n * (n - 1) // 2, 1)
        loss, dF, dD = loss * scale, dF * scale, dD * scale
    dv = similarity_vjp(fgrid, dF, center=params.center_descriptors)
    d_image = extract_features_vjp(image, p, dv)
    if params.depth_gradients:
        du = similarity_vjp(dgrid, dD, center=params.center_descriptors)
        d_depth = extract_features_vjp(depth, p, du)
    else:
        d_depth = np.zeros(np.shape(depth))
    return loss, d_image, d_depth
