"""Training losses, the weight schedule, and evaluation metrics.

Every differentiable loss returns ``(value, gradient)`` where the gradient is
taken with respect to the rendered buffer (image or depth).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

log = logging.getLogger(__name__)

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


class ShapeMismatch(ValueError):
    pass


def _check_same(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _blur(x: np.ndarray, win: np.ndarray) -> np.ndarray:
    """Separable blur over the last two axes."""
    # zero padding keeps the filter self-adjoint, which the SSIM backward relies on
    y = correlate1d(x, win, axis=-2, mode="constant")
    return correlate1d(y, win, axis=-1, mode="constant")


def ssim(x: np.ndarray, y: np.ndarray, *, with_grad: bool = False, size: int = 11, sigma: float = 1.5):
    """Mean SSIM over pixels (and channels) with a Gaussian window.

    With ``with_grad`` also returns d(mean SSIM)/dx.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_same(x, y)
    win = gaussian_window(size, sigma)
    xs = np.moveaxis(x, 2, 0) if x.ndim == 3 else x[None]
    ys = np.moveaxis(y, 2, 0) if y.ndim == 3 else y[None]
    n = xs.size
    mx, my, exx, eyy, exy = _blur(np.stack([xs, ys, xs * xs, ys * ys, xs * ys]), win)
    vx, vy, cxy = exx - mx * mx, eyy - my * my, exy - mx * my
    a1 = 2 * mx * my + SSIM_C1
    a2 = 2 * cxy + SSIM_C2
    b1 = mx * mx + my * my + SSIM_C1
    b2 = vx + vy + SSIM_C2
    smap = a1 * a2 / (b1 * b2)
    value = smap.sum() / n
    if not with_grad:
        return value
    d_vx = -smap / b2
    d_cxy = 2 * a1 / (b1 * b2)
    d_mx = 2 * my * a2 / (b1 * b2) - smap * 2 * mx / b1 + d_vx * (-2 * mx) + d_cxy * (-my)
    bm, bv, bc = _blur(np.stack([d_mx, d_vx, d_cxy]), win)
    g = (bm + 2 * xs * bv + ys * bc) / n
    g = np.moveaxis(g, 0, 2) if x.ndim == 3 else g[0]
    return value, g


def ssim_map(x: np.ndarray, y: np.ndarray, size: int = 11, sigma: float = 1.5) -> np.ndarray:
    """Per-pixel SSIM of two single-channel rasters (zero padding at the borders)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_same(x, y)
    win = gaussian_window(size, sigma)
    mx, my = _blur(x, win), _blur(y, win)
    vx = _blur(x * x, win) - mx * mx
    vy = _blur(y * y, win) - my * my
    cxy = _blur(x * y, win) - mx * my
    return (2 * mx * my + SSIM_C1) * (2 * cxy + SSIM_C2) / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2))


def color_loss(image: np.ndarray, target: np.ndarray, beta: float):
    """L1 plus ``beta`` times D-SSIM, where D-SSIM = (1 - SSIM) / 2."""
    image = np.asarray(image, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    _check_same(image, target)
    diff = image - target
    l1 = np.abs(diff).mean()
    grad = np.sign(diff) / diff.size
    value = l1
    if beta:
        s, ds = ssim(image, target, with_grad=True)
        value += beta * (1.0 - s) / 2.0
        grad = grad - beta * ds / 2.0
    return value, grad


def pearson_loss(d_ref: np.ndarray, d_out: np.ndarray, eps: float = 1e-6, mask: np.ndarray | None = None):
    """``1 - Cov(ref, out) / (std(ref) std(out) + eps)`` with gradient w.r.t. ``d_out``.

    Constant inputs contribute zero loss and zero gradient.
    """
    d_ref = np.asarray(d_ref, dtype=np.float64)
    d_out = np.asarray(d_out, dtype=np.float64)
    _check_same(d_ref, d_out)
    sel = np.ones(d_ref.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    r = d_ref[sel]
    o = d_out[sel]
    grad = np.zeros_like(d_out)
    if r.size < 2:
        return 0.0, grad
    rc = r - r.mean()
    oc = o - o.mean()
    sr = math.sqrt((rc * rc).mean())
    so = math.sqrt((oc * oc).mean())
    if sr < eps or so < eps:
        log.debug("degenerate depth for pearson loss (std %.3g / %.3g)", sr, so)
        return 0.0, grad
    n = r.size
    cov = (rc * oc).mean()
    den = sr * so + eps
    value = 1.0 - cov / den
    dcov = rc / n
    dso = oc / (n * so)
    grad[sel] = -(dcov / den - cov * sr * dso / den**2)
    return value, grad


def _crop(d: np.ndarray, patch: int) -> tuple[int, int]:
    return (d.shape[0] // patch) * patch, (d.shape[1] // patch) * patch


def _patches(d: np.ndarray, patch: int) -> np.ndarray:
    """(H, W) -> (Ph, Pw, patch*patch) view of the cropped raster."""
    h, w = _crop(d, patch)
    d = d[:h, :w]
    return d.reshape(h // patch, patch, w // patch, patch).transpose(0, 2, 1, 3).reshape(h // patch, w // patch, -1)


def _unpatch(p: np.ndarray, patch: int, shape: tuple[int, int]) -> np.ndarray:
    ph, pw, _ = p.shape
    out = np.zeros(shape)
    out[: ph * patch, : pw * patch] = p.reshape(ph, pw, patch, patch).transpose(0, 2, 1, 3).reshape(ph * patch, pw * patch)
    return out


def patch_normalize(d: np.ndarray, patch: int, eps: float = 1e-6) -> np.ndarray:
    """Per-patch ``(d - mean) / (std + eps)`` with the population std.

    Rows/columns beyond the largest multiple of ``patch`` are cropped.
    """
    p = _patches(np.asarray(d, dtype=np.float64), patch)
    mu = p.mean(axis=2, keepdims=True)
    sd = p.std(axis=2, keepdims=True)
    z = (p - mu) / (sd + eps)
    h, w = _crop(d, patch)
    return _unpatch(z, patch, (h, w))


def local_depth_loss(d_ref: np.ndarray, d_out: np.ndarray, patch: int = 8, eps: float = 1e-6):
    """Mean squared difference of patch-normalized depths.

    Returns ``(value, grad wrt d_out, per_patch_loss)``; the per-patch raster
    holds the mean squared difference inside each patch.
    """
    d_ref = np.asarray(d_ref, dtype=np.float64)
    d_out = np.asarray(d_out, dtype=np.float64)
    _check_same(d_ref, d_out)
    pr = _patches(d_ref, patch)
    po = _patches(d_out, patch)
    n = po.shape[2]
    zr = (pr - pr.mean(axis=2, keepdims=True)) / (pr.std(axis=2, keepdims=True) + eps)
    oc = po - po.mean(axis=2, keepdims=True)
    so = np.sqrt((oc * oc).mean(axis=2, keepdims=True))
    den = so + eps
    zo = oc / den
    diff = zo - zr
    per_patch = (diff * diff).mean(axis=2)
    value = float(per_patch.mean())
    # d value / d zo, then through the normalization
    gz = 2.0 * diff / diff.size
    gz_c = gz - gz.mean(axis=2, keepdims=True)
    safe_so = np.where(so > 0, so, 1.0)
    proj = (gz * oc).sum(axis=2, keepdims=True)
    g = gz_c / den - np.where(so > 0, oc * proj / (n * safe_so * den**2), 0.0)
    grad = _unpatch(g, patch, d_out.shape)
    return value, grad, per_patch


def schedule_weight(prev: float, t: int, m: int, mode: str = "per_step") -> float:
    """Recurrence ``w(t) = w(t-1) ** (t / m)`` clamped into (0, 1).

    ``mode="per_step"`` applies it every step; ``"per_horizon"`` only every
    ``m`` steps (which leaves the value unchanged at t = m); ``"constant"``
    never updates.
    """
    if t < 1 or mode == "constant":
        return prev
    if mode == "per_horizon" and t % m:
        return prev
    value = prev ** (t / m)
    return float(min(max(value, 1e-4), 1.0 - 1e-4))


@dataclass
class LossWeights:
    beta: float = 0.4
    lam: float = 0.1
    omega0: float = 0.05
    eps: float = 1e-6
    m: int = 6000
    depth_warmup: int = 1000

    def __post_init__(self):
        if min(self.beta, self.lam, self.omega0) < 0 or self.eps <= 0:
            raise ValueError("loss weights must be non-negative and eps positive")


@dataclass
class LossReport:
    l_color: float = 0.0
    l_g: float = 0.0
    l_l: float = 0.0
    l_depth: float = 0.0
    l_rdg: float = 0.0
    omega: float = 0.0
    total: float = 0.0
    depth_active: bool = False
    per_patch: np.ndarray | None = field(default=None, repr=False)

    def as_dict(self) -> dict:
        return {
            "l_color": self.l_color,
            "l_g": self.l_g,
            "l_l": self.l_l,
            "l_depth": self.l_depth,
            "l_rdg": self.l_rdg,
            "omega": self.omega,
            "total": self.total,
        }


def total_loss(
    l_color: float,
    l_g: float,
    l_l: float,
    l_rdg: float,
    weights: LossWeights,
    t: int,
    omega: float | None = None,
    per_patch: np.ndarray | None = None,
) -> LossReport:
    """Compose ``l_color + l_depth + omega * l_rdg`` with ``l_depth = l_g + lam * l_l``.

    Depth and guidance terms only count once ``t > depth_warmup``.
    ``omega`` defaults to the seed weight.
    """
    omega = weights.omega0 if omega is None else omega
    active = t > weights.depth_warmup
    if not active:
        l_g = l_l = l_rdg = 0.0
    l_depth = l_g + weights.lam * l_l
    total = l_color + l_depth + omega * l_rdg
    return LossReport(l_color, l_g, l_l, l_depth, l_rdg, omega, total, active, per_patch)


PSNR_CAP = 99.0


def psnr(img: np.ndarray, ref: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(img, dtype=np.float64) - ref) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return 20.0 * math.log10(1.0 / math.sqrt(mse))


def rmse(x: np.ndarray, ref: np.ndarray) -> float:
    return float(np.sqrt(np.mean((np.asarray(x, dtype=np.float64) - ref) ** 2)))


def metrics(image: np.ndarray, target: np.ndarray, depth: np.ndarray | None = None, depth_gt: np.ndarray | None = None) -> dict:
    out = {"psnr": psnr(image, target), "ssim": float(ssim(image, target))}
    if depth is not None and depth_gt is not None:
        out["rmse"] = rmse(depth, depth_gt)
    return out
