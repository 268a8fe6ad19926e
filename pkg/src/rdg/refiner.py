"""RGB-guided depth refinement by labeled-MRF energy minimization.

The coarse depth is quantized into ``levels`` labels and relabeled with
iterated conditional modes (ICM), first under a wide-kernel parameter set,
then under a narrow one. All energy terms are evaluated in 8-bit units:
depth labels map linearly onto [0, 255] across the coarse depth range, and
the guide image is scaled by 255.

Energy of a labeling ``x`` given the observed (coarse) labels ``o``::

    E = sum_i [w_u psi_u(i) g_u(i) + w_h psi_h(i)]
        + sum_{i<j, |i-j| <= radius} w_p psi_p(i, j) g_p(i, j)

``psi_u(i)`` is ``-log SSIM_i`` when ``x_i == o_i`` and
``-log((1 - SSIM_i) / (levels - 1))`` otherwise, where ``SSIM_i`` compares
z-normalized windows of the current depth labeling and the image luminance
around pixel i.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np
from numba import njit

log = logging.getLogger(__name__)

LUMA = np.array([0.299, 0.587, 0.114])
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
_FLAT_VAR = 1e-6  # window variance (8-bit units squared) treated as flat


class DegenerateDepth(ValueError):
    pass


class ResolutionMismatch(ValueError):
    pass


class EnergyIncrease(AssertionError):
    pass


@dataclass(frozen=True)
class EnergyParams:
    w_u: float = 1.0
    w_p: float = 10.0
    w_h: float = 5.0
    theta_alpha: float = 10.0  # px
    theta_mu: float = 2.0  # depth, 8-bit units
    theta_beta: float = 2.0  # color, 8-bit units
    tau: float = 5.0
    gamma: float = 10.0
    levels: int = 64
    ssim_radius: int = 3
    neighborhood_radius: int = 3
    icm_sweeps: int = 10
    eps: float = 1e-6
    hf_scale: float = 1.0  # multiplies psi_h; 1 keeps it in the same 8-bit gradient units as g_u and g_p

    def __post_init__(self):
        if min(self.theta_alpha, self.theta_mu, self.theta_beta, self.tau, self.gamma) <= 0:
            raise ValueError("kernel bandwidths must be positive")
        if self.levels < 2:
            raise ValueError("need at least two labels")
        if min(self.w_u, self.w_p, self.w_h) < 0:
            raise ValueError("weights must be non-negative")

    @property
    def label_step(self) -> float:
        return 255.0 / (self.levels - 1)


COARSE = EnergyParams(theta_alpha=35.0, theta_mu=10.0, theta_beta=10.0, neighborhood_radius=9)
FINE = EnergyParams(theta_alpha=10.0, theta_mu=2.0, theta_beta=2.0, neighborhood_radius=3)


@dataclass
class LabeledDepthField:
    labels: np.ndarray  # (H, W) int
    level_values: np.ndarray  # (levels,) strictly increasing depths

    def decode(self) -> np.ndarray:
        return self.level_values[self.labels]


def quantize(depth: np.ndarray, levels: int) -> LabeledDepthField:
    """Nearest-level labels on ``levels`` values spanning [min, max] of ``depth``."""
    depth = np.asarray(depth, dtype=np.float64)
    lo, hi = float(depth.min()), float(depth.max())
    if hi - lo <= 0:
        raise DegenerateDepth("constant depth map")
    values = np.linspace(lo, hi, levels)
    labels = np.rint((depth - lo) / (hi - lo) * (levels - 1)).astype(np.int64)
    return LabeledDepthField(np.clip(labels, 0, levels - 1), values)


def _luminance255(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    y = image @ LUMA if image.ndim == 3 else image
    return 255.0 * y


def _color255(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    return 255.0 * (image if image.ndim == 3 else image[..., None])


def central_gradients(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Central differences with replicate-padded borders; returns (d/dx, d/dy)."""
    p = np.pad(a, 1, mode="edge")
    gx = (p[1:-1, 2:] - p[1:-1, :-2]) / 2.0
    gy = (p[2:, 1:-1] - p[:-2, 1:-1]) / 2.0
    return gx, gy


def _box_sums(a: np.ndarray, r: int) -> tuple[np.ndarray, np.ndarray]:
    """Sums and counts over the (2r+1)^2 window around every pixel, clipped to the raster."""
    H, W = a.shape
    S = np.zeros((H + 1, W + 1))
    S[1:, 1:] = a.cumsum(0).cumsum(1)
    rows = np.arange(H)
    cols = np.arange(W)
    r0 = np.maximum(rows - r, 0)[:, None]
    r1 = np.minimum(rows + r + 1, H)[:, None]
    c0 = np.maximum(cols - r, 0)[None, :]
    c1 = np.minimum(cols + r + 1, W)[None, :]
    total = S[r1, c1] - S[r0, c1] - S[r1, c0] + S[r0, c0]
    return total, (r1 - r0) * (c1 - c0)


def ssim_from_moments(n, sx, sxx, sy, syy, sxy) -> np.ndarray:
    """SSIM of z-normalized windows from raw window moments.

    After z-normalization both means vanish and each variance is 1 (or 0 for
    a flat window), so SSIM reduces to ``(2 rho + C2) / (vx + vy + C2)``.
    """
    mx = sx / n
    my = sy / n
    vx = sxx / n - mx * mx
    vy = syy / n - my * my
    cov = sxy / n - mx * my
    fx = vx > _FLAT_VAR
    fy = vy > _FLAT_VAR
    both = fx & fy
    with np.errstate(invalid="ignore", divide="ignore"):
        rho = np.where(both, cov / np.sqrt(np.where(both, vx * vy, 1.0)), 0.0)
    rho = np.clip(rho, -1.0, 1.0)
    return (2.0 * rho + SSIM_C2) / (fx.astype(float) + fy.astype(float) + SSIM_C2)


def window_ssim(depth_units: np.ndarray, lum255: np.ndarray, radius: int) -> np.ndarray:
    """Per-pixel z-normalized SSIM between depth and luminance windows."""
    sx, n = _box_sums(depth_units, radius)
    sxx, _ = _box_sums(depth_units * depth_units, radius)
    sy, _ = _box_sums(lum255, radius)
    syy, _ = _box_sums(lum255 * lum255, radius)
    sxy, _ = _box_sums(depth_units * lum255, radius)
    return ssim_from_moments(n, sx, sxx, sy, syy, sxy)


def unary_from_ssim(s, same_label, levels: int, eps: float = 1e-6):
    """Piecewise unary cost from a window SSIM value."""
    s = np.asarray(s, dtype=np.float64)
    keep = -np.log(np.clip(s, eps, 1.0))
    change = -np.log(np.clip((1.0 - s) / (levels - 1), eps, 1.0))
    return np.where(same_label, keep, change)


def pairwise_cost(x_i, x_j, pix_i, pix_j, y_i, y_j, params: EnergyParams):
    """Edge-aware pairwise cost; depth and color in 8-bit units, positions in px."""
    dx2 = (np.asarray(x_i, dtype=np.float64) - x_j) ** 2
    dp2 = np.sum((np.asarray(pix_i, dtype=np.float64) - np.asarray(pix_j, dtype=np.float64)) ** 2, axis=-1)
    dc2 = np.sum((np.asarray(y_i, dtype=np.float64) - np.asarray(y_j, dtype=np.float64)) ** 2, axis=-1)
    return (1.0 - np.exp(-dx2 / (2 * params.theta_mu**2))) * np.exp(
        -dp2 / (2 * params.theta_alpha**2) - dc2 / (2 * params.theta_beta**2)
    )


@dataclass
class HighFrequency:
    psi_h: np.ndarray
    g_u: np.ndarray
    grad_x: np.ndarray  # image luminance gradient, 8-bit units
    grad_y: np.ndarray
    gamma: float

    def g_p(self, i, j) -> np.ndarray:
        """Pairwise weight between pixels ``i`` and ``j`` given as (row, col) index arrays."""
        i = tuple(np.asarray(i).T) if np.ndim(i) > 1 else tuple(i)
        j = tuple(np.asarray(j).T) if np.ndim(j) > 1 else tuple(j)
        d2 = (self.grad_x[i] - self.grad_x[j]) ** 2 + (self.grad_y[i] - self.grad_y[j]) ** 2
        return np.exp(-d2 / (2 * self.gamma**2))


def hf_terms(lum255: np.ndarray, depth_units: np.ndarray, params: EnergyParams) -> HighFrequency:
    """High-frequency residual term and weights; both inputs in 8-bit units."""
    if lum255.shape != depth_units.shape:
        raise ResolutionMismatch(f"{lum255.shape} vs {depth_units.shape}")
    ix, iy = central_gradients(lum255)
    dx, dy = central_gradients(depth_units)
    r2 = (ix - dx) ** 2 + (iy - dy) ** 2
    return HighFrequency(r2 * params.hf_scale, np.exp(-r2 / (2 * params.tau**2)), ix, iy, params.gamma)


def _half_offsets(radius: int) -> list[tuple[int, int]]:
    out = []
    for dy in range(0, radius + 1):
        for dx in range(-radius, radius + 1):
            if (dy > 0 or dx > 0) and dy * dy + dx * dx <= radius * radius:
                out.append((dy, dx))
    return out


def _pair_kernel(col255: np.ndarray, gx: np.ndarray, gy: np.ndarray, dy: int, dx: int, params: EnergyParams):
    """Spatial-color kernel times g_p for pairs (p, p + (dy, dx)); returns slices and weights."""
    H, W = gx.shape
    if abs(dy) >= H or abs(dx) >= W:
        return None, None, np.zeros(0)
    a = (slice(max(0, -dy), H - max(0, dy)), slice(max(0, -dx), W - max(0, dx)))
    b = (slice(a[0].start + dy, a[0].stop + dy), slice(a[1].start + dx, a[1].stop + dx))
    dc2 = ((col255[a] - col255[b]) ** 2).sum(axis=-1)
    dg2 = (gx[a] - gx[b]) ** 2 + (gy[a] - gy[b]) ** 2
    k = np.exp(-(dy * dy + dx * dx) / (2 * params.theta_alpha**2) - dc2 / (2 * params.theta_beta**2))
    return a, b, k * np.exp(-dg2 / (2 * params.gamma**2))


def total_energy(field: LabeledDepthField, image: np.ndarray, params: EnergyParams, observed: np.ndarray) -> float:
    """Energy of ``field`` for the given guide image and observed (coarse) labels."""
    labels = np.asarray(field.labels)
    if labels.shape != image.shape[:2] or observed.shape != labels.shape:
        raise ResolutionMismatch("labels, observation and image must share a resolution")
    x = labels * params.label_step
    y = _luminance255(image)
    col = _color255(image)
    s = window_ssim(x, y, params.ssim_radius)
    psi_u = unary_from_ssim(s, labels == observed, params.levels, params.eps)
    hf = hf_terms(y, x, params)
    g_u = hf_terms(y, observed * params.label_step, params).g_u
    energy = float(np.sum(params.w_u * psi_u * g_u + params.w_h * hf.psi_h))
    if params.w_p:
        pair = 0.0
        for dy, dx in _half_offsets(params.neighborhood_radius):
            a, b, k = _pair_kernel(col, hf.grad_x, hf.grad_y, dy, dx, params)
            if k.size == 0:
                continue
            d2 = (x[a] - x[b]) ** 2
            pair += float(np.sum((1.0 - np.exp(-d2 / (2 * params.theta_mu**2))) * k))
        energy += params.w_p * pair
    return energy


def unary_cost(field: LabeledDepthField, image: np.ndarray, pixel, candidate: int, params: EnergyParams, observed: np.ndarray) -> float:
    """Unary cost at ``pixel`` if its label were ``candidate`` (other labels fixed)."""
    labels = np.array(field.labels)
    labels[pixel] = candidate
    x = labels * params.label_step
    s = window_ssim(x, _luminance255(image), params.ssim_radius)[pixel]
    return float(unary_from_ssim(s, candidate == observed[pixel], params.levels, params.eps))


@njit(cache=True)
def _ssim_z(n, sx, sxx, sy, syy, sxy):
    mx = sx / n
    my = sy / n
    vx = sxx / n - mx * mx
    vy = syy / n - my * my
    cov = sxy / n - mx * my
    fx = vx > _FLAT_VAR
    fy = vy > _FLAT_VAR
    rho = 0.0
    if fx and fy:
        rho = min(max(cov / np.sqrt(vx * vy), -1.0), 1.0)
    nx = 1.0 if fx else 0.0
    ny = 1.0 if fy else 0.0
    return (2.0 * rho + SSIM_C2) / (nx + ny + SSIM_C2)


@njit(cache=True)
def _local_energy(r0, c0, labels, x, obs, y, gix, giy, gu, pair_k, offsets, vals, psi_table, coef, R, out):
    """Energy of every term touching pixel (r0, c0), for each candidate label, into ``out``."""
    w_u, w_p, w_h, hf_scale, eps = coef[0], coef[1], coef[2], coef[3], coef[4]
    H, W = x.shape
    L = vals.shape[0]
    cur = x[r0, c0]
    yi = y[r0, c0]
    log_levels = np.log(L - 1.0)
    for c in range(L):
        out[c] = 0.0
    for kr in range(max(0, r0 - R), min(H, r0 + R + 1)):
        for kc in range(max(0, c0 - R), min(W, c0 + R + 1)):
            # window moments with the current labels
            sx = sxx = sy = syy = sxy = 0.0
            n = 0
            for a in range(max(0, kr - R), min(H, kr + R + 1)):
                for b in range(max(0, kc - R), min(W, kc + R + 1)):
                    xv = x[a, b]
                    yv = y[a, b]
                    sx += xv
                    sxx += xv * xv
                    sy += yv
                    syy += yv * yv
                    sxy += xv * yv
                    n += 1
            centre = kr == r0 and kc == c0
            same_fixed = labels[kr, kc] == obs[kr, kc]
            # neighbours used by the central differences at (kr, kc)
            xr = min(kc + 1, W - 1)
            xl = max(kc - 1, 0)
            yd = min(kr + 1, H - 1)
            yu = max(kr - 1, 0)
            for c in range(L):
                v = vals[c]
                dv = v - cur
                s = _ssim_z(n, sx + dv, sxx + v * v - cur * cur, sy, syy, sxy + dv * yi)
                same = (c == obs[r0, c0]) if centre else same_fixed
                if same:
                    psi = -np.log(min(max(s, eps), 1.0))
                else:
                    psi = -np.log(min(max((1.0 - s) / (L - 1.0), eps), 1.0))
                hi = v if (kr == r0 and xr == c0) else x[kr, xr]
                lo = v if (kr == r0 and xl == c0) else x[kr, xl]
                gx = (hi - lo) / 2.0
                hi = v if (yd == r0 and kc == c0) else x[yd, kc]
                lo = v if (yu == r0 and kc == c0) else x[yu, kc]
                gy = (hi - lo) / 2.0
                rx = gix[kr, kc] - gx
                ry = giy[kr, kc] - gy
                r2 = rx * rx + ry * ry
                out[c] += w_u * psi * gu[kr, kc] + w_h * r2 * hf_scale
    if w_p != 0.0:
        # psi_p depends on the label difference only; psi_table[L - 1 + c - l_j]
        for m in range(offsets.shape[0]):
            jr = r0 + offsets[m, 0]
            jc = c0 + offsets[m, 1]
            if jr < 0 or jr >= H or jc < 0 or jc >= W:
                continue
            k = w_p * pair_k[r0, c0, m]
            if k == 0.0:
                continue
            base = L - 1 - labels[jr, jc]
            for c in range(L):
                out[c] += k * psi_table[base + c]
    return out


@njit(cache=True)
def _sweep(labels, x, obs, y, gix, giy, gu, pair_k, offsets, vals, psi_table, coef, R):
    H, W = x.shape
    e = np.empty(vals.shape[0])
    changed = 0
    for r in range(H):
        for c in range(W):
            _local_energy(r, c, labels, x, obs, y, gix, giy, gu, pair_k, offsets, vals, psi_table, coef, R, e)
            cur = labels[r, c]
            best = np.argmin(e)
            if best != cur and e[best] < e[cur] - 1e-9 * max(1.0, abs(e[cur])):
                labels[r, c] = best
                x[r, c] = vals[best]
                changed += 1
    return changed


class _ICM:
    """Single-site ICM with exact local energy deltas over all labels."""

    def __init__(self, labels: np.ndarray, observed: np.ndarray, image: np.ndarray, params: EnergyParams):
        self.p = params
        self.labels = np.array(labels, dtype=np.int64)
        self.obs = np.ascontiguousarray(observed, dtype=np.int64)
        self.H, self.W = self.labels.shape
        self.vals = np.arange(params.levels) * params.label_step
        self.x = self.vals[self.labels]
        self.y = _luminance255(image)
        self.col = _color255(image)
        self.gix, self.giy = central_gradients(self.y)
        self.gu = hf_terms(self.y, self.vals[self.obs], params).g_u
        self.coef = np.array([params.w_u, params.w_p, params.w_h, params.hf_scale, params.eps])
        diffs = np.arange(-(params.levels - 1), params.levels) * params.label_step
        self.psi_table = 1.0 - np.exp(-(diffs**2) / (2 * params.theta_mu**2))
        self._build_pairs()

    def _build_pairs(self):
        r = self.p.neighborhood_radius
        offs = [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1) if (dy or dx) and dy * dy + dx * dx <= r * r]
        self.offsets = np.array(offs, dtype=np.int64).reshape(-1, 2)
        H, W = self.H, self.W
        self.pair_k = np.zeros((H, W, len(offs)))
        for n, (dy, dx) in enumerate(offs):
            if abs(dy) >= H or abs(dx) >= W:
                continue
            a = (slice(max(0, -dy), H - max(0, dy)), slice(max(0, -dx), W - max(0, dx)))
            b = (slice(a[0].start + dy, a[0].stop + dy), slice(a[1].start + dx, a[1].stop + dx))
            dc2 = ((self.col[a] - self.col[b]) ** 2).sum(axis=-1)
            dg2 = (self.gix[a] - self.gix[b]) ** 2 + (self.giy[a] - self.giy[b]) ** 2
            self.pair_k[a + (n,)] = np.exp(
                -(dy * dy + dx * dx) / (2 * self.p.theta_alpha**2)
                - dc2 / (2 * self.p.theta_beta**2)
                - dg2 / (2 * self.p.gamma**2)
            )

    def local_energy(self, r0: int, c0: int) -> np.ndarray:
        out = np.empty(self.p.levels)
        return _local_energy(
            r0, c0, self.labels, self.x, self.obs, self.y, self.gix, self.giy, self.gu,
            self.pair_k, self.offsets, self.vals, self.psi_table, self.coef, self.p.ssim_radius, out,
        )

    def sweep(self) -> int:
        return int(_sweep(
            self.labels, self.x, self.obs, self.y, self.gix, self.giy, self.gu,
            self.pair_k, self.offsets, self.vals, self.psi_table, self.coef, self.p.ssim_radius,
        ))


def icm(
    labels: np.ndarray,
    observed: np.ndarray,
    image: np.ndarray,
    params: EnergyParams,
    *,
    check_monotone: bool = True,
) -> tuple[np.ndarray, list[float]]:
    """Run ICM sweeps until no label changes or ``params.icm_sweeps`` is reached.

    Returns the final labels and the energy after each sweep (index 0 is the
    starting energy).
    """
    solver = _ICM(labels, observed, image, params)
    levels = np.linspace(0.0, 1.0, params.levels)

    def energy():
        return total_energy(LabeledDepthField(solver.labels, levels), image, params, solver.obs)

    history = [energy()]
    for sweep in range(params.icm_sweeps):
        changed = solver.sweep()
        e = energy()
        if check_monotone and e > history[-1] + 1e-9 * max(1.0, abs(history[-1])):
            raise EnergyIncrease(f"sweep {sweep}: energy rose from {history[-1]!r} to {e!r}")
        history.append(e)
        log.debug("icm sweep %d: %d changes, energy %.6f", sweep, changed, e)
        if changed == 0:
            break
    return solver.labels, history


def refine(
    coarse_depth: np.ndarray,
    image: np.ndarray,
    coarse: EnergyParams = COARSE,
    fine: EnergyParams = FINE,
    *,
    return_field: bool = False,
):
    """Refine a coarse depth map with the two-pass (wide, then narrow kernel) ICM.

    A constant input is returned unchanged.
    """
    coarse_depth = np.asarray(coarse_depth, dtype=np.float64)
    image = np.asarray(image, dtype=np.float64)
    if coarse_depth.shape != image.shape[:2]:
        raise ResolutionMismatch(f"depth {coarse_depth.shape} vs image {image.shape[:2]}")
    if not np.all(np.isfinite(coarse_depth)):
        raise ValueError("coarse depth must be finite")
    if coarse.levels != fine.levels:
        raise ValueError("both passes must use the same label count")
    lo, hi = float(coarse_depth.min()), float(coarse_depth.max())
    if hi - lo < fine.eps:
        log.warning("degenerate depth range %.3g; returning input", hi - lo)
        out = coarse_depth.copy()
        return (out, None) if return_field else out
    field = quantize(coarse_depth, coarse.levels)
    observed = field.labels.copy()
    labels, _ = icm(observed, observed, image, coarse)
    labels, _ = icm(labels, observed, image, fine)
    result = LabeledDepthField(labels, field.level_values)
    out = result.decode()
    return (out, result) if return_field else out


def with_levels(params: EnergyParams, levels: int) -> EnergyParams:
    return replace(params, levels=levels)
