"""Front-to-back alpha compositing of Gaussians and its analytic backward pass.

Per pixel, contributors are ordered by the view depth of their means (one
global sort per view, ties broken by primitive index). Each contributor's
effective alpha is ``min(0.99, opacity * exp(-0.5 d^T cov2d^-1 d))`` and
compositing stops before the contributor that would push transmittance
below ``1e-4``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from numba import njit

from .scene import COV2D_FLOOR, Camera, GaussianSet, project_all, quat_to_rotmat, sigmoid

log = logging.getLogger(__name__)

ALPHA_CLAMP = 0.99
T_CUTOFF = 1e-4
DEPTH_EPS = 1e-6
CULL_SIGMA = 3.0


class TapeMismatch(RuntimeError):
    """The render tape no longer matches the Gaussian set it was recorded on."""


@dataclass
class _Tape:
    generation_tag: int
    n_prims: int
    cam: Camera
    cull_sigma: float | None
    prim: np.ndarray  # (K,) global index of each sorted, visible primitive
    t_view: np.ndarray  # (K, 3)
    mean2d: np.ndarray  # (K, 2)
    conic: np.ndarray  # (K, 2, 2)
    J: np.ndarray  # (K, 2, 3)
    V: np.ndarray  # (K, 3, 3)
    opacity: np.ndarray  # (K,)
    colors: np.ndarray  # (K, 3)
    bbox: np.ndarray  # (K, 4) inclusive pixel box x0, x1, y0, y1
    rec_pixel: np.ndarray  # (R,) flat pixel of each included contribution, grouped by primitive
    rec_gauss: np.ndarray  # (R,) Gaussian falloff at that pixel
    rec_trans: np.ndarray  # (R,) transmittance in front of the contribution
    rec_start: np.ndarray  # (K + 1,) record offsets per sorted primitive


@dataclass
class RenderOutput:
    image: np.ndarray  # (H, W, 3)
    depth_raw: np.ndarray  # (H, W)
    depth: np.ndarray  # (H, W), depth_raw / max(acc_alpha, eps)
    acc_alpha: np.ndarray  # (H, W)
    tape: _Tape | None = None


@dataclass
class GradientSet:
    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    screen_grad: np.ndarray  # (N,) |dL/d mean2d| in NDC units
    visible: np.ndarray  # (N,) bool, primitive touched at least one pixel

    @classmethod
    def zeros(cls, n: int) -> "GradientSet":
        return cls(
            np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 3)), np.zeros(n), np.zeros((n, 3)),
            np.zeros(n), np.zeros(n, dtype=bool),
        )

    def flat(self) -> np.ndarray:
        """Parameter gradients concatenated per primitive in field order."""
        return np.concatenate(
            [self.positions, self.rotations, self.log_scales, self.opacity_logits[:, None], self.colors], axis=1
        ).ravel()

    def __iadd__(self, other: "GradientSet") -> "GradientSet":
        self.positions += other.positions
        self.rotations += other.rotations
        self.log_scales += other.log_scales
        self.opacity_logits += other.opacity_logits
        self.colors += other.colors
        self.screen_grad += other.screen_grad
        self.visible |= other.visible
        return self


def _inv2(c: np.ndarray) -> np.ndarray:
    det = c[:, 0, 0] * c[:, 1, 1] - c[:, 0, 1] * c[:, 1, 0]
    out = np.empty_like(c)
    out[:, 0, 0] = c[:, 1, 1] / det
    out[:, 1, 1] = c[:, 0, 0] / det
    out[:, 0, 1] = -c[:, 0, 1] / det
    out[:, 1, 0] = -c[:, 1, 0] / det
    return out


def _zero_output(h: int, w: int) -> RenderOutput:
    return RenderOutput(np.zeros((h, w, 3)), np.zeros((h, w)), np.zeros((h, w)), np.zeros((h, w)))


@njit(cache=True, fastmath=True)
def _composite(H, W, mean2d, conic, opacity, colors, z, bbox):
    """Front-to-back compositing, primitive-major in depth order.

    Every included (primitive, pixel) pair is recorded with its Gaussian
    value and the transmittance in front of it, so the backward pass can
    replay them without re-evaluating the footprint.
    """
    K = mean2d.shape[0]
    P = H * W
    cap = 0
    for k in range(K):
        cap += max(bbox[k, 1] - bbox[k, 0] + 1, 0) * max(bbox[k, 3] - bbox[k, 2] + 1, 0)
    rec_p = np.empty(cap, dtype=np.int32)
    rec_G = np.empty(cap)
    rec_T = np.empty(cap)
    rec_start = np.zeros(K + 1, dtype=np.int64)
    T = np.ones(P)
    done = np.zeros(P, dtype=np.bool_)
    image = np.zeros((P, 3))
    draw = np.zeros(P)
    acc = np.zeros(P)
    n = 0
    for k in range(K):
        rec_start[k] = n
        a, b, c = conic[k, 0, 0], conic[k, 0, 1] + conic[k, 1, 0], conic[k, 1, 1]
        for py in range(bbox[k, 2], bbox[k, 3] + 1):
            for px in range(bbox[k, 0], bbox[k, 1] + 1):
                p = py * W + px
                if done[p]:
                    continue
                dx = px - mean2d[k, 0]
                dy = py - mean2d[k, 1]
                G = np.exp(-0.5 * (a * dx * dx + b * dx * dy + c * dy * dy))
                A = min(ALPHA_CLAMP, opacity[k] * G)
                t_next = T[p] * (1.0 - A)
                if t_next < T_CUTOFF:
                    done[p] = True
                    continue
                w = A * T[p]
                for ch in range(3):
                    image[p, ch] += w * colors[k, ch]
                draw[p] += w * z[k]
                acc[p] += w
                rec_p[n] = p
                rec_G[n] = G
                rec_T[n] = T[p]
                n += 1
                T[p] = t_next
    rec_start[K] = n
    return image, draw, acc, rec_p[:n], rec_G[:n], rec_T[:n], rec_start


@njit(cache=True, fastmath=True)
def _composite_backward(W, mean2d, conic, opacity, colors, z, rec_p, rec_G, rec_T, rec_start, gI, gRaw, gAcc):
    """Reverse replay of the recorded contributions accumulating per-primitive gradients.

    Returns dL/d(color, depth, opacity, mean2d, conic) per sorted primitive.
    """
    K = mean2d.shape[0]
    behind = np.zeros(gRaw.shape[0])
    d_col = np.zeros((K, 3))
    d_z = np.zeros(K)
    d_op = np.zeros(K)
    d_mean = np.zeros((K, 2))
    d_conic = np.zeros((K, 2, 2))
    for k in range(K - 1, -1, -1):
        op = opacity[k]
        c00, c01, c10, c11 = conic[k, 0, 0], conic[k, 0, 1], conic[k, 1, 0], conic[k, 1, 1]
        col0, col1, col2, zk = colors[k, 0], colors[k, 1], colors[k, 2], z[k]
        for r in range(rec_start[k], rec_start[k + 1]):
            p = rec_p[r]
            G = rec_G[r]
            Tk = rec_T[r]
            raw = op * G
            A = min(ALPHA_CLAMP, raw)
            g = col0 * gI[p, 0] + col1 * gI[p, 1] + col2 * gI[p, 2] + zk * gRaw[p] + gAcc[p]
            w = A * Tk
            dA = Tk * g - behind[p] / (1.0 - A)
            behind[p] += w * g
            for ch in range(3):
                d_col[k, ch] += w * gI[p, ch]
            d_z[k] += w * gRaw[p]
            if raw < ALPHA_CLAMP:
                py, px = divmod(p, W)
                dx = px - mean2d[k, 0]
                dy = py - mean2d[k, 1]
                d_op[k] += dA * G
                gG = dA * raw
                d_mean[k, 0] += gG * (c00 * dx + c01 * dy)
                d_mean[k, 1] += gG * (c10 * dx + c11 * dy)
                d_conic[k, 0, 0] += -0.5 * gG * dx * dx
                d_conic[k, 0, 1] += -0.5 * gG * dx * dy
                d_conic[k, 1, 0] += -0.5 * gG * dy * dx
                d_conic[k, 1, 1] += -0.5 * gG * dy * dy
    return d_col, d_z, d_op, d_mean, d_conic


def render(gset: GaussianSet, cam: Camera, *, cull_sigma: float | None = CULL_SIGMA) -> RenderOutput:
    """Render color, raw and normalized depth, and accumulated alpha.

    ``cull_sigma=None`` evaluates every primitive at every pixel (no
    screen-space box cull), which makes the output smooth in all parameters.
    """
    H, W = cam.height, cam.width
    n = len(gset)
    if n == 0:
        log.debug("empty scene")
        return _zero_output(H, W)

    t_view, mean2d, cov2d, J, V = project_all(gset, cam)
    valid = np.isfinite(t_view[:, 2]) & (t_view[:, 2] > 0.5 * cam.near)
    idx = np.flatnonzero(valid)
    if idx.size == 0:
        log.debug("no primitive in front of the camera")
        return _zero_output(H, W)
    order = idx[np.lexsort((idx, t_view[idx, 2]))]

    t_view, mean2d, cov2d, J, V = t_view[order], mean2d[order], cov2d[order], J[order], V[order]
    conic = _inv2(cov2d)
    opacity = sigmoid(gset.opacity_logits[order])
    colors = gset.colors[order]
    K = order.size

    if cull_sigma is None:
        x0 = np.zeros(K, dtype=np.int64)
        x1 = np.full(K, W - 1, dtype=np.int64)
        y0 = np.zeros(K, dtype=np.int64)
        y1 = np.full(K, H - 1, dtype=np.int64)
    else:
        rx = cull_sigma * np.sqrt(cov2d[:, 0, 0])
        ry = cull_sigma * np.sqrt(cov2d[:, 1, 1])
        x0 = np.maximum(np.ceil(mean2d[:, 0] - rx), 0).astype(np.int64)
        x1 = np.minimum(np.floor(mean2d[:, 0] + rx), W - 1).astype(np.int64)
        y0 = np.maximum(np.ceil(mean2d[:, 1] - ry), 0).astype(np.int64)
        y1 = np.minimum(np.floor(mean2d[:, 1] + ry), H - 1).astype(np.int64)
    bbox = np.stack([x0, x1, y0, y1], axis=1)
    z = np.ascontiguousarray(t_view[:, 2])
    img, draw, acc, rec_p, rec_G, rec_T, rec_start = _composite(H, W, mean2d, conic, opacity, colors, z, bbox)
    image = img.reshape(H, W, 3)
    depth_raw = draw.reshape(H, W)
    acc = acc.reshape(H, W)
    depth = depth_raw / np.maximum(acc, DEPTH_EPS)

    tape = _Tape(
        gset.generation_tag, n, cam, cull_sigma, order, t_view, mean2d, conic, J, V, opacity, colors,
        bbox, rec_p, rec_G, rec_T, rec_start,
    )
    return RenderOutput(image, depth_raw, depth, acc, tape)


def _drot_dq(q: np.ndarray, dL_dR: np.ndarray) -> np.ndarray:
    """Chain dL/dR (K,3,3) through R(q / |q|) to the raw quaternion (K,4)."""
    norm = np.linalg.norm(q, axis=1, keepdims=True)
    u = q / norm
    w, x, y, z = u[:, 0], u[:, 1], u[:, 2], u[:, 3]
    g = dL_dR
    gw = 2 * (-z * g[:, 0, 1] + y * g[:, 0, 2] + z * g[:, 1, 0] - x * g[:, 1, 2] - y * g[:, 2, 0] + x * g[:, 2, 1])
    gx = 2 * (
        y * g[:, 0, 1] + z * g[:, 0, 2] + y * g[:, 1, 0] - 2 * x * g[:, 1, 1] - w * g[:, 1, 2]
        + z * g[:, 2, 0] + w * g[:, 2, 1] - 2 * x * g[:, 2, 2]
    )
    gy = 2 * (
        -2 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2] + x * g[:, 1, 0] + z * g[:, 1, 2]
        - w * g[:, 2, 0] + z * g[:, 2, 1] - 2 * y * g[:, 2, 2]
    )
    gz = 2 * (
        -2 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2] + w * g[:, 1, 0] - 2 * z * g[:, 1, 1]
        + y * g[:, 1, 2] + x * g[:, 2, 0] + y * g[:, 2, 1]
    )
    gu = np.stack([gw, gx, gy, gz], axis=1)
    # project out the radial component of the normalization
    return (gu - u * (gu * u).sum(axis=1, keepdims=True)) / norm


def backward(
    out: RenderOutput,
    gset: GaussianSet,
    cam: Camera,
    dL_dimage: np.ndarray | None,
    dL_ddepth: np.ndarray | None,
    dL_ddepth_raw: np.ndarray | None = None,
    dL_dacc: np.ndarray | None = None,
) -> GradientSet:
    """Gradients of ``sum(dL_dimage * image) + sum(dL_ddepth * depth)`` w.r.t. every primitive.

    ``depth`` is the alpha-normalized depth; cotangents for the raw depth and
    the accumulated alpha may be supplied as well.
    """
    n = len(gset)
    tape = out.tape
    if tape is None:
        return GradientSet.zeros(n)
    if tape.generation_tag != gset.generation_tag or tape.n_prims != n:
        raise TapeMismatch(
            f"tape recorded on generation {tape.generation_tag} with {tape.n_prims} primitives, "
            f"set is generation {gset.generation_tag} with {n}"
        )
    H, W = cam.height, cam.width
    P = H * W
    gI = np.zeros((P, 3)) if dL_dimage is None else np.asarray(dL_dimage, dtype=np.float64).reshape(P, 3)
    gRaw = np.zeros(P) if dL_ddepth_raw is None else np.asarray(dL_ddepth_raw, dtype=np.float64).reshape(P).copy()
    gAcc = np.zeros(P) if dL_dacc is None else np.asarray(dL_dacc, dtype=np.float64).reshape(P).copy()
    if dL_ddepth is not None:
        gD = np.asarray(dL_ddepth, dtype=np.float64).reshape(P)
        acc = out.acc_alpha.reshape(P)
        live = acc > DEPTH_EPS
        denom = np.maximum(acc, DEPTH_EPS)
        gRaw += gD / denom
        gAcc -= np.where(live, gD * out.depth_raw.reshape(P) / denom**2, 0.0)

    K = tape.prim.size
    z = np.ascontiguousarray(tape.t_view[:, 2])
    conic = tape.conic
    dL_dcolor, dL_dz, dL_dopacity, dL_dmean, dL_dconic = _composite_backward(
        W, tape.mean2d, conic, tape.opacity, tape.colors, z,
        tape.rec_pixel, tape.rec_gauss, tape.rec_trans, tape.rec_start, np.ascontiguousarray(gI), gRaw, gAcc,
    )
    dL_dcov2d = -conic @ dL_dconic @ conic
    dL_dcov2d = 0.5 * (dL_dcov2d + np.transpose(dL_dcov2d, (0, 2, 1)))

    # cov2d = J V J^T + floor
    Jm, V = tape.J, tape.V
    dL_dJ = 2.0 * dL_dcov2d @ Jm @ V
    dL_dV = np.transpose(Jm, (0, 2, 1)) @ dL_dcov2d @ Jm

    t = tape.t_view
    tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]
    fx, fy = cam.fx, cam.fy
    dL_dt = np.zeros((K, 3))
    dL_dt[:, 0] = dL_dmean[:, 0] * fx / tz
    dL_dt[:, 1] = dL_dmean[:, 1] * fy / tz
    dL_dt[:, 2] = -(dL_dmean[:, 0] * fx * tx + dL_dmean[:, 1] * fy * ty) / tz**2 + dL_dz
    # J depends on the view-space mean
    dL_dt[:, 0] += dL_dJ[:, 0, 2] * (-fx / tz**2)
    dL_dt[:, 1] += dL_dJ[:, 1, 2] * (-fy / tz**2)
    dL_dt[:, 2] += (
        dL_dJ[:, 0, 0] * (-fx / tz**2)
        + dL_dJ[:, 0, 2] * (2 * fx * tx / tz**3)
        + dL_dJ[:, 1, 1] * (-fy / tz**2)
        + dL_dJ[:, 1, 2] * (2 * fy * ty / tz**3)
    )
    Wr = cam.rotation
    dL_dpos = dL_dt @ Wr

    dL_dSigma = Wr.T[None] @ dL_dV @ Wr[None]
    q_raw = gset.rotations[tape.prim]
    R = quat_to_rotmat(q_raw)
    s = np.exp(gset.log_scales[tape.prim])
    M = R * s[:, None, :]
    dL_dM = (dL_dSigma + np.transpose(dL_dSigma, (0, 2, 1))) @ M
    dL_ds = np.einsum("kij,kij->kj", R, dL_dM) * s
    dL_dR = dL_dM * s[:, None, :]
    dL_dq = _drot_dq(q_raw, dL_dR)

    grads = GradientSet.zeros(n)
    p = tape.prim
    grads.positions[p] = dL_dpos
    grads.rotations[p] = dL_dq
    grads.log_scales[p] = dL_ds
    op = tape.opacity
    grads.opacity_logits[p] = dL_dopacity * op * (1.0 - op)
    grads.colors[p] = dL_dcolor
    grads.screen_grad[p] = np.hypot(dL_dmean[:, 0] * 0.5 * W, dL_dmean[:, 1] * 0.5 * H)
    grads.visible[p] = np.diff(tape.rec_start) > 0
    return grads
