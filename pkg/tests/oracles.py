"""Independent reference implementations used only by the tests."""

from __future__ import annotations

import math

import numpy as np
from numba import njit

LUMA = (0.299, 0.587, 0.114)
C2 = 0.03**2


def naive_render(gset, cam, cov_floor=0.3, alpha_clamp=0.99, t_min=1e-4):
    """Per-pixel loop renderer with no tape and no culling shortcuts."""
    H, W = cam.height, cam.width
    img = np.zeros((H, W, 3))
    draw = np.zeros((H, W))
    acc = np.zeros((H, W))
    R = np.asarray(cam.rotation)
    t = np.asarray(cam.translation)
    items = []
    for i in range(len(gset)):
        q = gset.rotations[i] / np.linalg.norm(gset.rotations[i])
        w, x, y, z = q
        rot = np.array([
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ])
        S = np.diag(np.exp(gset.log_scales[i]))
        sigma = rot @ S @ S @ rot.T
        pv = R @ gset.positions[i] + t
        if pv[2] <= 0.5 * cam.near:
            continue
        J = np.array([
            [cam.fx / pv[2], 0, -cam.fx * pv[0] / pv[2] ** 2],
            [0, cam.fy / pv[2], -cam.fy * pv[1] / pv[2] ** 2],
        ])
        cov = J @ R @ sigma @ R.T @ J.T + cov_floor * np.eye(2)
        mean = np.array([cam.fx * pv[0] / pv[2] + cam.cx, cam.fy * pv[1] / pv[2] + cam.cy])
        op = 1.0 / (1.0 + math.exp(-gset.opacity_logits[i]))
        items.append((pv[2], i, mean, np.linalg.inv(cov), op, gset.colors[i]))
    items.sort(key=lambda it: (it[0], it[1]))
    for r in range(H):
        for c in range(W):
            T = 1.0
            for z, _, mean, conic, op, col in items:
                d = np.array([c, r]) - mean
                a = min(alpha_clamp, op * math.exp(-0.5 * d @ conic @ d))
                if T * (1 - a) < t_min:
                    break
                img[r, c] += T * a * col
                draw[r, c] += T * a * z
                acc[r, c] += T * a
                T *= 1 - a
    return img, draw, acc


def _lum255(image):
    return 255.0 * (np.asarray(image) @ np.array(LUMA))


def _grads(a):
    H, W = a.shape
    gx = np.zeros_like(a)
    gy = np.zeros_like(a)
    for r in range(H):
        for c in range(W):
            gx[r, c] = (a[r, min(c + 1, W - 1)] - a[r, max(c - 1, 0)]) / 2
            gy[r, c] = (a[min(r + 1, H - 1), c] - a[max(r - 1, 0), c]) / 2
    return gx, gy


def _zssim(xw, yw, flat=1e-6):
    vx = xw.var()
    vy = yw.var()
    fx, fy = vx > flat, vy > flat
    rho = 0.0
    if fx and fy:
        rho = np.clip(((xw - xw.mean()) * (yw - yw.mean())).mean() / math.sqrt(vx * vy), -1, 1)
    return (2 * rho + C2) / (float(fx) + float(fy) + C2)


def loop_energy(labels, observed, image, p):
    """Direct double-loop evaluation of the refinement energy."""
    H, W = labels.shape
    step = 255.0 / (p.levels - 1)
    x = labels * step
    y = _lum255(image)
    col = 255.0 * np.asarray(image)
    ix, iy = _grads(y)
    dx, dy = _grads(x)
    ox, oy = _grads(observed * step)
    R = p.ssim_radius
    e = 0.0
    for r in range(H):
        for c in range(W):
            win = (slice(max(0, r - R), r + R + 1), slice(max(0, c - R), c + R + 1))
            s = _zssim(x[win].ravel(), y[win].ravel())
            if labels[r, c] == observed[r, c]:
                psi = -math.log(min(max(s, p.eps), 1.0))
            else:
                psi = -math.log(min(max((1 - s) / (p.levels - 1), p.eps), 1.0))
            r2 = (ix[r, c] - dx[r, c]) ** 2 + (iy[r, c] - dy[r, c]) ** 2
            r2_obs = (ix[r, c] - ox[r, c]) ** 2 + (iy[r, c] - oy[r, c]) ** 2
            e += p.w_u * psi * math.exp(-r2_obs / (2 * p.tau**2)) + p.w_h * r2 * p.hf_scale
    pix = [(r, c) for r in range(H) for c in range(W)]
    for a in range(len(pix)):
        for b in range(a + 1, len(pix)):
            (r1, c1), (r2_, c2) = pix[a], pix[b]
            d2 = (r1 - r2_) ** 2 + (c1 - c2) ** 2
            if d2 > p.neighborhood_radius**2:
                continue
            psi = 1 - math.exp(-((x[r1, c1] - x[r2_, c2]) ** 2) / (2 * p.theta_mu**2))
            k = math.exp(-d2 / (2 * p.theta_alpha**2) - np.sum((col[r1, c1] - col[r2_, c2]) ** 2) / (2 * p.theta_beta**2))
            g = math.exp(-((ix[r1, c1] - ix[r2_, c2]) ** 2 + (iy[r1, c1] - iy[r2_, c2]) ** 2) / (2 * p.gamma**2))
            e += p.w_p * psi * k * g
    return e


@njit(cache=True)
def _dfs(n, L, step, obs, ylum, gix, giy, gu, K, psi_tab, nbr, done_at, done_ptr, coef):
    w_u, w_h, hf, eps = coef[0], coef[1], coef[2], coef[3]
    change_lb = max(0.0, math.log((L - 1) / 2.0))
    sy = 0.0
    syy = 0.0
    for i in range(n):
        sy += ylum[i]
        syy += ylum[i] * ylum[i]
    lab = np.zeros(n, np.int64)
    cost = np.zeros(n + 1)
    sx = np.zeros(n + 1)
    sxx = np.zeros(n + 1)
    sxy = np.zeros(n + 1)
    gs = np.zeros(n + 1)
    gd = np.zeros(n + 1)
    best = np.inf
    best_lab = np.zeros(n, np.int64)
    d = 0
    lab[0] = -1
    while d >= 0:
        lab[d] += 1
        if lab[d] >= L:
            d -= 1
            continue
        v = lab[d] * step
        c = cost[d]
        for j in range(d):
            c += K[j, d] * psi_tab[L - 1 + lab[d] - lab[j]]
        g_s = gs[d]
        g_d = gd[d]
        if lab[d] == obs[d]:
            g_s += gu[d]
        else:
            g_d += gu[d]
        for m in range(done_ptr[d], done_ptr[d + 1]):
            i = done_at[m]
            gx = (lab[nbr[i, 0]] - lab[nbr[i, 1]]) * step / 2.0
            gy = (lab[nbr[i, 2]] - lab[nbr[i, 3]]) * step / 2.0
            r2 = (gix[i] - gx) ** 2 + (giy[i] - gy) ** 2
            c += w_h * r2 * hf
        if c + w_u * g_d * change_lb > best:
            continue
        sx_ = sx[d] + v
        sxx_ = sxx[d] + v * v
        sxy_ = sxy[d] + v * ylum[d]
        if d == n - 1:
            mx = sx_ / n
            my = sy / n
            vx = sxx_ / n - mx * mx
            vy = syy / n - my * my
            fx = vx > 1e-6
            fy = vy > 1e-6
            rho = 0.0
            if fx and fy:
                rho = min(max((sxy_ / n - mx * my) / math.sqrt(vx * vy), -1.0), 1.0)
            s = (2 * rho + C2) / ((1.0 if fx else 0.0) + (1.0 if fy else 0.0) + C2)
            keep = -math.log(min(max(s, eps), 1.0))
            chg = -math.log(min(max((1 - s) / (L - 1), eps), 1.0))
            e = c + w_u * (keep * g_s + chg * g_d)
            if e < best:
                best = e
                best_lab[:] = lab
            continue
        cost[d + 1] = c
        sx[d + 1] = sx_
        sxx[d + 1] = sxx_
        sxy[d + 1] = sxy_
        gs[d + 1] = g_s
        gd[d + 1] = g_d
        d += 1
        lab[d] = -1
    return best, best_lab


def exhaustive_minimum(observed, image, p):
    """Exact minimum energy over all labelings by depth-first enumeration with pruning.

    Only valid when every unary window covers the whole raster (both sides
    at most ssim_radius + 1), so the window SSIM is one global value.
    """
    H, W = observed.shape
    assert H <= p.ssim_radius + 1 and W <= p.ssim_radius + 1
    n = H * W
    L = p.levels
    step = 255.0 / (L - 1)
    y = _lum255(image)
    col = 255.0 * np.asarray(image)
    ix, iy = _grads(y)
    K = np.zeros((n, n))
    for a in range(n):
        for b in range(a + 1, n):
            r1, c1 = divmod(a, W)
            r2, c2 = divmod(b, W)
            d2 = (r1 - r2) ** 2 + (c1 - c2) ** 2
            if d2 > p.neighborhood_radius**2:
                continue
            k = math.exp(-d2 / (2 * p.theta_alpha**2) - np.sum((col[r1, c1] - col[r2, c2]) ** 2) / (2 * p.theta_beta**2))
            g = math.exp(-((ix[r1, c1] - ix[r2, c2]) ** 2 + (iy[r1, c1] - iy[r2, c2]) ** 2) / (2 * p.gamma**2))
            K[a, b] = p.w_p * k * g
    diffs = np.arange(-(L - 1), L) * step
    psi_tab = 1 - np.exp(-(diffs**2) / (2 * p.theta_mu**2))
    nbr = np.zeros((n, 4), np.int64)
    done = [[] for _ in range(n)]
    for i in range(n):
        r, c = divmod(i, W)
        nbr[i] = [r * W + min(c + 1, W - 1), r * W + max(c - 1, 0), min(r + 1, H - 1) * W + c, max(r - 1, 0) * W + c]
        done[max(i, *nbr[i])].append(i)
    done_at = np.array([i for lst in done for i in lst], np.int64)
    done_ptr = np.cumsum([0] + [len(lst) for lst in done]).astype(np.int64)
    ox, oy = _grads(observed * step)
    gu = np.exp(-((ix - ox) ** 2 + (iy - oy) ** 2) / (2 * p.tau**2))
    coef = np.array([p.w_u, p.w_h, p.hf_scale, p.eps])
    best, lab = _dfs(n, L, step, observed.ravel().astype(np.int64), y.ravel(), ix.ravel(), iy.ravel(), gu.ravel(),
                     K, psi_tab, nbr, done_at, done_ptr, coef)
    return best, lab.reshape(H, W)
