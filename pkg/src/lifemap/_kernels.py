"""Numba kernels for the voxel feature field.

Parameters of all levels live in one flat array.  Level ``l`` is a
``res[l]**3`` vertex grid with ``C = 1 + 2*d`` channels per vertex laid out
as [raw density, fine feature (d), coarse feature (d)], starting at
``offs[l]``.  Density is ``softplus(sum over levels of raw)``; features are
sums over levels.  Every grid read is trilinear.
"""

import math

import numpy as np
from numba import njit

NORM_EPS = 1e-6


@njit(cache=True, inline="always")
def _softplus(x):
    if x > 0:
        return x + math.log1p(math.exp(-x))
    return math.log1p(math.exp(x))


@njit(cache=True, inline="always")
def _sigmoid(x):
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@njit(cache=True)
def _corners(x, y, z, res, offs, C, bmin, bsize, idx, wts):
    """Fill idx/wts (length 8*L) with parameter base offsets and trilinear weights."""
    k = 0
    for lvl in range(res.shape[0]):
        R = res[lvl]
        u0 = (x - bmin[0]) / bsize[0] * (R - 1)
        u1 = (y - bmin[1]) / bsize[1] * (R - 1)
        u2 = (z - bmin[2]) / bsize[2] * (R - 1)
        u0 = min(max(u0, 0.0), R - 1.0)
        u1 = min(max(u1, 0.0), R - 1.0)
        u2 = min(max(u2, 0.0), R - 1.0)
        i0 = min(int(u0), R - 2)
        i1 = min(int(u1), R - 2)
        i2 = min(int(u2), R - 2)
        f0 = u0 - i0
        f1 = u1 - i1
        f2 = u2 - i2
        for a in range(2):
            wa = f0 if a else 1.0 - f0
            for b in range(2):
                wb = f1 if b else 1.0 - f1
                for c in range(2):
                    wc = f2 if c else 1.0 - f2
                    v = ((i0 + a) * R + (i1 + b)) * R + (i2 + c)
                    idx[k] = offs[lvl] + v * C
                    wts[k] = wa * wb * wc
                    k += 1


@njit(cache=True)
def density_weights(params, res, offs, C, bmin, bsize, origins, dirs, t, delta, t_min=0.0):
    """Compositing weights from density alone; shape (B, N).

    Compositing stops once transmittance falls below ``t_min``.
    """
    B, N = t.shape
    K = 8 * res.shape[0]
    idx = np.empty(K, np.int64)
    wts = np.empty(K, np.float64)
    out = np.zeros((B, N))
    for r in range(B):
        trans = 1.0
        for s in range(N):
            if delta[r, s] <= 0.0:
                continue
            ts = t[r, s]
            _corners(origins[r, 0] + ts * dirs[r, 0], origins[r, 1] + ts * dirs[r, 1],
                     origins[r, 2] + ts * dirs[r, 2], res, offs, C, bmin, bsize, idx, wts)
            raw = 0.0
            for k in range(K):
                raw += wts[k] * params[idx[k]]
            alpha = 1.0 - math.exp(-_softplus(raw) * delta[r, s])
            out[r, s] = trans * alpha
            trans *= 1.0 - alpha
            if trans < t_min:
                break
    return out


@njit(cache=True)
def render_forward(params, res, offs, C, d, bmin, bsize, origins, dirs, t, delta, t_min=0.0):
    """Composite depth (ray distance), fine and coarse features; unnormalized."""
    B, N = t.shape
    K = 8 * res.shape[0]
    idx = np.empty(K, np.int64)
    wts = np.empty(K, np.float64)
    depth = np.zeros(B)
    fine = np.zeros((B, d))
    coarse = np.zeros((B, d))
    weights = np.zeros((B, N))
    for r in range(B):
        trans = 1.0
        for s in range(N):
            if delta[r, s] <= 0.0:
                continue
            ts = t[r, s]
            _corners(origins[r, 0] + ts * dirs[r, 0], origins[r, 1] + ts * dirs[r, 1],
                     origins[r, 2] + ts * dirs[r, 2], res, offs, C, bmin, bsize, idx, wts)
            raw = 0.0
            for k in range(K):
                raw += wts[k] * params[idx[k]]
            alpha = 1.0 - math.exp(-_softplus(raw) * delta[r, s])
            w = trans * alpha
            trans *= 1.0 - alpha
            weights[r, s] = w
            if w == 0.0:
                continue
            depth[r] += w * ts
            for k in range(K):
                base = idx[k]
                ww = w * wts[k]
                for c in range(d):
                    fine[r, c] += ww * params[base + 1 + c]
                    coarse[r, c] += ww * params[base + 1 + d + c]
            if trans < t_min:
                break
    return depth, fine, coarse, weights


@njit(cache=True)
def _cos_grad(v, target, weight, out):
    """Write d/dv of weight*(1 - cos(v, target)) into out; return the loss term."""
    n = 0.0
    for c in range(v.shape[0]):
        n += v[c] * v[c]
    n = math.sqrt(n)
    if weight == 0.0:
        for c in range(v.shape[0]):
            out[c] = 0.0
        return 0.0
    if n <= NORM_EPS:
        for c in range(v.shape[0]):
            out[c] = 0.0
        return weight
    dot = 0.0
    for c in range(v.shape[0]):
        dot += v[c] * target[c]
    cos = dot / n
    for c in range(v.shape[0]):
        out[c] = -weight * (target[c] - cos * v[c] / n) / n
    return weight * (1.0 - cos)


@njit(cache=True)
def loss_and_grad(params, res, offs, C, d, bmin, bsize, origins, dirs, t, delta,
                  tgt_depth, tgt_fine, tgt_coarse, w_depth, w_fine, w_coarse,
                  grad, touched, touched_list, n_touched, t_min=0.0):
    """Loss over a ray batch; accumulates dL/dparams into ``grad``.

    Per-ray weights already include the batch normalization.  Vertices that
    receive gradient are recorded once in ``touched_list``.  With ``t_min`` > 0
    samples behind the point where transmittance drops below it are dropped
    from both passes (exact gradients need ``t_min`` = 0).
    """
    B, N = t.shape
    K = 8 * res.shape[0]
    idx = np.empty((N, K), np.int64)
    wts = np.empty((N, K), np.float64)
    rawsum = np.zeros(N)
    alpha = np.zeros(N)
    w = np.zeros(N)
    trans_after = np.zeros(N)
    fs = np.zeros((N, d))
    gs = np.zeros((N, d))
    F = np.zeros(d)
    G = np.zeros(d)
    dF = np.zeros(d)
    dG = np.zeros(d)
    total = 0.0
    for r in range(B):
        trans = 1.0
        D = 0.0
        F[:] = 0.0
        G[:] = 0.0
        last = N
        for s in range(N):
            w[s] = 0.0
            alpha[s] = 0.0
            trans_after[s] = trans
            if delta[r, s] <= 0.0:
                continue
            ts = t[r, s]
            _corners(origins[r, 0] + ts * dirs[r, 0], origins[r, 1] + ts * dirs[r, 1],
                     origins[r, 2] + ts * dirs[r, 2], res, offs, C, bmin, bsize, idx[s], wts[s])
            raw = 0.0
            for c in range(d):
                fs[s, c] = 0.0
                gs[s, c] = 0.0
            for k in range(K):
                base = idx[s, k]
                wk = wts[s, k]
                raw += wk * params[base]
                for c in range(d):
                    fs[s, c] += wk * params[base + 1 + c]
                    gs[s, c] += wk * params[base + 1 + d + c]
            rawsum[s] = raw
            a = 1.0 - math.exp(-_softplus(raw) * delta[r, s])
            alpha[s] = a
            w[s] = trans * a
            trans *= 1.0 - a
            trans_after[s] = trans
            D += w[s] * ts
            for c in range(d):
                F[c] += w[s] * fs[s, c]
                G[c] += w[s] * gs[s, c]
            if trans < t_min:
                last = s + 1
                break

        dD = 0.0
        if w_depth[r] != 0.0 and tgt_depth[r] > 0.0:
            res_d = D - tgt_depth[r]
            total += w_depth[r] * abs(res_d)
            dD = w_depth[r] if res_d > 0 else (-w_depth[r] if res_d < 0 else 0.0)
        total += _cos_grad(F, tgt_fine[r], w_fine[r], dF)
        total += _cos_grad(G, tgt_coarse[r], w_coarse[r], dG)

        suffix = 0.0
        for s in range(last - 1, -1, -1):
            if delta[r, s] <= 0.0:
                continue
            cs = dD * t[r, s]
            for c in range(d):
                cs += dF[c] * fs[s, c] + dG[c] * gs[s, c]
            dsigma = delta[r, s] * (cs * trans_after[s] - suffix)
            suffix += cs * w[s]
            draw = dsigma * _sigmoid(rawsum[s])
            ws = w[s]
            for k in range(K):
                base = idx[s, k]
                wk = wts[s, k]
                grad[base] += wk * draw
                if ws != 0.0:
                    for c in range(d):
                        grad[base + 1 + c] += wk * ws * dF[c]
                        grad[base + 1 + d + c] += wk * ws * dG[c]
                vid = base // C
                if touched[vid] == 0:
                    touched[vid] = 1
                    touched_list[n_touched[0]] = vid
                    n_touched[0] += 1
    return total


@njit(cache=True)
def adam_update(params, grad, m, v, touched, touched_list, n_touched, C, d, lr_density, lr_feature,
                beta1, beta2, eps, step):
    """Lazy Adam over touched vertices; clears their gradient and flags.

    The second moment is shared per vertex within each channel group
    (density, fine, coarse): ``v`` holds 3 entries per vertex.
    """
    bc1 = 1.0 - beta1 ** step
    bc2 = 1.0 - beta2 ** step
    for i in range(n_touched[0]):
        vid = touched_list[i]
        base = vid * C
        for grp in range(3):
            c0 = 0 if grp == 0 else (1 if grp == 1 else 1 + d)
            c1 = 1 if grp == 0 else (1 + d if grp == 1 else C)
            g2 = 0.0
            for j in range(base + c0, base + c1):
                g2 += grad[j] * grad[j]
            g2 /= c1 - c0
            k = vid * 3 + grp
            v[k] = beta2 * v[k] + (1.0 - beta2) * g2
            lr = lr_density if grp == 0 else lr_feature
            scale = lr / bc1 / (math.sqrt(v[k] / bc2) + eps)
            for j in range(base + c0, base + c1):
                m[j] = beta1 * m[j] + (1.0 - beta1) * grad[j]
                params[j] -= scale * m[j]
                grad[j] = 0.0
        touched[vid] = 0
    n_touched[0] = 0


@njit(cache=True)
def sgd_update(params, grad, touched, touched_list, n_touched, C, lr_density, lr_feature):
    for i in range(n_touched[0]):
        vid = touched_list[i]
        for c in range(C):
            j = vid * C + c
            lr = lr_density if c == 0 else lr_feature
            params[j] -= lr * grad[j]
            grad[j] = 0.0
        touched[vid] = 0
    n_touched[0] = 0


@njit(cache=True)
def resample(edges, probs, u, near, far):
    """Inverse-CDF sampling from piecewise-constant bin probabilities.

    edges: (B, Np+1); probs: (B, Np) summing to one per ray; u: (B, Nf)
    sorted in [0, 1).  Returns sorted sample positions and midpoint-rule
    segment lengths.
    """
    B, Nf = u.shape
    Np = probs.shape[1]
    t = np.zeros((B, Nf))
    delta = np.zeros((B, Nf))
    for r in range(B):
        if far[r] <= near[r]:
            continue
        k = 0
        cdf = 0.0
        for j in range(Nf):
            while k < Np - 1 and cdf + probs[r, k] <= u[r, j]:
                cdf += probs[r, k]
                k += 1
            p = probs[r, k]
            frac = (u[r, j] - cdf) / p if p > 0 else 0.5
            frac = min(max(frac, 0.0), 1.0)
            t[r, j] = edges[r, k] + frac * (edges[r, k + 1] - edges[r, k])
        for j in range(Nf):
            lo = near[r] if j == 0 else 0.5 * (t[r, j - 1] + t[r, j])
            hi = far[r] if j == Nf - 1 else 0.5 * (t[r, j] + t[r, j + 1])
            delta[r, j] = max(hi - lo, 0.0)
    return t, delta


@njit(cache=True)
def sample_points(params, res, offs, C, d, bmin, bsize, points):
    """Density and coarse feature at world points (no compositing)."""
    n = points.shape[0]
    K = 8 * res.shape[0]
    idx = np.empty(K, np.int64)
    wts = np.empty(K, np.float64)
    sigma = np.zeros(n)
    coarse = np.zeros((n, d))
    for i in range(n):
        _corners(points[i, 0], points[i, 1], points[i, 2], res, offs, C, bmin, bsize, idx, wts)
        raw = 0.0
        for k in range(K):
            raw += wts[k] * params[idx[k]]
            for c in range(d):
                coarse[i, c] += wts[k] * params[idx[k] + 1 + d + c]
        sigma[i] = _softplus(raw)
    return sigma, coarse
