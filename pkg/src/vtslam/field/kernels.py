"""Compiled inner loops for the hash-grid encoding and the Adam update."""
import numpy as np
from numba import njit

P1 = np.uint64(2654435761)
P2 = np.uint64(805459861)


@njit(cache=True)
def encode(u, theta, offsets, sizes, res, dense, n_feat):
    """Trilinear hash-grid features.

    Returns features (N, L*F), flat parameter indices of the 8 corners per level
    (N, L, 8) and the per-level fractional cell coordinates (N, L, 3).
    """
    n = u.shape[0]
    L = offsets.shape[0]
    feats = np.zeros((n, L * n_feat))
    idx = np.empty((n, L, 8), dtype=np.int64)
    frac = np.empty((n, L, 3))
    for i in range(n):
        for l in range(L):
            r = res[l]
            s = u[i, 0] * r
            ix = min(max(np.int64(np.floor(s)), 0), r - 1)
            fx = s - ix
            s = u[i, 1] * r
            iy = min(max(np.int64(np.floor(s)), 0), r - 1)
            fy = s - iy
            s = u[i, 2] * r
            iz = min(max(np.int64(np.floor(s)), 0), r - 1)
            fz = s - iz
            frac[i, l, 0] = fx
            frac[i, l, 1] = fy
            frac[i, l, 2] = fz
            is_dense = dense[l]
            mask = np.uint64(sizes[l] - 1)
            off = offsets[l]
            for c in range(8):
                cx = ix + (c & 1)
                cy = iy + ((c >> 1) & 1)
                cz = iz + ((c >> 2) & 1)
                if is_dense:
                    h = cx + (r + 1) * (cy + (r + 1) * cz)
                else:
                    hu = np.uint64(cx) ^ (np.uint64(cy) * P1) ^ (np.uint64(cz) * P2)
                    h = np.int64(hu & mask)
                j = off + h * n_feat
                idx[i, l, c] = j
                wx = fx if (c & 1) else 1.0 - fx
                wy = fy if ((c >> 1) & 1) else 1.0 - fy
                wz = fz if ((c >> 2) & 1) else 1.0 - fz
                w = wx * wy * wz
                for f in range(n_feat):
                    feats[i, l * n_feat + f] += w * theta[j + f]
    return feats, idx, frac


@njit(cache=True)
def scatter_grad(grad, idx, frac, dfeat, n_feat):
    n, L, _ = idx.shape
    for i in range(n):
        for l in range(L):
            fx, fy, fz = frac[i, l, 0], frac[i, l, 1], frac[i, l, 2]
            for c in range(8):
                wx = fx if (c & 1) else 1.0 - fx
                wy = fy if ((c >> 1) & 1) else 1.0 - fy
                wz = fz if ((c >> 2) & 1) else 1.0 - fz
                w = wx * wy * wz
                j = idx[i, l, c]
                for f in range(n_feat):
                    grad[j + f] += w * dfeat[i, l * n_feat + f]


@njit(cache=True)
def encode_input_grad(theta, idx, frac, res, dfeat, n_feat):
    """d(loss)/du given d(loss)/d(features), through the trilinear weights."""
    n, L, _ = idx.shape
    du = np.zeros((n, 3))
    for i in range(n):
        for l in range(L):
            fx, fy, fz = frac[i, l, 0], frac[i, l, 1], frac[i, l, 2]
            gx = 0.0
            gy = 0.0
            gz = 0.0
            for c in range(8):
                bx = c & 1
                by = (c >> 1) & 1
                bz = (c >> 2) & 1
                wx = fx if bx else 1.0 - fx
                wy = fy if by else 1.0 - fy
                wz = fz if bz else 1.0 - fz
                sx = 1.0 if bx else -1.0
                sy = 1.0 if by else -1.0
                sz = 1.0 if bz else -1.0
                j = idx[i, l, c]
                s = 0.0
                for f in range(n_feat):
                    s += theta[j + f] * dfeat[i, l * n_feat + f]
                gx += s * sx * wy * wz
                gy += s * wx * sy * wz
                gz += s * wx * wy * sz
            du[i, 0] += res[l] * gx
            du[i, 1] += res[l] * gy
            du[i, 2] += res[l] * gz
    return du


@njit(cache=True, fastmath=True)
def adam_update(theta, grad, m, v, lr, beta1, beta2, eps, weight_decay, step):
    bc1 = 1.0 - beta1**step
    bc2 = 1.0 - beta2**step
    for i in range(theta.shape[0]):
        g = grad[i]
        m[i] = beta1 * m[i] + (1.0 - beta1) * g
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g
        theta[i] -= lr * ((m[i] / bc1) / (np.sqrt(v[i] / bc2) + eps) + weight_decay * theta[i])


@njit(cache=True, fastmath=True)
def softplus(z, beta):
    """softplus_beta(z) alone, for forward passes that keep no cache."""
    sp = np.empty_like(z)
    zf = z.ravel()
    spf = sp.ravel()
    for i in range(zf.shape[0]):
        x = beta * zf[i]
        if x > 40.0:
            spf[i] = zf[i]
        elif x < -40.0:
            spf[i] = 0.0
        elif x > 0:
            spf[i] = (x + np.log1p(np.exp(-x))) / beta
        else:
            spf[i] = np.log1p(np.exp(x)) / beta
    return sp


@njit(cache=True, fastmath=True)
def softplus_sigmoid(z, beta):
    """softplus_beta(z) and its derivative sigmoid(beta z), elementwise."""
    sp = np.empty_like(z)
    sg = np.empty_like(z)
    zf = z.ravel()
    spf = sp.ravel()
    sgf = sg.ravel()
    for i in range(zf.shape[0]):
        x = beta * zf[i]
        if x > 40.0:
            spf[i] = zf[i]
            sgf[i] = 1.0
        elif x < -40.0:
            spf[i] = 0.0
            sgf[i] = 0.0
        elif x > 0:
            e = np.exp(-x)
            spf[i] = (x + np.log1p(e)) / beta
            sgf[i] = 1.0 / (1.0 + e)
        else:
            e = np.exp(x)
            spf[i] = np.log1p(e) / beta
            sgf[i] = e / (1.0 + e)
    return sp, sg
