"""Pure-NumPy fallback for the compiled kernels.

Matches `rfield._kernels` operation for operation; used when the extension is
unavailable or when RFIELD_KERNELS=py forces it. Scatter accumulation uses
np.bincount per channel, which sums in index order and is deterministic.
"""

import numpy as np

_CORNERS = [(dx, dy, dz) for dx in (0, 1) for dy in (0, 1) for dz in (0, 1)]


def _corner_setup(shape, pts):
    X, Y, Z = shape[0], shape[1], shape[2]
    i0 = np.floor(pts).astype(np.int64)
    i0[:, 0] = np.clip(i0[:, 0], 0, X - 2)
    i0[:, 1] = np.clip(i0[:, 1], 0, Y - 2)
    i0[:, 2] = np.clip(i0[:, 2], 0, Z - 2)
    f = pts - i0
    return i0, f


def _corner_weight(f, corner):
    w = np.ones(f.shape[0], dtype=np.float64)
    for axis, bit in enumerate(corner):
        w = w * (f[:, axis] if bit else 1.0 - f[:, axis])
    return w


def trilerp_forward(values, pts):
    i0, f = _corner_setup(values.shape, pts)
    out = np.zeros((pts.shape[0], values.shape[3]), dtype=np.float64)
    for corner in _CORNERS:
        w = _corner_weight(f, corner)
        ix, iy, iz = (i0[:, a] + corner[a] for a in range(3))
        out += w[:, None] * values[ix, iy, iz]
    return out


def trilerp_backward(grad, pts, upstream):
    X, Y, Z, C = grad.shape
    i0, f = _corner_setup(grad.shape, pts)
    flat = grad.reshape(-1, C)
    for corner in _CORNERS:
        w = _corner_weight(f, corner)
        idx = ((i0[:, 0] + corner[0]) * Y + (i0[:, 1] + corner[1])) * Z + (i0[:, 2] + corner[2])
        for c in range(C):
            flat[:, c] += np.bincount(idx, weights=w * upstream[:, c], minlength=X * Y * Z)
    return None


def adam_step(params, grads, m, v, t, lr, beta1, beta2, eps):
    m *= beta1
    m += (1.0 - beta1) * grads
    v *= beta2
    v += (1.0 - beta2) * grads * grads
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    params -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return None


def composite_forward(sigma, delta):
    s = sigma * delta
    cum = np.cumsum(s, axis=1)
    # T_k = exp(-sum_{j<k} s_j); column 0 is T_1 = 1
    T = np.exp(-np.concatenate([np.zeros((s.shape[0], 1)), cum[:, :-1]], axis=1))
    weights = T * (-np.expm1(-s))
    t_res = np.exp(-cum[:, -1]) if s.shape[1] else np.ones(s.shape[0])
    return weights, t_res


def composite_backward(weights, t_res, delta, g_weights, g_tres):
    # T_{k+1} = T_k - w_k, reconstructed back to front from t_res
    gw_w = g_weights * weights
    suffix = np.cumsum(gw_w[:, ::-1], axis=1)[:, ::-1] - gw_w
    T_next = t_res[:, None] + (np.cumsum(weights[:, ::-1], axis=1)[:, ::-1] - weights)
    g_s = g_weights * T_next - suffix - (g_tres * t_res)[:, None]
    return g_s * delta
