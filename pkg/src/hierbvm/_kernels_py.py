"""Pure-numpy versions of the compiled kernels in ``_kernels.pyx``.

Signatures and arithmetic order mirror the Cython code line for line;
``advance_square`` is bit-identical across backends, ``mixture_scores``
agrees to rounding (summation order differs).
"""

import numpy as np

_CHUNK_ELEMS = 4_000_000


def _bilinear(fields, owner, x, y):
    m = fields.shape[1]
    g = float(m - 1)
    u = x * g
    v = y * g
    i = np.minimum(u.astype(np.intp), m - 2)
    j = np.minimum(v.astype(np.intp), m - 2)
    tx = u - i
    ty = v - j
    return ((1.0 - tx) * (1.0 - ty) * fields[owner, i, j]
            + tx * (1.0 - ty) * fields[owner, i + 1, j]
            + (1.0 - tx) * ty * fields[owner, i, j + 1]
            + tx * ty * fields[owner, i + 1, j + 1])


def _crossing(a, b):
    with np.errstate(divide="ignore", invalid="ignore"):
        lo = (0.0 - a) / (b - a)
        hi = (1.0 - a) / (b - a)
    return np.where(b <= 0.0, lo, np.where(b >= 1.0, hi, 1.0))


def advance_square(pos, integral, state, exit_pos, steps, owner, fields,
                   normals, sqrt_dt, dt, kill_level):
    act = np.flatnonzero(state == 0)
    for k in range(normals.shape[1]):
        if act.size == 0:
            break
        x = pos[act, 0]
        y = pos[act, 1]
        integral[act] = integral[act] + _bilinear(fields, owner[act], x, y) * dt
        steps[act] += 1
        nx = x + sqrt_dt * normals[act, k, 0]
        ny = y + sqrt_dt * normals[act, k, 1]
        out = (nx <= 0.0) | (nx >= 1.0) | (ny <= 0.0) | (ny >= 1.0)
        if out.any():
            xo, yo = x[out], y[out]
            nxo, nyo = nx[out], ny[out]
            a = np.minimum(_crossing(xo, nxo), _crossing(yo, nyo))
            nxo = xo + a * (nxo - xo)
            nyo = yo + a * (nyo - yo)
            nx[out] = nxo
            ny[out] = nyo
            gone = act[out]
            exit_pos[gone, 0] = np.minimum(np.maximum(nxo, 0.0), 1.0)
            exit_pos[gone, 1] = np.minimum(np.maximum(nyo, 0.0), 1.0)
            state[gone] = 1
        pos[act, 0] = nx
        pos[act, 1] = ny
        killed = ~out & (integral[act] > kill_level)
        state[act[killed]] = 2
        act = act[~(out | killed)]
    return int(np.count_nonzero(state == 0))


def mixture_scores(x, eta, deta, prec, score, log_mean):
    n_in, p = eta.shape
    chunk = max(1, _CHUNK_ELEMS // max(1, n_in * p))
    for start in range(0, x.shape[0], chunk):
        xs = x[start:start + chunk]
        r = xs[:, None, :] - eta[None, :, :]
        pr = r @ prec.T
        q = -0.5 * np.einsum("oia,oia->oi", r, pr)
        qmax = q.max(axis=1, keepdims=True)
        w = np.exp(q - qmax)
        wsum = w.sum(axis=1)
        g = np.einsum("oia,ial->oil", pr, deta)
        score[start:start + chunk] = np.einsum("oi,oil->ol", w, g) / wsum[:, None]
        log_mean[start:start + chunk] = qmax[:, 0] + np.log(wsum) - np.log(n_in)
