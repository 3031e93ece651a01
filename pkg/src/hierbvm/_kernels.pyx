# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops.

Every routine here has a numpy twin in ``_kernels_py`` with the same
signature and the same floating-point operation order, so both backends
return identical numbers for identical inputs.
"""

from libc.math cimport exp, log


cdef inline double _bilinear(const double[:, :, ::1] fields, Py_ssize_t k,
                             double x, double y) noexcept nogil:
    cdef Py_ssize_t m = fields.shape[1]
    cdef double g = <double>(m - 1)
    cdef double u = x * g
    cdef double v = y * g
    cdef Py_ssize_t i = <Py_ssize_t>u
    cdef Py_ssize_t j = <Py_ssize_t>v
    if i > m - 2:
        i = m - 2
    if j > m - 2:
        j = m - 2
    cdef double tx = u - i
    cdef double ty = v - j
    return ((1.0 - tx) * (1.0 - ty) * fields[k, i, j]
            + tx * (1.0 - ty) * fields[k, i + 1, j]
            + (1.0 - tx) * ty * fields[k, i, j + 1]
            + tx * ty * fields[k, i + 1, j + 1])


cdef inline double _crossing(double a, double b) noexcept nogil:
    # fraction of the segment a -> b spent inside [0, 1]
    if b <= 0.0:
        return (0.0 - a) / (b - a)
    if b >= 1.0:
        return (1.0 - a) / (b - a)
    return 1.0


def advance_square(double[:, ::1] pos, double[::1] integral,
                   signed char[::1] state, double[:, ::1] exit_pos,
                   long long[::1] steps, const long long[::1] owner,
                   const double[:, :, ::1] fields,
                   const double[:, :, ::1] normals,
                   double sqrt_dt, double dt, double kill_level):
    """Advance unit-square Brownian walkers through one block of steps.

    state: 0 alive, 1 exited through the boundary, 2 discount underflowed.
    """
    cdef Py_ssize_t n = pos.shape[0]
    cdef Py_ssize_t n_block = normals.shape[1]
    cdef Py_ssize_t w, k
    cdef double x, y, nx, ny, ax, ay, a
    cdef Py_ssize_t alive = 0
    with nogil:
        for w in range(n):
            if state[w] != 0:
                continue
            x = pos[w, 0]
            y = pos[w, 1]
            for k in range(n_block):
                integral[w] = integral[w] + _bilinear(fields, owner[w], x, y) * dt
                steps[w] += 1
                nx = x + sqrt_dt * normals[w, k, 0]
                ny = y + sqrt_dt * normals[w, k, 1]
                if nx <= 0.0 or nx >= 1.0 or ny <= 0.0 or ny >= 1.0:
                    ax = _crossing(x, nx)
                    ay = _crossing(y, ny)
                    a = ax if ax < ay else ay
                    nx = x + a * (nx - x)
                    ny = y + a * (ny - y)
                    exit_pos[w, 0] = min(max(nx, 0.0), 1.0)
                    exit_pos[w, 1] = min(max(ny, 0.0), 1.0)
                    state[w] = 1
                    x = nx
                    y = ny
                    break
                x = nx
                y = ny
                if integral[w] > kill_level:
                    state[w] = 2
                    break
            pos[w, 0] = x
            pos[w, 1] = y
            if state[w] == 0:
                alive += 1
    return alive


def mixture_scores(const double[:, ::1] x, const double[:, ::1] eta,
                   const double[:, :, ::1] deta, const double[:, ::1] prec,
                   double[:, ::1] score, double[::1] log_mean):
    """Self-normalized Gaussian-kernel score averages, in log domain.

    For each row x_o: weights w_i = exp(-r_i' P r_i / 2) with r_i = x_o - eta_i,
    score_o = sum_i w_i deta_i' P r_i / sum_i w_i and
    log_mean_o = log(mean_i w_i).
    """
    cdef Py_ssize_t n_out = x.shape[0]
    cdef Py_ssize_t n_in = eta.shape[0]
    cdef Py_ssize_t p = eta.shape[1]
    cdef Py_ssize_t d = deta.shape[2]
    cdef Py_ssize_t o, i, a, b, l
    cdef double q, qmax, wsum, wi, acc
    import numpy as np
    qarr = np.empty(n_in, dtype=np.float64)
    r_arr = np.empty(p, dtype=np.float64)
    pr_arr = np.empty(p, dtype=np.float64)
    num_arr = np.empty(d, dtype=np.float64)
    cdef double[::1] qv = qarr
    cdef double[::1] r = r_arr
    cdef double[::1] pr = pr_arr
    cdef double[::1] num = num_arr
    with nogil:
        for o in range(n_out):
            qmax = -1e308
            for i in range(n_in):
                q = 0.0
                for a in range(p):
                    r[a] = x[o, a] - eta[i, a]
                for a in range(p):
                    acc = 0.0
                    for b in range(p):
                        acc = acc + prec[a, b] * r[b]
                    q = q + r[a] * acc
                q = -0.5 * q
                qv[i] = q
                if q > qmax:
                    qmax = q
            wsum = 0.0
            for l in range(d):
                num[l] = 0.0
            for i in range(n_in):
                wi = exp(qv[i] - qmax)
                wsum = wsum + wi
                for a in range(p):
                    r[a] = x[o, a] - eta[i, a]
                for a in range(p):
                    acc = 0.0
                    for b in range(p):
                        acc = acc + prec[a, b] * r[b]
                    pr[a] = acc
                for l in range(d):
                    acc = 0.0
                    for a in range(p):
                        acc = acc + deta[i, a, l] * pr[a]
                    num[l] = num[l] + wi * acc
            for l in range(d):
                score[o, l] = num[l] / wsum
            log_mean[o] = qmax + log(wsum) - log(<double>n_in)
