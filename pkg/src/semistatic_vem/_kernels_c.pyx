# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled factor kernels.  Same contract as ``_kernels_py``."""

from libc.math cimport cos, sin, sqrt, fmod, M_PI

ctypedef long long idx_t

cdef double TWO_PI = 2.0 * M_PI


cdef inline double _wrap(double t) noexcept nogil:
    cdef double w = fmod(t + M_PI, TWO_PI)
    if w < 0.0:
        w += TWO_PI
    w -= M_PI
    if w <= -M_PI:
        w += TWO_PI
    return w


cdef inline void _accumulate(double[:, ::1] H, double[::1] g, double* J, idx_t* cols,
                             double* r, int nr, int nc) noexcept nogil:
    # J is row-major nr x nc.
    cdef int a, b, k
    cdef double acc
    for a in range(nc):
        acc = 0.0
        for k in range(nr):
            acc += J[k * nc + a] * r[k]
        g[cols[a]] += acc
        for b in range(nc):
            acc = 0.0
            for k in range(nr):
                acc += J[k * nc + a] * J[k * nc + b]
            H[cols[a], cols[b]] += acc


# -- odometry ---------------------------------------------------------------

cdef inline void _odometry_eval(const double[::1] x, idx_t ip, idx_t ic, const double[:, ::1] meas,
                                Py_ssize_t k, double* r, double* J) noexcept nogil:
    cdef double x1 = x[ip], y1 = x[ip + 1], t1 = x[ip + 2]
    cdef double x2 = x[ic], y2 = x[ic + 1], t2 = x[ic + 2]
    cdef double mx = meas[k, 0], my = meas[k, 1], mt = meas[k, 2]
    cdef double ux = x2 - x1, uy = y2 - y1
    cdef double ca = cos(t1 - t2), sa = sin(t1 - t2)
    cdef double c2 = cos(-t2), s2 = sin(-t2)
    cdef int i
    r[0] = ca * mx - sa * my - (c2 * ux - s2 * uy)
    r[1] = sa * mx + ca * my - (s2 * ux + c2 * uy)
    r[2] = _wrap(mt - t2 + t1)
    if J == NULL:
        return
    for i in range(18):
        J[i] = 0.0
    # d/d prev
    J[0] = c2;  J[1] = -s2
    J[6] = s2;  J[7] = c2
    # Ra S m = Ra (-my, mx)
    J[2] = ca * (-my) - sa * mx
    J[8] = sa * (-my) + ca * mx
    J[14] = 1.0
    # d/d curr
    J[3] = -c2; J[4] = s2
    J[9] = -s2; J[10] = -c2
    # -Ra S m + Rm2 S u
    J[5] = -J[2] + (c2 * (-uy) - s2 * ux)
    J[11] = -J[8] + (s2 * (-uy) + c2 * ux)
    J[17] = -1.0


def odometry_cost(const double[::1] x, const idx_t[::1] i_prev, const idx_t[::1] i_curr,
                  const double[:, ::1] meas, const double[:, ::1] isig):
    cdef Py_ssize_t k
    cdef double r[3]
    cdef double acc = 0.0, v
    cdef int i
    with nogil:
        for k in range(i_prev.shape[0]):
            _odometry_eval(x, i_prev[k], i_curr[k], meas, k, r, NULL)
            for i in range(3):
                v = r[i] * isig[k, i]
                acc += v * v
    return 0.5 * acc


def odometry_linearize(const double[::1] x, const idx_t[::1] i_prev, const idx_t[::1] i_curr,
                       const double[:, ::1] meas, const double[:, ::1] isig,
                       double[:, ::1] H, double[::1] g):
    cdef Py_ssize_t k
    cdef double r[3]
    cdef double J[18]
    cdef idx_t cols[6]
    cdef double acc = 0.0
    cdef int i, j
    with nogil:
        for k in range(i_prev.shape[0]):
            _odometry_eval(x, i_prev[k], i_curr[k], meas, k, r, J)
            for i in range(3):
                r[i] *= isig[k, i]
                for j in range(6):
                    J[i * 6 + j] *= isig[k, i]
                acc += r[i] * r[i]
                cols[i] = i_prev[k] + i
                cols[3 + i] = i_curr[k] + i
            _accumulate(H, g, J, cols, r, 3, 6)
    return 0.5 * acc


# -- pose prior -------------------------------------------------------------

def pose_prior_cost(const double[::1] x, const idx_t[::1] i_pose, const double[:, ::1] prior,
                    const double[:, ::1] isig):
    cdef Py_ssize_t k
    cdef double acc = 0.0, v
    cdef idx_t p
    with nogil:
        for k in range(i_pose.shape[0]):
            p = i_pose[k]
            v = (x[p] - prior[k, 0]) * isig[k, 0]
            acc += v * v
            v = (x[p + 1] - prior[k, 1]) * isig[k, 1]
            acc += v * v
            v = _wrap(x[p + 2] - prior[k, 2]) * isig[k, 2]
            acc += v * v
    return 0.5 * acc


def pose_prior_linearize(const double[::1] x, const idx_t[::1] i_pose, const double[:, ::1] prior,
                         const double[:, ::1] isig, double[:, ::1] H, double[::1] g):
    cdef Py_ssize_t k
    cdef double acc = 0.0, v, s
    cdef idx_t p
    cdef int i
    with nogil:
        for k in range(i_pose.shape[0]):
            p = i_pose[k]
            for i in range(3):
                if i < 2:
                    v = x[p + i] - prior[k, i]
                else:
                    v = _wrap(x[p + 2] - prior[k, 2])
                s = isig[k, i]
                acc += v * v * s * s
                H[p + i, p + i] += s * s
                g[p + i] += s * s * v
    return 0.5 * acc


# -- rigidity ---------------------------------------------------------------

def rigid_cost(const double[::1] x, const idx_t[::1] i_obj, const idx_t[::1] i_lm,
               const double[:, ::1] tmpl, const double[::1] isig):
    cdef Py_ssize_t k
    cdef double acc = 0.0, c, s, ex, ey, lx, ly
    cdef idx_t q, l
    with nogil:
        for k in range(i_obj.shape[0]):
            q = i_obj[k]
            l = i_lm[k]
            c = cos(x[q + 2])
            s = sin(x[q + 2])
            lx = x[l]
            ly = x[l + 1]
            ex = (c * lx - s * ly + x[q] - tmpl[k, 0]) * isig[k]
            ey = (s * lx + c * ly + x[q + 1] - tmpl[k, 1]) * isig[k]
            acc += ex * ex + ey * ey
    return 0.5 * acc


def rigid_linearize(const double[::1] x, const idx_t[::1] i_obj, const idx_t[::1] i_lm,
                    const double[:, ::1] tmpl, const double[::1] isig,
                    double[:, ::1] H, double[::1] g):
    cdef Py_ssize_t k
    cdef double acc = 0.0, c, s, lx, ly, w
    cdef double r[2]
    cdef double J[10]
    cdef idx_t cols[5]
    cdef idx_t q, l
    cdef int i
    with nogil:
        for k in range(i_obj.shape[0]):
            q = i_obj[k]
            l = i_lm[k]
            w = isig[k]
            c = cos(x[q + 2])
            s = sin(x[q + 2])
            lx = x[l]
            ly = x[l + 1]
            r[0] = (c * lx - s * ly + x[q] - tmpl[k, 0]) * w
            r[1] = (s * lx + c * ly + x[q + 1] - tmpl[k, 1]) * w
            acc += r[0] * r[0] + r[1] * r[1]
            J[0] = w;  J[1] = 0.0; J[2] = (c * (-ly) - s * lx) * w; J[3] = c * w;  J[4] = -s * w
            J[5] = 0.0; J[6] = w;  J[7] = (s * (-ly) + c * lx) * w; J[8] = s * w;  J[9] = c * w
            for i in range(3):
                cols[i] = q + i
            cols[3] = l
            cols[4] = l + 1
            _accumulate(H, g, J, cols, r, 2, 5)
    return 0.5 * acc


# -- landmark prior ---------------------------------------------------------

def landmark_prior_cost(const double[::1] x, const idx_t[::1] i_lm, const double[:, ::1] prev,
                        const double[::1] isig):
    cdef Py_ssize_t k
    cdef double acc = 0.0, ex, ey
    cdef idx_t l
    with nogil:
        for k in range(i_lm.shape[0]):
            l = i_lm[k]
            ex = (x[l] - prev[k, 0]) * isig[k]
            ey = (x[l + 1] - prev[k, 1]) * isig[k]
            acc += ex * ex + ey * ey
    return 0.5 * acc


def landmark_prior_linearize(const double[::1] x, const idx_t[::1] i_lm, const double[:, ::1] prev,
                             const double[::1] isig, double[:, ::1] H, double[::1] g):
    cdef Py_ssize_t k
    cdef double acc = 0.0, ex, ey, s2
    cdef idx_t l
    with nogil:
        for k in range(i_lm.shape[0]):
            l = i_lm[k]
            s2 = isig[k] * isig[k]
            ex = x[l] - prev[k, 0]
            ey = x[l + 1] - prev[k, 1]
            acc += (ex * ex + ey * ey) * s2
            H[l, l] += s2
            H[l + 1, l + 1] += s2
            g[l] += s2 * ex
            g[l + 1] += s2 * ey
    return 0.5 * acc


# -- landmark measurement ---------------------------------------------------

def landmark_residuals(const double[::1] x, const idx_t[::1] i_pose, const idx_t[::1] i_lm,
                       const double[:, ::1] obs):
    import numpy as np
    cdef Py_ssize_t K = i_pose.shape[0], k
    out = np.empty((K, 2))
    cdef double[:, ::1] o = out
    cdef double c, s, dx, dy
    cdef idx_t p, l
    with nogil:
        for k in range(K):
            p = i_pose[k]
            l = i_lm[k]
            c = cos(x[p + 2])
            s = sin(x[p + 2])
            dx = obs[k, 0]
            dy = obs[k, 1]
            o[k, 0] = c * dx - s * dy + x[p] - x[l]
            o[k, 1] = s * dx + c * dy + x[p + 1] - x[l + 1]
    return out


def landmark_linearize(const double[::1] x, const idx_t[::1] i_pose, const idx_t[::1] i_lm,
                       const double[:, ::1] obs, const double[::1] wscale,
                       double[:, ::1] H, double[::1] g):
    cdef Py_ssize_t k
    cdef double acc = 0.0, c, s, dx, dy, w
    cdef double r[2]
    cdef double J[10]
    cdef idx_t cols[5]
    cdef idx_t p, l
    cdef int i
    with nogil:
        for k in range(i_pose.shape[0]):
            w = wscale[k]
            if w == 0.0:
                continue
            w = sqrt(w)
            p = i_pose[k]
            l = i_lm[k]
            c = cos(x[p + 2])
            s = sin(x[p + 2])
            dx = obs[k, 0]
            dy = obs[k, 1]
            r[0] = (c * dx - s * dy + x[p] - x[l]) * w
            r[1] = (s * dx + c * dy + x[p + 1] - x[l + 1]) * w
            acc += r[0] * r[0] + r[1] * r[1]
            J[0] = w;   J[1] = 0.0; J[2] = (c * (-dy) - s * dx) * w; J[3] = -w;  J[4] = 0.0
            J[5] = 0.0; J[6] = w;   J[7] = (s * (-dy) + c * dx) * w; J[8] = 0.0; J[9] = -w
            for i in range(3):
                cols[i] = p + i
            cols[3] = l
            cols[4] = l + 1
            _accumulate(H, g, J, cols, r, 2, 5)
    return 0.5 * acc
