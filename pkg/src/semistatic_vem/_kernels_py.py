"""Vectorized numpy implementation of the factor kernels.

Every ``*_linearize`` function adds ``J^T W J`` into ``H`` and ``J^T W r`` into
``g`` (both indexed by the flat state vector) and returns the factor cost
``0.5 * r^T W r``.  Index arrays hold the offset of each variable in ``x``.
"""

from __future__ import annotations

import math

import numpy as np

_TWO_PI = 2.0 * math.pi


def _wrap(theta):
    out = np.remainder(theta + math.pi, _TWO_PI) - math.pi
    return np.where(out <= -math.pi, out + _TWO_PI, out)


def _take(x, idx, n):
    return x[idx[:, None] + np.arange(n)]


def _rot(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)


def _rs(R, v):
    """``R @ S @ v`` with ``S`` the 90 degree generator, batched."""
    sv = np.stack([-v[:, 1], v[:, 0]], -1)
    return np.einsum("kij,kj->ki", R, sv)


def _accumulate(H, g, J, cols, r):
    Hk = np.einsum("kri,krj->kij", J, J)
    gk = np.einsum("kri,kr->ki", J, r)
    np.add.at(H, (cols[:, :, None], cols[:, None, :]), Hk)
    np.add.at(g, cols, gk)


def _cols(*parts):
    return np.concatenate([i[:, None] + np.arange(n) for i, n in parts], axis=1)


# -- odometry ---------------------------------------------------------------

def _odometry(x, i_prev, i_curr, meas):
    p = _take(x, i_prev, 3)
    c = _take(x, i_curr, 3)
    u = c[:, :2] - p[:, :2]
    Ra = _rot(p[:, 2] - c[:, 2])
    Rm2 = _rot(-c[:, 2])
    m = meas[:, :2]
    rt = np.einsum("kij,kj->ki", Ra, m) - np.einsum("kij,kj->ki", Rm2, u)
    rth = _wrap(meas[:, 2] - c[:, 2] + p[:, 2])
    return p, c, u, Ra, Rm2, np.column_stack([rt, rth])


def odometry_cost(x, i_prev, i_curr, meas, isig):
    if len(i_prev) == 0:
        return 0.0
    r = _odometry(x, i_prev, i_curr, meas)[-1] * isig
    return 0.5 * float(np.sum(r * r))


def odometry_linearize(x, i_prev, i_curr, meas, isig, H, g):
    if len(i_prev) == 0:
        return 0.0
    _, _, u, Ra, Rm2, r = _odometry(x, i_prev, i_curr, meas)
    K = len(i_prev)
    ram = _rs(Ra, meas[:, :2])
    rmu = _rs(Rm2, u)
    J = np.zeros((K, 3, 6))
    J[:, :2, :2] = Rm2
    J[:, :2, 2] = ram
    J[:, 2, 2] = 1.0
    J[:, :2, 3:5] = -Rm2
    J[:, :2, 5] = -ram + rmu
    J[:, 2, 5] = -1.0
    J *= isig[:, :, None]
    r = r * isig
    _accumulate(H, g, J, _cols((i_prev, 3), (i_curr, 3)), r)
    return 0.5 * float(np.sum(r * r))


# -- pose prior -------------------------------------------------------------

def _pose_prior(x, i_pose, prior):
    p = _take(x, i_pose, 3)
    return np.column_stack([p[:, :2] - prior[:, :2], _wrap(p[:, 2] - prior[:, 2])])


def pose_prior_cost(x, i_pose, prior, isig):
    if len(i_pose) == 0:
        return 0.0
    r = _pose_prior(x, i_pose, prior) * isig
    return 0.5 * float(np.sum(r * r))


def pose_prior_linearize(x, i_pose, prior, isig, H, g):
    if len(i_pose) == 0:
        return 0.0
    r = _pose_prior(x, i_pose, prior) * isig
    J = np.zeros((len(i_pose), 3, 3))
    J[:, [0, 1, 2], [0, 1, 2]] = isig
    _accumulate(H, g, J, _cols((i_pose, 3)), r)
    return 0.5 * float(np.sum(r * r))


# -- rigidity ---------------------------------------------------------------

def _rigid(x, i_obj, i_lm, tmpl):
    q = _take(x, i_obj, 3)
    lw = _take(x, i_lm, 2)
    R = _rot(q[:, 2])
    e = np.einsum("kij,kj->ki", R, lw) + q[:, :2] - tmpl
    return R, lw, e


def rigid_cost(x, i_obj, i_lm, tmpl, isig):
    if len(i_obj) == 0:
        return 0.0
    r = _rigid(x, i_obj, i_lm, tmpl)[-1] * isig[:, None]
    return 0.5 * float(np.sum(r * r))


def rigid_linearize(x, i_obj, i_lm, tmpl, isig, H, g):
    if len(i_obj) == 0:
        return 0.0
    R, lw, e = _rigid(x, i_obj, i_lm, tmpl)
    J = np.zeros((len(i_obj), 2, 5))
    J[:, 0, 0] = 1.0
    J[:, 1, 1] = 1.0
    J[:, :, 2] = _rs(R, lw)
    J[:, :, 3:5] = R
    J *= isig[:, None, None]
    r = e * isig[:, None]
    _accumulate(H, g, J, _cols((i_obj, 3), (i_lm, 2)), r)
    return 0.5 * float(np.sum(r * r))


# -- landmark prior ---------------------------------------------------------

def landmark_prior_cost(x, i_lm, prev, isig):
    if len(i_lm) == 0:
        return 0.0
    r = (_take(x, i_lm, 2) - prev) * isig[:, None]
    return 0.5 * float(np.sum(r * r))


def landmark_prior_linearize(x, i_lm, prev, isig, H, g):
    if len(i_lm) == 0:
        return 0.0
    r = (_take(x, i_lm, 2) - prev) * isig[:, None]
    J = np.zeros((len(i_lm), 2, 2))
    J[:, 0, 0] = isig
    J[:, 1, 1] = isig
    _accumulate(H, g, J, _cols((i_lm, 2)), r)
    return 0.5 * float(np.sum(r * r))


# -- landmark measurement ---------------------------------------------------

def landmark_residuals(x, i_pose, i_lm, obs):
    """Unwhitened residuals ``apply(pose, obs) - landmark``, shape (K, 2)."""
    if len(i_pose) == 0:
        return np.zeros((0, 2))
    p = _take(x, i_pose, 3)
    R = _rot(p[:, 2])
    return np.einsum("kij,kj->ki", R, obs) + p[:, :2] - _take(x, i_lm, 2)


def landmark_linearize(x, i_pose, i_lm, obs, wscale, H, g):
    """Accumulate ``wscale * J^T J`` blocks; returns ``0.5 * sum(wscale * |e|^2)``."""
    if len(i_pose) == 0:
        return 0.0
    p = _take(x, i_pose, 3)
    R = _rot(p[:, 2])
    e = np.einsum("kij,kj->ki", R, obs) + p[:, :2] - _take(x, i_lm, 2)
    s = np.sqrt(wscale)
    J = np.zeros((len(i_pose), 2, 5))
    J[:, 0, 0] = 1.0
    J[:, 1, 1] = 1.0
    J[:, :, 2] = _rs(R, obs)
    J[:, 0, 3] = -1.0
    J[:, 1, 4] = -1.0
    J *= s[:, None, None]
    r = e * s[:, None]
    _accumulate(H, g, J, _cols((i_pose, 3), (i_lm, 2)), r)
    return 0.5 * float(np.sum(r * r))
