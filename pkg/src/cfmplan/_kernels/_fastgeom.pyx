# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled penalty kernel; mirrors _ref.py term for term."""
from libc.math cimport exp, fabs, log1p, sqrt

import numpy as np

DEF NORM_EPS2 = 1e-18
DEF KAPPA_EPS = 1e-9
DEF DENOM_EPS = 1e-12


cdef inline double _sp(double z, double sharp) nogil:
    cdef double zs = sharp * z
    if zs > 0.0:
        return (zs + log1p(exp(-zs))) / sharp
    return log1p(exp(zs)) / sharp


cdef inline double _sig(double z, double sharp) nogil:
    cdef double zs = sharp * z
    if zs >= 0.0:
        return 1.0 / (1.0 + exp(-zs))
    cdef double e = exp(zs)
    return e / (1.0 + e)


def penalty_eval(double[:, ::1] wp, double[:, ::1] obs,
                 double[:, ::1] seg_a, double[:, ::1] seg_b,
                 double[::1] seg_hw, double dt, double r_ego,
                 double v_max, double kappa_max, double sharp,
                 double ksharp, bint want_grad):
    cdef Py_ssize_t T = wp.shape[0]
    cdef Py_ssize_t n_obs = obs.shape[0]
    cdef Py_ssize_t n_seg = seg_a.shape[0]
    terms_arr = np.zeros(3)
    cdef double[::1] terms = terms_arr
    grad_arr = np.zeros((3, T, 2)) if want_grad else None
    cdef double[:, :, ::1] grad
    if want_grad:
        grad = grad_arr

    cdef Py_ssize_t i, o, s
    cdef double t, cx, cy, dx, dy, dist, z, sg
    cdef double abx, aby, ab2, tp, px, py, best, bdx, bdy, bdist, m

    # collision
    for o in range(n_obs):
        for i in range(T):
            t = (i + 1.0) * dt
            cx = obs[o, 0] + obs[o, 2] * t
            cy = obs[o, 1] + obs[o, 3] * t
            dx = wp[i, 0] - cx
            dy = wp[i, 1] - cy
            dist = sqrt(dx * dx + dy * dy + NORM_EPS2)
            z = obs[o, 4] + r_ego - dist
            terms[0] += _sp(z, sharp)
            if want_grad:
                sg = _sig(z, sharp)
                grad[0, i, 0] -= sg * dx / dist
                grad[0, i, 1] -= sg * dy / dist

    # road departure
    if n_seg > 0:
        for i in range(T):
            best = 1e300
            bdx = 0.0
            bdy = 0.0
            bdist = 1.0
            for s in range(n_seg):
                abx = seg_b[s, 0] - seg_a[s, 0]
                aby = seg_b[s, 1] - seg_a[s, 1]
                ab2 = abx * abx + aby * aby
                if ab2 < 1e-300:
                    ab2 = 1e-300
                tp = ((wp[i, 0] - seg_a[s, 0]) * abx
                      + (wp[i, 1] - seg_a[s, 1]) * aby) / ab2
                if tp < 0.0:
                    tp = 0.0
                elif tp > 1.0:
                    tp = 1.0
                px = seg_a[s, 0] + tp * abx
                py = seg_a[s, 1] + tp * aby
                dx = wp[i, 0] - px
                dy = wp[i, 1] - py
                dist = sqrt(dx * dx + dy * dy + NORM_EPS2)
                m = dist - seg_hw[s]
                if m < best:
                    best = m
                    bdx = dx
                    bdy = dy
                    bdist = dist
            terms[1] += _sp(best, sharp)
            if want_grad:
                sg = _sig(best, sharp)
                grad[1, i, 0] += sg * bdx / bdist
                grad[1, i, 1] += sg * bdy / bdist

    # kinematic
    cdef double qx0, qy0, qx1, qy1, qx2, qy2
    cdef double e0x, e0y, seglen, contrib_x, contrib_y
    cdef double d1x, d1y, d2x, d2y, d3x, d3y
    cdef double cross, croot, cnum, l1, l2, l3, denom, kappa
    cdef double dk_dc, dk_dden, kin = 0.0

    for i in range(T):
        if i == 0:
            qx0 = 0.0
            qy0 = 0.0
        else:
            qx0 = wp[i - 1, 0]
            qy0 = wp[i - 1, 1]
        e0x = wp[i, 0] - qx0
        e0y = wp[i, 1] - qy0
        seglen = sqrt(e0x * e0x + e0y * e0y + NORM_EPS2)
        z = seglen / dt - v_max
        kin += _sp(z, sharp)
        if want_grad:
            sg = _sig(z, sharp)
            contrib_x = sg * e0x / (dt * seglen)
            contrib_y = sg * e0y / (dt * seglen)
            grad[2, i, 0] += contrib_x
            grad[2, i, 1] += contrib_y
            if i > 0:
                grad[2, i - 1, 0] -= contrib_x
                grad[2, i - 1, 1] -= contrib_y

    for i in range(T - 1):
        if i == 0:
            qx0 = 0.0
            qy0 = 0.0
        else:
            qx0 = wp[i - 1, 0]
            qy0 = wp[i - 1, 1]
        qx1 = wp[i, 0]
        qy1 = wp[i, 1]
        qx2 = wp[i + 1, 0]
        qy2 = wp[i + 1, 1]
        d1x = qx1 - qx0
        d1y = qy1 - qy0
        d2x = qx2 - qx1
        d2y = qy2 - qy1
        d3x = qx2 - qx0
        d3y = qy2 - qy0
        cross = d1x * d2y - d1y * d2x
        croot = sqrt(cross * cross + KAPPA_EPS * KAPPA_EPS)
        cnum = croot - KAPPA_EPS
        l1 = sqrt(d1x * d1x + d1y * d1y + NORM_EPS2)
        l2 = sqrt(d2x * d2x + d2y * d2y + NORM_EPS2)
        l3 = sqrt(d3x * d3x + d3y * d3y + NORM_EPS2)
        denom = l1 * l2 * l3 + DENOM_EPS
        kappa = 2.0 * cnum / denom
        kin += _sp(kappa - kappa_max, ksharp)
        if want_grad:
            sg = _sig(kappa - kappa_max, ksharp)
            dk_dc = 2.0 / denom * (cross / croot)
            dk_dden = -2.0 * cnum / (denom * denom)
            # q[i-1] slot (skipped when it is the fixed origin)
            if i > 0:
                grad[2, i - 1, 0] += sg * (dk_dc * (-d2y)
                    + dk_dden * (l2 * l3 * (-d1x / l1) + l1 * l2 * (-d3x / l3)))
                grad[2, i - 1, 1] += sg * (dk_dc * (d2x)
                    + dk_dden * (l2 * l3 * (-d1y / l1) + l1 * l2 * (-d3y / l3)))
            grad[2, i, 0] += sg * (dk_dc * (d2y + d1y)
                + dk_dden * (l2 * l3 * (d1x / l1) + l1 * l3 * (-d2x / l2)))
            grad[2, i, 1] += sg * (dk_dc * (-(d2x + d1x))
                + dk_dden * (l2 * l3 * (d1y / l1) + l1 * l3 * (-d2y / l2)))
            grad[2, i + 1, 0] += sg * (dk_dc * (-d1y)
                + dk_dden * (l1 * l3 * (d2x / l2) + l1 * l2 * (d3x / l3)))
            grad[2, i + 1, 1] += sg * (dk_dc * (d1x)
                + dk_dden * (l1 * l3 * (d2y / l2) + l1 * l2 * (d3y / l3)))

    terms[2] = kin
    return terms_arr, grad_arr
