"""Pure-numpy reference implementation of the penalty kernel.

Computes the three smooth constraint penalties (collision, road
departure, kinematic) for one waypoint trajectory, optionally with the
analytic jacobian d(term)/d(waypoint), shape (3, T, 2).  The compiled
extension mirrors this math exactly; tests hold the two within 1e-12.

Smoothing: every Euclidean norm is sqrt(x^2 + 1e-18) so gradients stay
finite at coincident points, and the curvature numerator uses
sqrt(cross^2 + 1e-18) - 1e-9 so it vanishes for collinear triples.
"""
from __future__ import annotations

import numpy as np
from scipy.special import expit

NORM_EPS2 = 1e-18
KAPPA_EPS = 1e-9
DENOM_EPS = 1e-12


def _softplus(z: np.ndarray, sharp: float):
    zs = sharp * z
    val = (np.maximum(zs, 0.0) + np.log1p(np.exp(-np.abs(zs)))) / sharp
    return val, expit(zs)


def penalty_eval(wp: np.ndarray, obs: np.ndarray, seg_a: np.ndarray,
                 seg_b: np.ndarray, seg_hw: np.ndarray, dt: float,
                 r_ego: float, v_max: float, kappa_max: float,
                 sharp: float, ksharp: float, want_grad: bool):
    """Return (terms (3,), grad (3, T, 2) or None).

    wp: (T, 2) waypoints at times (i+1)*dt from an ego pinned at the
    origin.  obs: (n, 5) rows [px, py, vx, vy, radius] at t=0.  Segments
    carry their lane's half-width so the road margin is a single min.
    """
    T = wp.shape[0]
    terms = np.zeros(3)
    grad = np.zeros((3, T, 2)) if want_grad else None

    # collision: obstacles advance along straight lines
    if obs.shape[0]:
        times = (np.arange(T) + 1.0) * dt
        centers = obs[:, None, 0:2] + obs[:, None, 2:4] * times[None, :, None]
        diff = wp[None, :, :] - centers
        dist = np.sqrt((diff * diff).sum(-1) + NORM_EPS2)
        z = (obs[:, 4][:, None] + r_ego) - dist
        val, sig = _softplus(z, sharp)
        terms[0] = val.sum()
        if want_grad:
            grad[0] = -((sig / dist)[:, :, None] * diff).sum(axis=0)

    # road departure: signed margin beyond the closest lane corridor
    if seg_a.shape[0]:
        ab = seg_b - seg_a
        ab2 = np.maximum((ab * ab).sum(1), 1e-300)
        ap = wp[:, None, :] - seg_a[None, :, :]
        tproj = np.clip((ap * ab[None]).sum(-1) / ab2[None], 0.0, 1.0)
        closest = seg_a[None] + tproj[:, :, None] * ab[None]
        dvec = wp[:, None, :] - closest
        dist = np.sqrt((dvec * dvec).sum(-1) + NORM_EPS2)
        margin = dist - seg_hw[None, :]
        j = margin.argmin(axis=1)
        rows = np.arange(T)
        m = margin[rows, j]
        val, sig = _softplus(m, sharp)
        terms[1] = val.sum()
        if want_grad:
            grad[1] = (sig / dist[rows, j])[:, None] * dvec[rows, j]

    # kinematic: per-step speed and discrete curvature, origin prepended
    q = np.vstack([np.zeros((1, 2)), wp])
    e = q[1:] - q[:-1]
    seglen = np.sqrt((e * e).sum(1) + NORM_EPS2)
    zs = seglen / dt - v_max
    sval, ssig = _softplus(zs, sharp)
    kin = sval.sum()
    gq = np.zeros((T + 1, 2))
    if want_grad:
        contrib = (ssig / (dt * seglen))[:, None] * e
        gq[1:] += contrib
        gq[:-1] -= contrib

    for i in range(T - 1):
        a, b, c = q[i], q[i + 1], q[i + 2]
        d1 = b - a
        d2 = c - b
        d3 = c - a
        cross = d1[0] * d2[1] - d1[1] * d2[0]
        croot = np.sqrt(cross * cross + KAPPA_EPS * KAPPA_EPS)
        cnum = croot - KAPPA_EPS
        l1 = np.sqrt(d1 @ d1 + NORM_EPS2)
        l2 = np.sqrt(d2 @ d2 + NORM_EPS2)
        l3 = np.sqrt(d3 @ d3 + NORM_EPS2)
        denom = l1 * l2 * l3 + DENOM_EPS
        kappa = 2.0 * cnum / denom
        kval, ksig = _softplus(np.array([kappa - kappa_max]), ksharp)
        kin += kval[0]
        if want_grad:
            s = ksig[0]
            dk_dc = 2.0 / denom * (cross / croot)
            dk_dden = -2.0 * cnum / (denom * denom)
            gcross_a = np.array([-d2[1], d2[0]])
            gcross_b = np.array([d2[1] + d1[1], -(d2[0] + d1[0])])
            gcross_c = np.array([-d1[1], d1[0]])
            gden_a = dk_dden * (l2 * l3 * (-d1 / l1) + l1 * l2 * (-d3 / l3))
            gden_b = dk_dden * (l2 * l3 * (d1 / l1) + l1 * l3 * (-d2 / l2))
            gden_c = dk_dden * (l1 * l3 * (d2 / l2) + l1 * l2 * (d3 / l3))
            gq[i] += s * (dk_dc * gcross_a + gden_a)
            gq[i + 1] += s * (dk_dc * gcross_b + gden_b)
            gq[i + 2] += s * (dk_dc * gcross_c + gden_c)

    terms[2] = kin
    if want_grad:
        grad[2] = gq[1:]
    return terms, grad
