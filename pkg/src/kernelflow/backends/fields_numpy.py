"""Vectorized numpy implementation of the per-sample field recursions.

One chunk solves C Monte-Carlo samples of the single-site process

    h[k] = e^{-lam t_k} u[k] + sum_{j<k} Mh[k,j] (phi'(h[j]) * z[j])
    z[k] = e^{-lam t_k} r[k] + sum_{j<k} Mz[k,j] phi(h[j])

together with the forward sensitivity recursions obtained by
differentiating w.r.t. the source entries r[s, alpha] and u[s, alpha].
Internally everything is time-major; source columns are ordered
time-major as well so that strict causality makes the active column
range a contiguous prefix (sources with s < k for h-sensitivities,
s <= k for the direct-injection rows).

The coupling matrices Mh, Mz arrive flattened as (T, P, T*P) row blocks
``Mh[k, :, j*P:(j+1)*P]`` and already contain the gamma0*dt weight, the
weight-decay integrating factors, and (for Mh) the optional bias term.
"""

from __future__ import annotations

import numpy as np

NAME = "numpy"

_ACTS = {"linear": 0, "relu": 1, "tanh": 2}


def activation_values(kind: str, x: np.ndarray):
    """(phi(x), phi'(x), phi''(x)); relu uses phi'' = 0 everywhere."""
    if kind == "linear":
        return x, np.ones_like(x), np.zeros_like(x)
    if kind == "relu":
        pos = (x > 0.0).astype(np.float64)
        return x * pos, pos, np.zeros_like(x)
    if kind == "tanh":
        th = np.tanh(x)
        sech2 = 1.0 - th * th
        return th, sech2, -2.0 * th * sech2
    raise ValueError(f"unknown activation '{kind}'")


def field_chunk(
    u: np.ndarray,
    r: np.ndarray,
    mh: np.ndarray,
    mz: np.ndarray,
    act: str,
    decay_t: np.ndarray,
    want_a: bool,
    want_b: bool,
    want_jac: bool,
) -> dict:
    """Solve one chunk of samples; see module docstring for conventions.

    Returns time-major arrays: ``h``, ``z`` of shape (C, T, P); when
    requested, ``sa`` = sum_n dphi(h_n)/dr and ``sb`` = sum_n dg_n/du as
    (T*P, T*P) matrices over time-major (step, sample) pairs, and the raw
    per-sample sensitivities ``jh_r, jz_r, jh_u, jz_u`` as
    (C, T, P, T*P) arrays.
    """
    c, t, p = u.shape
    tp = t * p
    h = np.empty((c, t, p))
    z = np.empty((c, t, p))
    phi = np.empty((c, t, p))
    dphi = np.empty((c, t, p))
    g_stack = np.zeros((c, tp))
    phi_stack = np.zeros((c, tp))

    need_r_side = want_a or want_jac
    need_u_side = want_b or want_jac
    if need_r_side:
        sh_r = np.zeros((c, tp, tp))  # rows (j, nu): d g[j] / d r
        sg_r = np.zeros((c, tp, tp))  # rows (j, nu): d phi(h[j]) / d r
    if need_u_side:
        sh_u = np.zeros((c, tp, tp))  # d g[j] / d u
        sg_u = np.zeros((c, tp, tp))  # d phi(h[j]) / d u
    if want_jac:
        jh_r = np.zeros((c, t, p, tp))
        jz_r = np.zeros((c, t, p, tp))
        jh_u = np.zeros((c, t, p, tp))
        jz_u = np.zeros((c, t, p, tp))

    rows = np.arange(p)
    for k in range(t):
        kp = k * p
        hk = decay_t[k] * u[:, k, :]
        zk = decay_t[k] * r[:, k, :]
        if k > 0:
            hk = hk + g_stack[:, :kp] @ mh[k, :, :kp].T
            zk = zk + phi_stack[:, :kp] @ mz[k, :, :kp].T
        h[:, k, :] = hk
        z[:, k, :] = zk
        pk, dk, ddk = activation_values(act, hk)
        phi[:, k, :] = pk
        dphi[:, k, :] = dk
        g_stack[:, kp : kp + p] = dk * zk
        phi_stack[:, kp : kp + p] = pk

        if need_r_side:
            if k > 0:
                jh_r_k = np.matmul(mh[k, :, :kp], sh_r[:, :kp, :kp])
                jz_r_k = np.matmul(mz[k, :, :kp], sg_r[:, :kp, :kp])
            else:
                jh_r_k = np.zeros((c, p, 0))
                jz_r_k = np.zeros((c, p, 0))
            # d g[k] / d r, columns s < k plus the direct injection at s = k
            blk = sh_r[:, kp : kp + p, : kp + p]
            blk[:, :, :kp] = (ddk * zk)[:, :, None] * jh_r_k + dk[:, :, None] * jz_r_k
            blk[:, rows, kp + rows] += decay_t[k] * dk
            sg_r[:, kp : kp + p, :kp] = dk[:, :, None] * jh_r_k
            if want_jac:
                jh_r[:, k, :, :kp] = jh_r_k
                jz_r[:, k, :, :kp] = jz_r_k
                jz_r[:, k, rows, kp + rows] = decay_t[k]

        if need_u_side:
            if k > 0:
                jh_u_k = np.matmul(mh[k, :, :kp], sh_u[:, :kp, :kp])
                jz_u_k = np.matmul(mz[k, :, :kp], sg_u[:, :kp, :kp])
            else:
                jh_u_k = np.zeros((c, p, 0))
                jz_u_k = np.zeros((c, p, 0))
            blk = sh_u[:, kp : kp + p, : kp + p]
            blk[:, :, :kp] = (ddk * zk)[:, :, None] * jh_u_k + dk[:, :, None] * jz_u_k
            blk[:, rows, kp + rows] += decay_t[k] * ddk * zk
            blk2 = sg_u[:, kp : kp + p, : kp + p]
            blk2[:, :, :kp] = dk[:, :, None] * jh_u_k
            blk2[:, rows, kp + rows] += decay_t[k] * dk
            if want_jac:
                jh_u[:, k, :, :kp] = jh_u_k
                jh_u[:, k, rows, kp + rows] = decay_t[k]
                jz_u[:, k, :, :kp] = jz_u_k

    out = {"h": h, "z": z, "phi": phi, "g": dphi * z}
    if want_a:
        out["sa"] = sg_r.sum(axis=0)
    if want_b:
        out["sb"] = sh_u.sum(axis=0)
    if want_jac:
        out["jh_r"], out["jz_r"] = jh_r, jz_r
        out["jh_u"], out["jz_u"] = jh_u, jz_u
    return out
