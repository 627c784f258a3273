"""Single-site stochastic fields and their forward sensitivities.

Given Gaussian sources u, r and the previous iterate's kernels, the
preactivation/pre-gradient pair (h, z) follows a strictly causal
left-endpoint recursion in which all time integrals run over steps
j < k.  Sensitivities of (h, z) w.r.t. the source entries propagate
through the same recursion and feed the response-kernel estimators.

The hot loops live in :mod:`kernelflow.backends`; this module builds the
coupling matrices, runs sample chunks (optionally across threads with a
fixed deterministic reduction order), and offers the single-sample API
used by the tests.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import backends
from .errors import NonFiniteValue, ShapeMismatch
from .grids import TimeGrid
from .kernels import Kernel

__all__ = ["FieldEnsemble", "Couplings", "build_couplings", "solve_fields", "propagate_jacobians"]

DEFAULT_CHUNK = 64


def _kernel_values(k, pt: int) -> np.ndarray | None:
    if k is None:
        return None
    v = k.values if isinstance(k, Kernel) else np.asarray(k, dtype=np.float64)
    if v.shape != (pt, pt):
        raise ShapeMismatch(f"kernel shape {v.shape}, expected ({pt}, {pt})")
    return v


def _to_time_blocks(values: np.ndarray, p: int, t: int) -> np.ndarray:
    """Sample-major (P*T, P*T) matrix -> (T, P, T, P) time-major blocks."""
    return np.ascontiguousarray(values.reshape(p, t, p, t).transpose(1, 0, 3, 2))


@dataclass
class Couplings:
    """Per-layer coupling matrices consumed by the field backends."""

    mh: np.ndarray  # (T, P, T*P): gamma0*dt weighted (A + Delta*Phi) rows
    mz: np.ndarray  # (T, P, T*P): gamma0*dt weighted (B + Delta*G) rows
    decay_t: np.ndarray  # (T,): exp(-lambda t_k) source damping
    act: str
    grid: TimeGrid
    n_samples: int


def build_couplings(
    phi_prev,
    g_next,
    a_prev,
    b_this,
    delta: np.ndarray,
    grid: TimeGrid,
    act: str,
    gamma0: float,
    lambda_wd: float = 0.0,
    use_bias: bool = False,
) -> Couplings:
    """Assemble the causal coupling matrices of one layer.

    ``delta`` is (P, T) over the same samples as the kernels (zero rows
    for test samples).  The error-weighted kernel terms carry the
    quadrature weight gamma0*dt.  The response kernels are discrete
    responses (sensitivities to individual source entries) and already
    carry one quadrature weight internally, so they enter the recursion
    as plain gamma0-weighted sums; giving them a second dt factor
    systematically underestimates the feedforward/feedback coupling and
    breaks the agreement with finite-width networks.  Weight decay
    enters through integrating factors exp(-lambda (t_k - t_j)) on the
    memory terms and exp(-lambda t_k) on the sources, so lambda = 0
    reduces exactly to the undamped recursion.
    """
    delta = np.asarray(delta, dtype=np.float64)
    p, t = delta.shape
    if t != grid.n_steps:
        raise ShapeMismatch(f"delta has {t} steps, grid has {grid.n_steps}")
    pt = p * t
    dt = grid.dt

    steps = np.arange(t)
    lower = steps[:, None] > steps[None, :]  # strict causality j < k
    wd = np.where(lower, np.exp(-lambda_wd * dt * (steps[:, None] - steps[None, :])), 0.0)

    phi_b = _to_time_blocks(_kernel_values(phi_prev, pt), p, t)
    g_b = _to_time_blocks(_kernel_values(g_next, pt), p, t)
    a_v = _kernel_values(a_prev, pt)
    b_v = _kernel_values(b_this, pt)

    dcols = delta.T[None, None, :, :]  # Delta_nu[j] broadcast over (k, mu, j, nu)
    mh = dt * (phi_b * dcols)
    if use_bias:
        mh = mh + dt * dcols
    if a_v is not None:
        mh = mh + _to_time_blocks(a_v, p, t)
    mz = dt * (g_b * dcols)
    if b_v is not None:
        mz = mz + _to_time_blocks(b_v, p, t)

    scale = gamma0 * wd[:, None, :, None]
    mh = np.ascontiguousarray((scale * mh).reshape(t, p, pt))
    mz = np.ascontiguousarray((scale * mz).reshape(t, p, pt))
    decay_t = np.exp(-lambda_wd * dt * steps)
    return Couplings(mh, mz, decay_t, act, grid, p)


def run_chunks(
    u: np.ndarray,
    r: np.ndarray,
    couplings: Couplings,
    want_a: bool,
    want_b: bool,
    want_fields: bool = False,
    chunk_size: int = DEFAULT_CHUNK,
    threads: int = 1,
    backend=None,
) -> dict:
    """Accumulate ensemble moments over Monte-Carlo chunks.

    ``u``, ``r`` have shape (S, P, T) (sample-major trajectories).
    Returns sample-major second-moment sums ``phi_outer``, ``g_outer``
    ((P*T, P*T), summed over samples, not yet divided by S) plus the
    sensitivity sums ``sa``/``sb`` when requested.  Partial sums are
    reduced in fixed chunk order, so results do not depend on the number
    of worker threads.
    """
    be = backend if backend is not None else backends
    s, p, t = u.shape
    pt = p * t
    u_tm = np.ascontiguousarray(u.transpose(0, 2, 1))
    r_tm = np.ascontiguousarray(r.transpose(0, 2, 1))
    bounds = [(i, min(i + chunk_size, s)) for i in range(0, s, chunk_size)]

    def one(bound):
        lo, hi = bound
        res = be.field_chunk(
            u_tm[lo:hi],
            r_tm[lo:hi],
            couplings.mh,
            couplings.mz,
            couplings.act,
            couplings.decay_t,
            want_a,
            want_b,
            False,
        )
        phi_flat = np.ascontiguousarray(res["phi"].transpose(0, 2, 1)).reshape(hi - lo, pt)
        g_flat = np.ascontiguousarray(res["g"].transpose(0, 2, 1)).reshape(hi - lo, pt)
        part = {
            "phi_outer": phi_flat.T @ phi_flat,
            "g_outer": g_flat.T @ g_flat,
        }
        if want_a:
            part["sa"] = res["sa"]
        if want_b:
            part["sb"] = res["sb"]
        if want_fields:
            part["h"] = res["h"].transpose(0, 2, 1)
            part["z"] = res["z"].transpose(0, 2, 1)
        return part

    if threads > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(one, bounds))
    else:
        parts = [one(b) for b in bounds]

    out = {"phi_outer": np.zeros((pt, pt)), "g_outer": np.zeros((pt, pt))}
    if want_a:
        out["sa"] = np.zeros((pt, pt))
    if want_b:
        out["sb"] = np.zeros((pt, pt))
    for part in parts:  # fixed-order tree of additions
        out["phi_outer"] += part["phi_outer"]
        out["g_outer"] += part["g_outer"]
        if want_a:
            out["sa"] += part["sa"]
        if want_b:
            out["sb"] += part["sb"]
    if want_fields:
        out["h"] = np.concatenate([p_["h"] for p_ in parts], axis=0)
        out["z"] = np.concatenate([p_["z"] for p_ in parts], axis=0)
    for key in ("phi_outer", "g_outer"):
        if not np.all(np.isfinite(out[key])):
            raise NonFiniteValue("field moments diverged; reduce dt or gamma0")
    return out


def _time_major_jac_to_public(j: np.ndarray, p: int, t: int) -> np.ndarray:
    """(T, P, T*P) time-major -> (P, T, P, T) indexed (mu, k, alpha, s)."""
    return j.reshape(t, p, t, p).transpose(1, 0, 3, 2)


@dataclass
class FieldEnsemble:
    """Fields (and optional sensitivities) of one Monte-Carlo sample.

    Arrays are (P, T); sensitivities are (P, T, P, T) with the row pair
    (mu, k) differentiated against the source entry (alpha, s).
    """

    h: np.ndarray
    z: np.ndarray
    g: np.ndarray
    jh_r: np.ndarray | None = None
    jz_r: np.ndarray | None = None
    jh_u: np.ndarray | None = None
    jz_u: np.ndarray | None = None


def _single(u, r, couplings: Couplings, want_jac: bool, backend=None) -> FieldEnsemble:
    be = backend if backend is not None else backends
    u = np.asarray(u, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    if u.shape != r.shape or u.ndim != 2:
        raise ShapeMismatch(f"u {u.shape} and r {r.shape} must be equal (P, T) arrays")
    p, t = u.shape
    res = be.field_chunk(
        np.ascontiguousarray(u.T)[None],
        np.ascontiguousarray(r.T)[None],
        couplings.mh,
        couplings.mz,
        couplings.act,
        couplings.decay_t,
        want_jac,
        want_jac,
        want_jac,
    )
    if not (np.all(np.isfinite(res["h"])) and np.all(np.isfinite(res["z"]))):
        raise NonFiniteValue("field recursion diverged; reduce dt or gamma0")
    ens = FieldEnsemble(
        h=res["h"][0].T.copy(),
        z=res["z"][0].T.copy(),
        g=res["g"][0].T.copy(),
    )
    if want_jac:
        ens.jh_r = _time_major_jac_to_public(res["jh_r"][0], p, t)
        ens.jz_r = _time_major_jac_to_public(res["jz_r"][0], p, t)
        ens.jh_u = _time_major_jac_to_public(res["jh_u"][0], p, t)
        ens.jz_u = _time_major_jac_to_public(res["jz_u"][0], p, t)
    return ens


def solve_fields(u, r, phi_prev, g_next, a_prev, b_this, delta, cfg, grid: TimeGrid) -> FieldEnsemble:
    """Solve the causal field recursion for one sample's sources.

    ``cfg`` supplies gamma0, activation, lambda_wd and use_bias (any
    object with those attributes, normally a DmftConfig).
    """
    delta = np.asarray(delta, dtype=np.float64)
    coup = build_couplings(
        phi_prev,
        g_next,
        a_prev,
        b_this,
        delta,
        grid,
        cfg.activation,
        cfg.gamma0,
        cfg.lambda_wd,
        cfg.use_bias,
    )
    return _single(u, r, coup, want_jac=False)


def propagate_jacobians(u, r, phi_prev, g_next, a_prev, b_this, delta, cfg, grid: TimeGrid) -> FieldEnsemble:
    """Fields plus forward sensitivities w.r.t. every source entry.

    The sensitivity recursions are interleaved with the field recursion
    step by step (sensitivities at step k consume fields at steps < k),
    so this recomputes the fields alongside.
    """
    delta = np.asarray(delta, dtype=np.float64)
    coup = build_couplings(
        phi_prev,
        g_next,
        a_prev,
        b_this,
        delta,
        grid,
        cfg.activation,
        cfg.gamma0,
        cfg.lambda_wd,
        cfg.use_bias,
    )
    return _single(u, r, coup, want_jac=True)
