"""Baselines the full solver is compared against.

* static (lazy-limit) feature/gradient kernels via the layerwise Gaussian
  moment recursion, which also seed the fixed-point loop;
* the gradient-independence scheme (response kernels pinned to zero);
* leading-order small-gamma0 perturbation theory for deep linear
  networks, where all temporal dependence collapses onto P(P+1)
  cumulative integrals of the lazy error dynamics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import cumulative_trapezoid

from .errors import QuadratureUnderflow
from .grids import SampleSet, TimeGrid
from .kernels import Kernel
from .ntk import ntk_assemble

__all__ = [
    "StaticKernels",
    "static_kernels",
    "gradient_independence_solve",
    "PerturbationFunctions",
    "perturbative_linear_ntk",
]

#: variances at or below this are treated as deterministic zeros in the
#: Gaussian moment recursions
DEGENERATE_VARIANCE = 1e-14

#: Gauss-Hermite nodes per dimension for tanh moments; tanh's complex
#: poles slow the convergence, so hitting 1e-10 diagonal accuracy for
#: variances up to ~3 takes a few hundred nodes (still milliseconds)
_GH_DEFAULT = 240


@dataclass(frozen=True)
class StaticKernels:
    """Time-constant lazy kernels: phi[l], phi_dot[l], g[l] for l=1..L."""

    phi: dict
    phi_dot: dict
    g: dict
    ntk0: np.ndarray
    depth: int


def _gh_nodes(n: int):
    x, w = np.polynomial.hermite_e.hermegauss(n)  # weight e^{-x^2/2}
    return x, w / np.sqrt(2.0 * np.pi)


def _gaussian_moments_quadrature(cov: np.ndarray, fn, n_quad: int) -> np.ndarray:
    """E[fn(a) fn(b)] for (a, b) ~ N(0, [[k11,k12],[k12,k22]]), entrywise.

    2-D Gauss-Hermite on the whitened representation a = s1 x,
    b = rho s2 x + sqrt(1-rho^2) s2 y.  Entries with degenerate variance
    contribute fn(0) deterministically.
    """
    cov = np.asarray(cov, dtype=np.float64)
    p = cov.shape[0]
    x, w = _gh_nodes(n_quad)
    var = np.clip(np.diag(cov), 0.0, None)
    sd = np.sqrt(var)
    degen = var <= DEGENERATE_VARIANCE
    f0 = float(fn(0.0))
    mean_fx = fn(np.outer(sd, x)) @ w  # (p,): E[fn(s_i x)]
    out = np.zeros((p, p))
    for i in range(p):
        for j in range(i + 1):
            if degen[i] and degen[j]:
                out[i, j] = f0 * f0
            elif degen[i]:
                out[i, j] = f0 * mean_fx[j]
            elif degen[j]:
                out[i, j] = f0 * mean_fx[i]
            else:
                rho = cov[i, j] / (sd[i] * sd[j])
                if abs(rho) > 1.0 + 1e-8:
                    raise QuadratureUnderflow(
                        f"inconsistent second moments: |rho|={abs(rho):.6f} at ({i},{j})"
                    )
                rho = float(np.clip(rho, -1.0, 1.0))
                a = sd[i] * x[:, None]
                b = sd[j] * (rho * x[:, None] + np.sqrt(max(0.0, 1.0 - rho * rho)) * x[None, :])
                out[i, j] = w @ (fn(a) * fn(b)) @ w
    return np.tril(out) + np.tril(out, -1).T


def _relu_moments(cov: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Arc-cosine moments E[phi phi], E[phi' phi'] for relu."""
    var = np.clip(np.diag(cov), 0.0, None)
    sd = np.sqrt(var)
    denom = np.outer(sd, sd)
    active = denom > DEGENERATE_VARIANCE
    rho = np.where(active, cov / np.where(active, denom, 1.0), 0.0)
    rho = np.clip(rho, -1.0, 1.0)
    theta = np.arccos(rho)
    phi = np.where(
        active,
        denom / (2.0 * np.pi) * (np.sin(theta) + (np.pi - theta) * np.cos(theta)),
        0.0,
    )
    dphi = np.where(active, (np.pi - theta) / (2.0 * np.pi), 0.0)
    return phi, dphi


def static_kernels(
    activation: str, kx: np.ndarray, depth: int, n_quad: int = _GH_DEFAULT, bias: bool = False
) -> StaticKernels:
    """Lazy-limit kernel recursion: forward moments, backward gradients.

    Analytic for linear and relu; 2-D Gauss-Hermite with ``n_quad`` nodes
    per dimension for tanh.  ``bias`` adds one to each layer's input
    covariance (unit-variance trainable bias at initialization).  The
    result is exactly constant in time and idempotent under re-invocation.
    """
    kx = np.asarray(kx, dtype=np.float64)
    p = kx.shape[0]
    phi: dict = {0: kx}
    phi_dot: dict = {}
    for ell in range(1, depth + 1):
        cov = phi[ell - 1] + 1.0 if bias else phi[ell - 1]
        if activation == "linear":
            phi[ell] = cov.copy()
            phi_dot[ell] = np.ones((p, p))
        elif activation == "relu":
            phi[ell], phi_dot[ell] = _relu_moments(cov)
        elif activation == "tanh":
            phi[ell] = _gaussian_moments_quadrature(cov, np.tanh, n_quad)
            phi_dot[ell] = _gaussian_moments_quadrature(
                cov, lambda v: 1.0 / np.cosh(v) ** 2, n_quad
            )
        else:
            raise ValueError(f"unknown activation '{activation}'")
    g: dict = {depth + 1: np.ones((p, p))}
    for ell in range(depth, 0, -1):
        g[ell] = phi_dot[ell] * g[ell + 1]
    ntk0 = ntk_assemble(
        [phi[ell] for ell in range(1, depth + 1)],
        [g[ell] for ell in range(1, depth + 1)],
        kx,
        grid=TimeGrid(1, 1.0),
    )
    if bias:
        for ell in range(1, depth + 1):
            ntk0 = ntk0 + g[ell]
    g.pop(depth + 1)
    return StaticKernels(phi=phi, phi_dot=phi_dot, g=g, ntk0=np.asarray(ntk0), depth=depth)


def gradient_independence_solve(cfg, data: SampleSet, grid: TimeGrid, **kwargs):
    """Fixed-point loop with A = B = 0 and sensitivity propagation skipped.

    Treats the feedforward and feedback weight matrices as independent,
    so the fields stay Gaussian given the kernels.  Signature and return
    match :func:`kernelflow.saddle.dmft_solve`.
    """
    from .saddle import dmft_solve

    return dmft_solve(cfg, data, grid, pin_response=True, **kwargs)


@dataclass(frozen=True)
class PerturbationFunctions:
    """Cumulative integrals of the lazy error dynamics on the grid.

    v[alpha](t) integrates Delta^0_alpha; vv[alpha, beta](t) integrates
    Delta^0_alpha against the running integral of Delta^0_beta.  Both
    vanish at t = 0.
    """

    v: np.ndarray  # (P, T)
    vv: np.ndarray  # (P, P, T)
    delta0: np.ndarray  # (P, T)


def _lazy_error(kx: np.ndarray, y: np.ndarray, rate: float, times: np.ndarray) -> np.ndarray:
    """Delta^0(t) = exp(-rate * K^x t) y via eigendecomposition."""
    evals, evecs = np.linalg.eigh(kx)
    yhat = evecs.T @ y
    modes = np.exp(-rate * np.outer(evals, times)) * yhat[:, None]
    return evecs @ modes


def perturbation_functions(
    kx: np.ndarray, y: np.ndarray, grid: TimeGrid, depth: int, oversample: int = 16
) -> PerturbationFunctions:
    """v and vv by cumulative quadrature of the exact lazy solution.

    The lazy error uses the matrix exponential (not Euler) so that the
    leading-order comparison isolates truncation error; the cumulative
    integrals are trapezoidal on an ``oversample``-times finer grid.
    """
    t = grid.n_steps
    fine = np.linspace(0.0, grid.horizon, (t - 1) * oversample + 1) if t > 1 else np.zeros(1)
    delta_fine = _lazy_error(kx, y, float(depth + 1), fine)
    if t == 1:
        p = kx.shape[0]
        return PerturbationFunctions(
            np.zeros((p, 1)), np.zeros((p, p, 1)), delta_fine
        )
    v_fine = cumulative_trapezoid(delta_fine, fine, axis=1, initial=0.0)
    integrand = delta_fine[:, None, :] * v_fine[None, :, :]
    vv_fine = cumulative_trapezoid(integrand, fine, axis=2, initial=0.0)
    sel = slice(None, None, oversample)
    return PerturbationFunctions(
        v=v_fine[:, sel].copy(),
        vv=vv_fine[:, :, sel].copy(),
        delta0=_lazy_error(kx, y, float(depth + 1), grid.times),
    )


def perturbative_linear_ntk(
    kx: np.ndarray,
    y: np.ndarray,
    grid: TimeGrid,
    gamma0: float,
    depth: int,
) -> dict:
    """Leading-order NTK and per-layer kernel corrections, deep linear.

    Returns ``ntk`` (a Kernel over (sample, time)), the per-layer
    second-order coefficient matrices ``h2[l]``/``g2[l]`` (without the
    gamma0^2 factor), and the perturbation functions.  The layer-l
    feature correction scales with l and the gradient correction with
    (depth+1-l); the order-gamma0^2 NTK sums them to the
    depth*(depth+1)/2 prefactor.
    """
    kx = np.asarray(kx, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    p, t = kx.shape[0], grid.n_steps
    funcs = perturbation_functions(kx, y, grid, depth)
    v, vv = funcs.v, funcs.vv

    # S(t, s) = sum_ab Kx[mu a] Kx[nu b] (vv_ab(t) + vv_ba(s) + v_a(t) v_b(s))
    kv = kx @ v  # (P, T)
    kvv = np.einsum("ma,nb,abt->mnt", kx, kx, vv)  # (P, P, T)
    base = kvv[:, :, :, None] + kvv.transpose(1, 0, 2)[:, :, None, :]
    h2_unit = base + kv[:, None, :, None] * kv[None, :, None, :]
    # gradient-side scalar: sum_ab Kx[a b] (vv_ab(t) + vv_ba(s) + v_a(t) v_b(s))
    tr_kvv = np.einsum("ab,abt->t", kx, vv)
    kyv = np.einsum("ab,at,bs->ts", kx, v, v)
    g2_unit = tr_kvv[:, None] + tr_kvv[None, :] + kyv

    h2 = {ell: ell * h2_unit for ell in range(1, depth + 1)}
    g2 = {ell: (depth + 1 - ell) * g2_unit for ell in range(1, depth + 1)}

    coef = depth * (depth + 1) / 2.0
    ntk = np.kron(kx * (depth + 1.0), np.ones((t, t)))
    correction = coef * (
        h2_unit.transpose(0, 2, 1, 3).reshape(p * t, p * t)
        + np.kron(kx, g2_unit)
    )
    ntk = ntk + gamma0**2 * correction
    samples = np.arange(p)
    kernel = Kernel(
        ntk, samples, samples, grid, "ntk",
        meta={"scheme": "perturbative-γ₀²", "gamma0": gamma0, "depth": depth},
    )
    return {"ntk": kernel, "h2": h2, "g2": g2, "functions": funcs}
