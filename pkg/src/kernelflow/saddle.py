"""Alternating Monte-Carlo solution of the self-consistent kernel equations.

Each outer iteration (i) integrates the predictions from the current
equal-time NTK, (ii) redraws Gaussian sources per layer, solves the
single-site fields and their sensitivities sample by sample, and
estimates new feature/gradient/response kernels, then (iii) applies the
damped update K <- (1-beta) K + beta K_hat.  The loop stops when the
largest relative kernel change drops below ``tol``.

Substreams are keyed per (iteration, layer, sample).  By default the
iteration key is held fixed ("frozen" noise), which makes the update map
deterministic so the iteration can converge to machine precision;
``fresh_draws=True`` rekeys every iteration instead, which leaves a
Monte-Carlo noise floor of order 1/sqrt(n_mc) in the convergence metric.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InsufficientSamples, NonFiniteValue, SingularSystem
from .fields import DEFAULT_CHUNK, FieldEnsemble, build_couplings, run_chunks
from .gp import gp_sample
from .grids import SampleSet, TimeGrid, Trajectory
from .kernels import Kernel
from .ntk import LOSSES, integrate_predictions

__all__ = [
    "DmftConfig",
    "DmftState",
    "dmft_solve",
    "estimate_kernels",
    "representer_check",
    "GAMMA0_LAZY",
]

#: below this gamma0 the lazy limit applies exactly: fields are Gaussian,
#: response kernels are defined as zero, and the solver short-circuits to
#: the static kernel recursion
GAMMA0_LAZY = 1e-8

_HOMOGENEOUS = {"linear", "relu"}
ACTIVATIONS = ("linear", "relu", "tanh")


@dataclass(frozen=True)
class DmftConfig:
    """Solver parameters for the Monte-Carlo saddle iteration."""

    depth: int
    gamma0: float
    activation: str = "tanh"
    n_mc: int = 2000
    beta: float = 0.6
    tol: float = 1e-3
    max_iters: int = 40
    seed: int = 0
    lambda_wd: float = 0.0
    use_bias: bool = False
    fresh_draws: bool = False
    loss: str = "mse"

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.gamma0 < 0:
            raise ValueError("gamma0 must be >= 0")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if not 0.0 < self.beta <= 1.0:
            raise ValueError("beta must lie in (0, 1]")
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.n_mc < 2:
            raise InsufficientSamples("n_mc must be >= 2")
        if self.lambda_wd < 0:
            raise ValueError("lambda_wd must be >= 0")
        if self.lambda_wd > 0 and self.activation not in _HOMOGENEOUS:
            raise ValueError(
                "weight decay requires a homogeneous activation (linear or relu); "
                "the prediction decay rate is lambda * homogeneity degree"
            )
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss '{self.loss}'")

    @property
    def homogeneity_degree(self) -> int | None:
        """kappa with f(c theta) = c^kappa f(theta); depth+1 when homogeneous."""
        return self.depth + 1 if self.activation in _HOMOGENEOUS else None

    @property
    def prediction_decay(self) -> float:
        """Uniform decay lambda*kappa entering df/dt under weight decay."""
        if self.lambda_wd == 0.0:
            return 0.0
        return self.lambda_wd * self.homogeneity_degree


@dataclass
class DmftState:
    """Converged (or flagged) kernels plus prediction trajectories."""

    config: DmftConfig
    grid: TimeGrid
    phis: list[Kernel]
    gs: list[Kernel]
    a_kernels: list[Kernel]
    b_kernels: list[Kernel]
    f: Trajectory
    delta: Trajectory
    converged: bool
    iterations: int
    diagnostics: list[dict] = field(default_factory=list)

    @property
    def depth(self) -> int:
        return len(self.phis)

    def loss_curve(self) -> np.ndarray:
        """Training loss 0.5*sum(Delta^2) per grid step (MSE)."""
        return 0.5 * np.sum(self.delta.values**2, axis=0)

    def equal_time_ntk(self, kx: np.ndarray, step: int = -1) -> np.ndarray:
        """Assembled NTK K(t_k, t_k) over all samples at one grid step."""
        t = self.grid.n_steps
        step = range(t)[step]
        phi_eq = [k.as_blocks()[:, step, :, step] for k in self.phis]
        g_eq = [k.as_blocks()[:, step, :, step] for k in self.gs]
        out = phi_eq[-1].copy()
        for ell in range(1, self.depth):
            out += g_eq[ell] * phi_eq[ell - 1]
        out += g_eq[0] * np.asarray(kx)
        if self.config.use_bias:
            for ell in range(self.depth):
                out += g_eq[ell]
        return out


def _sym(mat: np.ndarray) -> np.ndarray:
    return 0.5 * (mat + mat.T)


def _rel_change(new: np.ndarray, old: np.ndarray) -> float:
    return float(np.linalg.norm(new - old) / (np.linalg.norm(old) + 1e-12))


def _time_to_sample_major(mat: np.ndarray, p: int, t: int) -> np.ndarray:
    return np.ascontiguousarray(mat.reshape(t, p, t, p).transpose(1, 0, 3, 2)).reshape(
        p * t, p * t
    )


def _equal_time_stack(mat: np.ndarray, p: int, t: int) -> np.ndarray:
    """(P*T, P*T) sample-major -> (T, P, P) equal-time slices."""
    idx = np.arange(t)
    return mat.reshape(p, t, p, t)[:, idx, :, idx]


def _ntk_diag(phis: dict, gs: dict, kx: np.ndarray, p: int, t: int, use_bias: bool) -> np.ndarray:
    depth = max(phis)
    out = _equal_time_stack(phis[depth], p, t).copy()
    for ell in range(1, depth):
        out += _equal_time_stack(gs[ell + 1], p, t) * _equal_time_stack(phis[ell], p, t)
    out += _equal_time_stack(gs[1], p, t) * kx[None, :, :]
    if use_bias:
        for ell in range(1, depth + 1):
            out += _equal_time_stack(gs[ell], p, t)
    return out


def estimate_kernels(
    ensembles: Sequence[FieldEnsemble], gamma0: float, activation: str
) -> tuple[np.ndarray, np.ndarray, np.ndarray | None, np.ndarray | None]:
    """Moment estimates over an ensemble of solved single-site samples.

    Returns sample-major (Phi_hat, G_hat, A_hat, B_hat) where A_hat is
    the average of dphi(h)/dr / gamma0 and B_hat the average of dg/du /
    gamma0 (for the layer below).  Response estimates require the
    ensembles to carry sensitivities; below the lazy threshold they are
    defined as zero and returned as None.
    """
    from .backends.fields_numpy import activation_values

    if len(ensembles) < 2:
        raise InsufficientSamples(f"need >= 2 samples, got {len(ensembles)}")
    p, t = ensembles[0].h.shape
    pt = p * t
    phi_hat = np.zeros((pt, pt))
    g_hat = np.zeros((pt, pt))
    want_resp = gamma0 >= GAMMA0_LAZY and ensembles[0].jh_r is not None
    a_hat = np.zeros((pt, pt)) if want_resp else None
    b_hat = np.zeros((pt, pt)) if want_resp else None
    for ens in ensembles:
        phi, dphi, ddphi = activation_values(activation, ens.h)
        flat_phi = phi.reshape(pt)
        flat_g = ens.g.reshape(pt)
        phi_hat += np.outer(flat_phi, flat_phi)
        g_hat += np.outer(flat_g, flat_g)
        if want_resp:
            a_hat += (dphi[:, :, None, None] * ens.jh_r).reshape(pt, pt)
            dg_du = (ddphi * ens.z)[:, :, None, None] * ens.jh_u + dphi[
                :, :, None, None
            ] * ens.jz_u
            b_hat += dg_du.reshape(pt, pt)
    s = float(len(ensembles))
    phi_hat = _sym(phi_hat / s)
    g_hat = _sym(g_hat / s)
    if want_resp:
        a_hat /= gamma0 * s
        b_hat /= gamma0 * s
    return phi_hat, g_hat, a_hat, b_hat


def _static_init(cfg: DmftConfig, kx: np.ndarray, t: int):
    """Initial guess: time-constant lazy kernels from the static recursion."""
    from .approx import static_kernels

    stat = static_kernels(cfg.activation, kx, cfg.depth, bias=cfg.use_bias)
    ones_tt = np.ones((t, t))
    phis = {ell: np.kron(stat.phi[ell], ones_tt) for ell in range(1, cfg.depth + 1)}
    gs = {ell: np.kron(stat.g[ell], ones_tt) for ell in range(1, cfg.depth + 1)}
    return stat, phis, gs


def _wrap_state(
    cfg: DmftConfig,
    grid: TimeGrid,
    data: SampleSet,
    phis: dict,
    gs: dict,
    a_k: dict,
    b_k: dict,
    f: Trajectory,
    delta: Trajectory,
    converged: bool,
    iterations: int,
    diagnostics: list[dict],
) -> DmftState:
    samples = np.arange(data.n_total)
    mk = lambda mat, name: Kernel(mat, samples, samples, grid, name)
    return DmftState(
        config=cfg,
        grid=grid,
        phis=[mk(phis[ell], f"phi_{ell}") for ell in range(1, cfg.depth + 1)],
        gs=[mk(gs[ell], f"g_{ell}") for ell in range(1, cfg.depth + 1)],
        a_kernels=[mk(a_k[ell], f"a_{ell}") for ell in range(1, cfg.depth)],
        b_kernels=[mk(b_k[ell], f"b_{ell}") for ell in range(1, cfg.depth)],
        f=f,
        delta=delta,
        converged=converged,
        iterations=iterations,
        diagnostics=diagnostics,
    )


def dmft_solve(
    cfg: DmftConfig,
    data: SampleSet,
    grid: TimeGrid,
    threads: int = 1,
    chunk_size: int = DEFAULT_CHUNK,
    diag_stream=None,
    pin_response: bool = False,
    init_state: DmftState | None = None,
) -> DmftState:
    """Run the damped alternating Monte-Carlo fixed-point loop.

    ``pin_response`` holds A = B = 0 and skips sensitivity propagation
    (the gradient-independence scheme).  ``init_state`` warm-starts the
    kernels from a previous solve instead of the static lazy guess.
    Non-convergence within ``max_iters`` flags the returned state
    instead of raising.  Per-iteration diagnostics are appended to
    ``diag_stream`` as JSON lines when given.
    """
    depth, t = cfg.depth, grid.n_steps
    p_all = data.n_total
    p_train = data.n_train
    pt = p_all * t
    kx = data.input_gram
    ones_tt = np.ones((t, t))

    if init_state is not None:
        if init_state.depth != depth or init_state.grid != grid:
            raise ValueError("init_state does not match the requested depth/grid")
        phis = {ell: init_state.phis[ell - 1].values.copy() for ell in range(1, depth + 1)}
        gs = {ell: init_state.gs[ell - 1].values.copy() for ell in range(1, depth + 1)}
        a_k = {ell: init_state.a_kernels[ell - 1].values.copy() for ell in range(1, depth)}
        b_k = {ell: init_state.b_kernels[ell - 1].values.copy() for ell in range(1, depth)}
    else:
        _, phis, gs = _static_init(cfg, kx, t)
        a_k = {ell: np.zeros((pt, pt)) for ell in range(1, depth)}
        b_k = {ell: np.zeros((pt, pt)) for ell in range(1, depth)}
    phis[0] = np.kron(kx, ones_tt)
    gs[depth + 1] = np.ones((pt, pt))

    lazy = cfg.gamma0 < GAMMA0_LAZY

    def predictions():
        diag = _ntk_diag(phis, gs, kx, p_all, t, cfg.use_bias)
        return integrate_predictions(
            diag, data.targets, cfg.loss, grid, decay=cfg.prediction_decay
        )

    if lazy:
        # Gaussian fields with static covariances: the initial guess is the
        # exact fixed point, so a single (deterministic) iteration suffices.
        f, delta = predictions()
        diag = [{"iteration": 1, "max_change": 0.0, "changes": {},
                 "loss_final": 0.5 * float(np.sum(delta.values[:, -1] ** 2)),
                 "ntk_trace": float(np.trace(_ntk_diag(phis, gs, kx, p_all, t, cfg.use_bias)[-1]))}]
        if diag_stream is not None:
            diag_stream.write(json.dumps(diag[0], sort_keys=True) + "\n")
        return _wrap_state(cfg, grid, data, phis, gs, a_k, b_k, f, delta, True, 1, diag)

    diagnostics: list[dict] = []
    f = delta = None
    converged = False
    it = 0
    for it in range(1, cfg.max_iters + 1):
        f, delta = predictions()
        delta_pad = np.zeros((p_all, t))
        delta_pad[:p_train] = delta.values

        stream_it = it if cfg.fresh_draws else 0
        estimates = {}
        for ell in range(1, depth + 1):
            cov_u = phis[ell - 1] + 1.0 if cfg.use_bias else phis[ell - 1]
            cov_r = gs[ell + 1]
            u = gp_sample(cov_u, cfg.n_mc, cfg.seed, stream=(stream_it, ell, 0), grid=grid)
            r = gp_sample(cov_r, cfg.n_mc, cfg.seed, stream=(stream_it, ell, 1), grid=grid)
            want_a = (not pin_response) and ell <= depth - 1
            want_b = (not pin_response) and ell >= 2
            coup = build_couplings(
                phis[ell - 1],
                gs[ell + 1],
                a_k.get(ell - 1) if not pin_response else None,
                b_k.get(ell) if not pin_response else None,
                delta_pad,
                grid,
                cfg.activation,
                cfg.gamma0,
                cfg.lambda_wd,
                cfg.use_bias,
            )
            try:
                mom = run_chunks(
                    u, r, coup, want_a, want_b,
                    chunk_size=chunk_size, threads=threads,
                )
            except NonFiniteValue as exc:
                raise NonFiniteValue(
                    f"iteration {it}, layer {ell}: {exc} "
                    f"(gamma0={cfg.gamma0}, dt={grid.dt})"
                ) from exc
            est = {
                "phi": _sym(mom["phi_outer"] / cfg.n_mc),
                "g": _sym(mom["g_outer"] / cfg.n_mc),
            }
            if want_a:
                est["a"] = _time_to_sample_major(mom["sa"], p_all, t) / (cfg.gamma0 * cfg.n_mc)
            if want_b:
                est["b"] = _time_to_sample_major(mom["sb"], p_all, t) / (cfg.gamma0 * cfg.n_mc)
            estimates[ell] = est

        changes = {}
        beta = cfg.beta
        for ell in range(1, depth + 1):
            new_phi = (1.0 - beta) * phis[ell] + beta * estimates[ell]["phi"]
            new_g = (1.0 - beta) * gs[ell] + beta * estimates[ell]["g"]
            changes[f"phi_{ell}"] = _rel_change(new_phi, phis[ell])
            changes[f"g_{ell}"] = _rel_change(new_g, gs[ell])
            phis[ell], gs[ell] = new_phi, new_g
        if not pin_response:
            for ell in range(1, depth):
                new_a = (1.0 - beta) * a_k[ell] + beta * estimates[ell]["a"]
                new_b = (1.0 - beta) * b_k[ell] + beta * estimates[ell + 1]["b"]
                changes[f"a_{ell}"] = _rel_change(new_a, a_k[ell])
                changes[f"b_{ell}"] = _rel_change(new_b, b_k[ell])
                a_k[ell], b_k[ell] = new_a, new_b

        max_change = max(changes.values())
        entry = {
            "iteration": it,
            "max_change": max_change,
            "changes": changes,
            "loss_final": 0.5 * float(np.sum(delta.values[:, -1] ** 2)),
            "ntk_trace": float(
                np.trace(_ntk_diag(phis, gs, kx, p_all, t, cfg.use_bias)[-1])
            ),
        }
        diagnostics.append(entry)
        if diag_stream is not None:
            diag_stream.write(json.dumps(entry, sort_keys=True) + "\n")
        if max_change < cfg.tol:
            converged = True
            break

    f, delta = predictions()
    return _wrap_state(
        cfg, grid, data, phis, gs, a_k, b_k, f, delta, converged, it, diagnostics
    )


def representer_check(state: DmftState, data: SampleSet, lambda_wd: float, kappa: float) -> dict:
    """Compare long-horizon test predictions with final-NTK ridge regression.

    With weight decay in a kappa-homogeneous network the stationary
    predictor is f(x) = k(x)^T [K + lambda*kappa I]^{-1} y with the
    final-time NTK; the report carries the deviation of the integrated
    trajectory from that fixed point.
    """
    p = data.n_train
    ntk_final = state.equal_time_ntk(data.input_gram, step=-1)
    k_train = ntk_final[:p, :p]
    ridge = lambda_wd * kappa
    try:
        weights = np.linalg.solve(k_train + ridge * np.eye(p), data.targets)
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(f"ridge system singular at lambda*kappa={ridge}") from exc
    f_ridge = ntk_final[:, :p] @ weights
    f_solver = state.f.values[:, -1]
    dev = np.abs(f_solver - f_ridge)
    scale = max(float(np.abs(f_ridge).max()), 1e-12)
    report = {
        "ridge": ridge,
        "max_abs_dev": float(dev.max()),
        "max_rel_dev": float(dev.max() / scale),
        "f_solver_final": f_solver.tolist(),
        "f_ridge": f_ridge.tolist(),
    }
    if data.n_test:
        dev_test = dev[p:]
        report["max_abs_dev_test"] = float(dev_test.max())
        report["max_rel_dev_test"] = float(
            dev_test.max() / max(float(np.abs(f_ridge[p:]).max()), 1e-12)
        )
    return report
