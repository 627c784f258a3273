"""Closed-form kernel dynamics for deep linear networks.

With a linear activation the single-site fields are linear functionals
of the Gaussian sources, h = (I - g0^2 C D)^{-1} (u + g0 C r), so the
kernel self-consistency closes algebraically in terms of the causal
operators C (feedback into h) and D (feedback into g) and resolvent
solves replace Monte-Carlo sampling.  The gradient field carries no
sample index, so G^l lives on the T x T grid, A^l maps g-space to
h-space ((P T) x T) and B^l the reverse.

The two-layer (depth-1) case additionally admits equal-time ODEs for
any data, and for whitened data a scalar system with a conservation law.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteValue, SingularResolvent
from .grids import SampleSet, TimeGrid, Trajectory
from .kernels import Kernel
from .ntk import LOSSES

__all__ = [
    "LinearConfig",
    "LinearOperators",
    "LinearDmftState",
    "linear_solve",
    "two_layer_whitened",
    "two_layer_general",
]


@dataclass(frozen=True)
class LinearConfig:
    """Parameters of the deep-linear fixed point loop.

    ``anneal_stages`` > 1 ramps gamma0 up in equal steps, warm-starting
    each stage from the previous fixed point; deep networks at strong
    feature learning can overshoot transiently when started from the
    lazy kernels, and continuation keeps the iteration on the physical
    branch.
    """

    depth: int
    gamma0: float
    beta: float = 0.6
    tol: float = 1e-10
    max_iters: int = 200
    pin_response: bool = False  # A = B = 0: gradient-independence variant
    loss: str = "mse"
    anneal_stages: int = 1

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.gamma0 < 0:
            raise ValueError("gamma0 must be >= 0")
        if not 0.0 < self.beta <= 1.0:
            raise ValueError("beta must lie in (0, 1]")
        if self.anneal_stages < 1:
            raise ValueError("anneal_stages must be >= 1")


@dataclass
class LinearOperators:
    """Causal integral operators of one layer.

    ``c`` has shape (P*T, T): row (mu, t), column s, entries
    dt * [A^{l-1}_mu(t,s) + Theta(t-s) sum_a H^{l-1}_{mu a}(t,s) Delta_a(s)];
    ``d`` is the (T, P*T) mirror built from B^l and G^{l+1}.  Theta is
    strict (equal times carry weight zero, left-endpoint rule).
    """

    c: np.ndarray
    d: np.ndarray


@dataclass
class LinearDmftState:
    """Kernels of the converged deep-linear fixed point."""

    config: LinearConfig
    grid: TimeGrid
    h: dict  # l = 0..L: (P*T, P*T) sample-major
    g: dict  # l = 1..L+1: (T, T)
    a: dict  # l = 1..L-1: (P*T, T)
    b: dict  # l = 1..L-1: (T, P*T)
    delta: Trajectory
    f: Trajectory
    converged: bool
    iterations: int
    diagnostics: list = field(default_factory=list)

    @property
    def depth(self) -> int:
        return max(self.h)

    def h_kernel(self, ell: int) -> Kernel:
        p = self.delta.values.shape[0]
        samples = np.arange(p)
        return Kernel(self.h[ell], samples, samples, self.grid, f"h_{ell}")

    def g_expanded(self, ell: int, n_samples: int) -> np.ndarray:
        """G^l broadcast to the (P*T, P*T) sample-resolved layout."""
        return np.kron(np.ones((n_samples, n_samples)), self.g[ell])

    def equal_time_h(self, ell: int) -> np.ndarray:
        """(T, P, P) trajectory of H^l(t, t)."""
        p = self.delta.values.shape[0]
        t = self.grid.n_steps
        idx = np.arange(t)
        return self.h[ell].reshape(p, t, p, t)[:, idx, :, idx]

    def loss_curve(self) -> np.ndarray:
        return 0.5 * np.sum(self.delta.values**2, axis=0)


def _ntk_diag_linear(h: dict, g: dict, p: int, t: int) -> np.ndarray:
    """(T, P, P) equal-time NTK: sum_l G^{l+1}(t,t) H^l(t,t)."""
    depth = max(h)
    idx = np.arange(t)
    out = np.zeros((t, p, p))
    for ell in range(0, depth + 1):
        g_diag = np.diag(g[ell + 1])
        h_eq = h[ell].reshape(p, t, p, t)[:, idx, :, idx]
        out += g_diag[:, None, None] * h_eq
    return out


def _integrate_delta(
    h: dict, g: dict, targets: np.ndarray, grid: TimeGrid, loss_kind: str
) -> tuple[np.ndarray, np.ndarray]:
    """Forward-Euler error/prediction dynamics from the current kernels."""
    p = targets.size
    t = grid.n_steps
    diag = _ntk_diag_linear(h, g, p, t)
    loss = LOSSES[loss_kind]
    f = np.zeros((p, t))
    delta = np.zeros((p, t))
    cur = np.zeros(p)
    for k in range(t):
        f[:, k] = cur
        delta[:, k] = loss.delta(cur, targets)
        if k + 1 < t:
            cur = cur + grid.dt * diag[k] @ delta[:, k]
    return f, delta


def _build_operators(
    h_prev: np.ndarray,
    g_next: np.ndarray,
    a_prev: np.ndarray | None,
    b_this: np.ndarray | None,
    delta: np.ndarray,
    grid: TimeGrid,
) -> LinearOperators:
    p, t = delta.shape
    dt = grid.dt
    steps = np.arange(t)
    lower = (steps[:, None] > steps[None, :]).astype(np.float64)

    # C[(mu,t), s] = A_prev + dt * Theta(t>s) sum_a H_prev[mu a](t,s) Delta_a(s);
    # the response kernel is a discrete response and carries its own
    # quadrature weight, so only the error-weighted term picks up dt
    h_blocks = h_prev.reshape(p, t, p, t)
    hd = np.einsum("mtas,as->mts", h_blocks, delta)  # sum over samples a
    c = dt * (hd * lower[None, :, :])
    if a_prev is not None:
        c = c + a_prev.reshape(p, t, t)
    c = c.reshape(p * t, t)

    # D[t, (a,s)] = B_this + dt * Theta(t>s) G_next(t,s) Delta_a(s)
    gd = g_next[None, :, :] * delta[:, None, :]  # (a, t, s)
    d = dt * (gd * lower[None, :, :])
    if b_this is not None:
        d = d + b_this.reshape(t, p, t).transpose(1, 0, 2)
    d = d.transpose(1, 0, 2).reshape(t, p * t)
    return LinearOperators(c=c, d=d)


def _resolve(mat: np.ndarray, rhs: np.ndarray, what: str) -> np.ndarray:
    try:
        return np.linalg.solve(mat, rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularResolvent(
            f"(I - gamma0^2 {what}) is singular; reduce dt or gamma0"
        ) from exc


def linear_solve(
    cfg: LinearConfig, data: SampleSet, grid: TimeGrid, init_state: LinearDmftState | None = None
) -> LinearDmftState:
    """Damped fixed-point iteration on the closed-form kernel equations.

    Layers are swept forward with the freshly updated kernels
    (Gauss-Seidel), then the error trajectory is recomputed; repeats
    until the largest relative kernel change is below tol.
    Initialization is the lazy solution H^l = K^x (constant in time),
    G^l = 1, A = B = 0, or a previous state when warm-starting.
    """
    if cfg.anneal_stages > 1 and init_state is None and cfg.gamma0 > 0:
        state = None
        for stage in range(1, cfg.anneal_stages + 1):
            gamma_stage = cfg.gamma0 * stage / cfg.anneal_stages
            beta = cfg.beta
            while True:
                stage_cfg = LinearConfig(
                    depth=cfg.depth,
                    gamma0=gamma_stage,
                    beta=beta,
                    tol=cfg.tol,
                    max_iters=cfg.max_iters,
                    pin_response=cfg.pin_response,
                    loss=cfg.loss,
                )
                try:
                    state = linear_solve(stage_cfg, data, grid, init_state=state)
                    break
                except NonFiniteValue:
                    # transient overshoot: retry the stage more gently
                    beta *= 0.5
                    if beta < 0.02:
                        raise
        return state

    depth = cfg.depth
    p, t = data.n_total, grid.n_steps
    if data.n_test:
        raise ValueError("linear_solve tracks training samples only; fold test points into kx")
    pt = p * t
    kx = data.input_gram
    y = data.targets
    g0sq = cfg.gamma0**2

    ones_tt = np.ones((t, t))
    if init_state is not None:
        h = {ell: init_state.h[ell].copy() for ell in range(0, depth + 1)}
        g = {ell: init_state.g[ell].copy() for ell in range(1, depth + 2)}
        a = {ell: init_state.a[ell].copy() for ell in range(1, depth)}
        b = {ell: init_state.b[ell].copy() for ell in range(1, depth)}
    else:
        h = {ell: np.kron(kx, ones_tt) for ell in range(0, depth + 1)}
        g = {ell: ones_tt.copy() for ell in range(1, depth + 2)}
        a = {ell: np.zeros((pt, t)) for ell in range(1, depth)}
        b = {ell: np.zeros((t, pt)) for ell in range(1, depth)}

    diagnostics = []
    converged = False
    f_vals = delta_vals = None
    it = 0
    eye_pt = np.eye(pt)
    eye_t = np.eye(t)
    err_guard = {"over": "ignore", "invalid": "ignore"}
    for it in range(1, cfg.max_iters + 1):
        with np.errstate(**err_guard):
            f_vals, delta_vals = _integrate_delta(h, g, y, grid, cfg.loss)
            changes = {}
            for ell in range(1, depth + 1):
                ops = _build_operators(
                    h[ell - 1],
                    g[ell + 1],
                    a.get(ell - 1) if not cfg.pin_response else None,
                    b.get(ell) if not cfg.pin_response else None,
                    delta_vals,
                    grid,
                )
                c, d = ops.c, ops.d
                m_h = eye_pt - g0sq * (c @ d)
                m_g = eye_t - g0sq * (d @ c)
                # H^l = R [H^{l-1} + g0^2 C G^{l+1} C^T] R^T with R = m_h^{-1}
                inner_h = h[ell - 1] + g0sq * c @ g[ell + 1] @ c.T
                new_h = _resolve(m_h, _resolve(m_h, inner_h, "C D").T, "C D").T
                new_h = 0.5 * (new_h + new_h.T)
                inner_g = g[ell + 1] + g0sq * d @ h[ell - 1] @ d.T
                new_g = _resolve(m_g, _resolve(m_g, inner_g, "D C").T, "D C").T
                new_g = 0.5 * (new_g + new_g.T)

                changes[f"h_{ell}"] = float(
                    np.linalg.norm(new_h - h[ell]) / (np.linalg.norm(h[ell]) + 1e-12)
                )
                changes[f"g_{ell}"] = float(
                    np.linalg.norm(new_g - g[ell]) / (np.linalg.norm(g[ell]) + 1e-12)
                )
                h[ell] = (1.0 - cfg.beta) * h[ell] + cfg.beta * new_h
                g[ell] = (1.0 - cfg.beta) * g[ell] + cfg.beta * new_g

                if not cfg.pin_response:
                    if ell <= depth - 1:
                        new_a = _resolve(m_h, c, "C D")
                        changes[f"a_{ell}"] = float(
                            np.linalg.norm(new_a - a[ell]) / (np.linalg.norm(a[ell]) + 1e-12)
                        )
                        a[ell] = (1.0 - cfg.beta) * a[ell] + cfg.beta * new_a
                    if ell >= 2:
                        new_b = _resolve(m_g, d, "D C")
                        changes[f"b_{ell - 1}"] = float(
                            np.linalg.norm(new_b - b[ell - 1]) / (np.linalg.norm(b[ell - 1]) + 1e-12)
                        )
                        b[ell - 1] = (1.0 - cfg.beta) * b[ell - 1] + cfg.beta * new_b

        if not all(np.all(np.isfinite(h[ell])) and np.all(np.isfinite(g[ell])) for ell in range(1, depth + 1)):
            raise NonFiniteValue(
                f"deep-linear iteration diverged at sweep {it} "
                f"(gamma0={cfg.gamma0}, dt={grid.dt}); reduce dt/gamma0, lower beta, "
                "or use anneal_stages"
            )
        max_change = max(changes.values())
        diagnostics.append({"iteration": it, "max_change": max_change, "changes": changes})
        if max_change < cfg.tol:
            converged = True
            break

    f_vals, delta_vals = _integrate_delta(h, g, y, grid, cfg.loss)
    return LinearDmftState(
        config=cfg,
        grid=grid,
        h=h,
        g={ell: g[ell] for ell in range(1, depth + 2)},
        a=a,
        b=b,
        delta=Trajectory(delta_vals, grid),
        f=Trajectory(f_vals, grid),
        converged=converged,
        iterations=it,
        diagnostics=diagnostics,
    )


def _rk4(deriv, state: np.ndarray, dt: float, n_steps: int) -> np.ndarray:
    """Fixed-step RK4; returns the (n_steps, dim) trajectory."""
    out = np.empty((n_steps, state.size))
    cur = state.astype(np.float64).copy()
    out[0] = cur
    for k in range(1, n_steps):
        k1 = deriv(cur)
        k2 = deriv(cur + 0.5 * dt * k1)
        k3 = deriv(cur + 0.5 * dt * k2)
        k4 = deriv(cur + dt * k3)
        cur = cur + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        out[k] = cur
    return out


def two_layer_whitened(gamma0: float, y_norm: float, grid: TimeGrid) -> dict:
    """Scalar error/kernel dynamics of a two-layer linear net, whitened data.

    Integrates the coupled system dH_y/dt = 2 g0^2 Delta (y - Delta),
    dDelta/dt = -2 H_y Delta from (H_y, Delta)(0) = (1, y) with RK4.
    The balancing H_y(t) = G(t) holds automatically, and the pair is
    constrained to the hyperbola H_y^2 - g0^2 (y - Delta)^2 = 1, so the
    error obeys dDelta/dt = -2 sqrt(1 + g0^2 (y-Delta)^2) Delta.
    At long horizon H_y approaches sqrt(1 + g0^2 y^2): the kernel grows a
    rank-one spike along the target direction.
    """
    y = float(y_norm)

    def deriv(s):
        hy, dl = s
        return np.array([2.0 * gamma0**2 * dl * (y - dl), -2.0 * hy * dl])

    traj = _rk4(deriv, np.array([1.0, y]), grid.dt, grid.n_steps)
    h_y = traj[:, 0]
    delta = traj[:, 1]
    return {
        "delta": delta,
        "h_y": h_y,
        "conservation": h_y**2 - gamma0**2 * (y - delta) ** 2,
        "h_y_final_predicted": float(np.sqrt(1.0 + gamma0**2 * y**2)),
        "grid": grid,
    }


def two_layer_general(gamma0: float, kx: np.ndarray, y: np.ndarray, grid: TimeGrid) -> dict:
    """Equal-time ODE system of the two-layer linear net for any data.

    Integrates dH/dt = g0^2 [K^x Delta (y-Delta)^T + (y-Delta) Delta^T K^x],
    dG/dt = 2 g0^2 (y-Delta).Delta, dDelta/dt = -[H + G K^x] Delta from
    H(0) = I, G(0) = 1, Delta(0) = y.
    """
    kx = np.asarray(kx, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    p = y.size

    def unpack(s):
        h = s[: p * p].reshape(p, p)
        g = s[p * p]
        dl = s[p * p + 1 :]
        return h, g, dl

    def deriv(s):
        h, g, dl = unpack(s)
        ky = kx @ dl
        resid = y - dl
        dh = gamma0**2 * (np.outer(ky, resid) + np.outer(resid, ky))
        dg = 2.0 * gamma0**2 * float(resid @ dl)
        ddl = -(h @ dl + g * ky)
        return np.concatenate([dh.ravel(), [dg], ddl])

    init = np.concatenate([np.eye(p).ravel(), [1.0], y])
    traj = _rk4(deriv, init, grid.dt, grid.n_steps)
    h_t = traj[:, : p * p].reshape(grid.n_steps, p, p)
    g_t = traj[:, p * p]
    delta_t = traj[:, p * p + 1 :].T
    return {"h": h_t, "g": g_t, "delta": delta_t, "grid": grid}
