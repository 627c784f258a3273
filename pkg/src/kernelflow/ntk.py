"""NTK assembly from per-layer kernels and integration of the outputs.

The tangent kernel combines feature kernels Phi^l and gradient kernels
G^l layer by layer,

    K(t,s) = Phi^L + sum_{l=1}^{L-1} G^{l+1} .* Phi^l + G^1 .* K^x,

and its equal-time diagonal drives the predictions through
df/dt = K(t,t) Delta(t) (plus an optional uniform decay under weight
decay in homogeneous networks).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import NonFiniteValue, ShapeMismatch
from .grids import TimeGrid, Trajectory
from .kernels import Kernel

__all__ = ["ntk_assemble", "integrate_predictions", "LOSSES", "Loss"]


def _values(k) -> np.ndarray:
    return k.values if isinstance(k, Kernel) else np.asarray(k, dtype=np.float64)


def ntk_assemble(phis: Sequence, gs: Sequence, kx: np.ndarray, grid: TimeGrid | None = None):
    """Two-time NTK from per-layer feature/gradient kernels and the input gram.

    ``phis`` holds Phi^1..Phi^L and ``gs`` holds G^1..G^L on a common
    flattened index; ``kx`` is the P' x P' input gram, broadcast over
    time.  Returns a :class:`Kernel` when the inputs carry one.
    """
    if len(phis) != len(gs):
        raise ShapeMismatch(f"{len(phis)} feature kernels vs {len(gs)} gradient kernels")
    if len(phis) == 0:
        raise ShapeMismatch("need at least one layer")
    depth = len(phis)
    mats = [_values(k) for k in phis]
    gmats = [_values(k) for k in gs]
    shape = mats[0].shape
    for m in mats + gmats:
        if m.shape != shape:
            raise ShapeMismatch(f"kernel shape {m.shape} differs from {shape}")

    template = next((k for k in list(phis) + list(gs) if isinstance(k, Kernel)), None)
    if grid is None and template is not None:
        grid = template.grid
    if grid is None:
        raise ShapeMismatch("a TimeGrid is required when passing raw matrices")
    t = grid.n_steps
    p = shape[0] // t
    kx = np.asarray(kx, dtype=np.float64)
    if kx.shape != (p, p):
        raise ShapeMismatch(f"input gram {kx.shape} does not match {p} samples")

    out = mats[-1].copy()
    for ell in range(1, depth):  # interior terms G^{l+1} .* Phi^l
        out += gmats[ell] * mats[ell - 1]
    out += gmats[0] * np.kron(kx, np.ones((t, t)))
    if template is not None:
        return Kernel(out, template.row_samples, template.col_samples, grid, "ntk")
    return out


@dataclass(frozen=True)
class Loss:
    """Pluggable loss: value on the training residual and Delta = -dl/df."""

    value: Callable[[np.ndarray, np.ndarray], float]
    delta: Callable[[np.ndarray, np.ndarray], np.ndarray]


LOSSES = {
    # l = 1/2 sum (f - y)^2  =>  Delta = y - f
    "mse": Loss(
        value=lambda f, y: 0.5 * float(np.sum((f - y) ** 2)),
        delta=lambda f, y: y - f,
    ),
}


def integrate_predictions(
    ntk_diag: np.ndarray,
    targets: np.ndarray,
    loss_kind: str,
    grid: TimeGrid,
    decay: float = 0.0,
) -> tuple[Trajectory, Trajectory]:
    """Forward-Euler integration of df/dt = K(t,t) Delta(t) - decay * f.

    ``ntk_diag`` has shape (T, P', P) or (T, P', P'): per-step equal-time
    NTK whose first P columns couple to the training error.  Rows beyond
    the first P are test samples, integrated with Delta over the training
    block only.  f(0) = 0 (the wide-network output concentrates at zero
    under mean-field scaling).  Returns (f over all rows, Delta over the
    training rows).
    """
    ntk_diag = np.asarray(ntk_diag, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64).ravel()
    t_steps = grid.n_steps
    if ntk_diag.ndim != 3 or ntk_diag.shape[0] != t_steps:
        raise ShapeMismatch(f"ntk_diag must be (T, P', P_cols), got {ntk_diag.shape}")
    n_rows = ntk_diag.shape[1]
    p = y.size
    if ntk_diag.shape[2] < p or n_rows < p:
        raise ShapeMismatch(
            f"ntk_diag couples {ntk_diag.shape[2]} columns, need >= {p} training samples"
        )
    loss = LOSSES[loss_kind]

    f = np.zeros((n_rows, t_steps))
    delta = np.zeros((p, t_steps))
    cur = np.zeros(n_rows)
    dt = grid.dt
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(t_steps):
            f[:, k] = cur
            d = loss.delta(cur[:p], y)
            delta[:, k] = d
            if k + 1 < t_steps:
                cur = cur + dt * (ntk_diag[k][:, :p] @ d) - dt * decay * cur
                if not np.all(np.isfinite(cur)):
                    raise NonFiniteValue(f"predictions diverged at step {k + 1}; reduce dt")
    return Trajectory(f, grid), Trajectory(delta, grid)
