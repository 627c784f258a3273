"""Sampling mean-zero Gaussian processes on the (sample, time) grid.

Draws are produced through per-draw counter-based substreams (Philox keyed
by ``(seed, stream, draw index)``), so the output for a fixed seed is
independent of how draws are chunked across worker threads.
"""

from __future__ import annotations

import numpy as np

from .errors import FactorizationFailure
from .kernels import Kernel

__all__ = ["gp_sample", "covariance_factor"]

#: escalating relative diagonal jitter tried after a plain Cholesky fails
JITTER_LADDER = (1e-10, 1e-9, 1e-8, 1e-7, 1e-6)

#: diagonal entries at or below this (relative) size are treated as
#: deterministic zeros of the process rather than repaired with jitter
DEGENERATE_DIAG = 1e-14


def covariance_factor(cov: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Lower-triangular factor L with L L^T = cov on the active subspace.

    Rows/columns whose diagonal is (relatively) zero are excluded: by
    positive semidefiniteness those components vanish identically, and
    excluding them keeps e.g. a zero covariance producing exactly zero
    draws.  PSD repair on the active block uses escalating diagonal
    jitter, never eigenvalue clipping, so the map cov -> draws stays
    smooth under small kernel perturbations.

    Returns ``(L, active)`` where ``active`` indexes the retained rows.
    """
    cov = np.asarray(cov, dtype=np.float64)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise FactorizationFailure(f"covariance must be square, got {cov.shape}")
    diag = np.diag(cov)
    scale = float(diag.max(initial=0.0))
    active = np.flatnonzero(diag > DEGENERATE_DIAG * max(1.0, scale))
    if active.size == 0:
        return np.zeros((0, 0)), active
    sub = 0.5 * (cov[np.ix_(active, active)] + cov[np.ix_(active, active)].T)
    jitter_unit = float(np.mean(np.diag(sub)))
    for jitter in (0.0,) + tuple(JITTER_LADDER):
        try:
            ell = np.linalg.cholesky(sub + jitter * jitter_unit * np.eye(active.size))
            return ell, active
        except np.linalg.LinAlgError:
            continue
    raise FactorizationFailure(
        f"covariance not factorizable at jitter ceiling {JITTER_LADDER[-1]:.0e} "
        "(badly conditioned kernel, often a diverged fixed-point iterate)"
    )


def _draw_standard_normal(seed_key: tuple, n_draws: int, dim: int) -> np.ndarray:
    """(n_draws, dim) standard normals from per-draw Philox substreams.

    Draw i starts the shared Philox stream at counter block i * 2^64,
    giving every draw its own counter range independent of n_draws,
    chunking, or thread count.
    """
    key = np.random.SeedSequence(entropy=list(seed_key)).generate_state(2, np.uint64)
    out = np.empty((n_draws, dim))
    counter = np.zeros(4, dtype=np.uint64)
    for i in range(n_draws):
        counter[1] = i
        bitgen = np.random.Philox(key=key, counter=counter)
        out[i] = np.random.Generator(bitgen).standard_normal(dim)
    return out


def gp_sample(
    cov,
    n_samples: int,
    seed: int,
    stream: tuple = (),
    grid=None,
) -> np.ndarray:
    """Draw ``n_samples`` trajectories from GP(0, cov).

    ``cov`` is a :class:`Kernel` or a square symmetric matrix over the
    flattened (sample, time) index.  Returns an array of shape
    ``(n_samples, P, T)`` when the time grid is known (from the Kernel or
    the ``grid`` argument), else ``(n_samples, dim)``.

    ``stream`` namespaces the substreams, e.g. ``(iteration, layer)``
    inside the fixed-point loop; the result for a fixed ``(seed, stream)``
    does not depend on thread count or chunking.
    """
    if isinstance(cov, Kernel):
        grid = cov.grid
        mat = cov.values
    else:
        mat = np.asarray(cov, dtype=np.float64)
    ell, active = covariance_factor(mat)
    dim = mat.shape[0]
    eps = _draw_standard_normal((int(seed),) + tuple(int(s) for s in stream), n_samples, active.size)
    draws = np.zeros((n_samples, dim))
    if active.size:
        draws[:, active] = eps @ ell.T
    if grid is not None:
        t = grid.n_steps
        p, rem = divmod(dim, t)
        if rem == 0:
            return draws.reshape(n_samples, p, t)
    return draws
