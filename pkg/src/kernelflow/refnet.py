"""Finite-width MLP reference trainer with kernel logging.

The network follows the mean-field parameterization: unit-variance
Gaussian init, hidden scaling 1/sqrt(N), readout f = w.phi(h^L)/(gamma
sqrt(N)) with gamma = gamma0 sqrt(N), trained by full-batch gradient
descent at learning rate eta0 * gamma^2 so that one step advances
function-space time by eta0.  Activations and backprop fields are logged
on the grid to measure empirical feature/gradient kernels and the NTK.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backends.fields_numpy import activation_values
from .errors import DimensionMismatch, MissingCheckpoint, NonFiniteValue
from .grids import TimeGrid
from .kernels import Kernel

__all__ = ["NetworkSnapshot", "TrainLog", "init_network", "train", "measure_kernels", "param_space_ntk"]


@dataclass
class NetworkSnapshot:
    """Weights and hyperparameters of the finite-width reference MLP."""

    width: int
    depth: int
    gamma0: float
    activation: str
    weights: list[np.ndarray]  # W^0 (N x D), W^1..W^{L-1} (N x N), w^L (N,)
    biases: list[np.ndarray] | None = None  # b^0..b^{L-1} (N,) when trainable

    @property
    def gamma(self) -> float:
        return self.gamma0 * np.sqrt(self.width)


@dataclass
class TrainLog:
    """Loss curve plus logged per-checkpoint activations and gradients."""

    grid: TimeGrid
    eta0: float
    loss: np.ndarray  # (T,)
    f: np.ndarray  # (P_total, T)
    phi_log: list[list[np.ndarray]]  # [checkpoint][layer] phi(h^l), (P_total, N)
    g_log: list[list[np.ndarray]]  # [checkpoint][layer] g^l, (P_total, N)
    meta: dict = field(default_factory=dict)


def init_network(
    width: int,
    depth: int,
    n_features: int,
    gamma0: float,
    activation: str,
    seed: int,
    use_bias: bool = False,
) -> NetworkSnapshot:
    """Unit-variance Gaussian initialization of all trainable tensors."""
    rng = np.random.default_rng(seed)
    weights = [rng.standard_normal((width, n_features))]
    for _ in range(depth - 1):
        weights.append(rng.standard_normal((width, width)))
    weights.append(rng.standard_normal(width))
    biases = [rng.standard_normal(width) for _ in range(depth)] if use_bias else None
    return NetworkSnapshot(width, depth, gamma0, activation, weights, biases)


def _forward(net: NetworkSnapshot, x: np.ndarray):
    """Returns (f, [h^1..h^L], [phi(h^1)..phi(h^L)], [dphi^1..dphi^L])."""
    n = net.width
    hs, phis, dphis = [], [], []
    h = x @ net.weights[0].T / np.sqrt(x.shape[1])
    if net.biases is not None:
        h = h + net.biases[0]
    for ell in range(net.depth):
        if ell > 0:
            h = phis[-1] @ net.weights[ell].T / np.sqrt(n)
            if net.biases is not None:
                h = h + net.biases[ell]
        hs.append(h)
        phi, dphi, _ = activation_values(net.activation, h)
        phis.append(phi)
        dphis.append(dphi)
    f = phis[-1] @ net.weights[-1] / (net.gamma * np.sqrt(n))
    return f, hs, phis, dphis


def _backward(net: NetworkSnapshot, phis, dphis):
    """Backprop fields g^l = gamma sqrt(N) df/dh^l, per sample; O(1) entries."""
    n = net.width
    gs = [None] * net.depth
    g = dphis[-1] * net.weights[-1][None, :]  # g^L
    gs[-1] = g
    for ell in range(net.depth - 2, -1, -1):
        g = dphis[ell] * (gs[ell + 1] @ net.weights[ell + 1] / np.sqrt(n))
        gs[ell] = g
    return gs


def train(
    net: NetworkSnapshot,
    x: np.ndarray,
    y: np.ndarray,
    grid: TimeGrid,
    eta0: float,
    x_test: np.ndarray | None = None,
    lambda_wd: float = 0.0,
) -> TrainLog:
    """Full-batch gradient descent logged on the time grid.

    One step at learning rate eta0*gamma^2 advances gradient-flow time by
    eta0, so the checkpoint stride is dt/eta0 (must be integral).  The
    loss is 0.5 * sum_mu (f_mu - y_mu)^2 over training samples; with
    ``lambda_wd`` the update includes parameter decay -lambda*theta per
    unit time.  Test inputs are forwarded for logging only.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape[0] != y.size:
        raise DimensionMismatch(f"{x.shape[0]} inputs vs {y.size} targets")
    stride_f = grid.dt / eta0
    stride = int(round(stride_f))
    if stride < 1 or abs(stride_f - stride) > 1e-9:
        raise ValueError(f"dt/eta0 = {stride_f} must be a positive integer checkpoint stride")
    x_all = x if x_test is None else np.vstack([x, np.asarray(x_test, dtype=np.float64)])
    p = y.size

    gamma_sq = net.gamma**2
    n = net.width
    sqrt_n = np.sqrt(n)
    sqrt_d = np.sqrt(x.shape[1])

    t_steps = grid.n_steps
    loss = np.empty(t_steps)
    f_log = np.empty((x_all.shape[0], t_steps))
    phi_log: list[list[np.ndarray]] = []
    g_log: list[list[np.ndarray]] = []

    for k in range(t_steps):
        f_all, hs, phis, dphis = _forward(net, x_all)
        gs = _backward(net, phis, dphis)
        if not np.all(np.isfinite(f_all)):
            raise NonFiniteValue(f"training diverged at checkpoint {k}; lower eta0")
        loss[k] = 0.5 * float(np.sum((f_all[:p] - y) ** 2))
        f_log[:, k] = f_all
        phi_log.append([phi.copy() for phi in phis])
        g_log.append([g.copy() for g in gs])
        if k + 1 == t_steps:
            break
        for _ in range(stride):
            f_tr, _, phis, dphis = _forward(net, x)
            gs = _backward(net, phis, dphis)
            delta = y - f_tr  # = -dL/df
            # Update theta <- (1 - eta0*lambda) theta - eta0*gamma^2 grad L;
            # with f = w phi/(gamma sqrt(N)) the per-layer gradients reduce
            # to outer products of the backprop fields and the activations.
            scale = eta0 * net.gamma / sqrt_n
            grads = [(delta[:, None] * gs[0]).T @ x / sqrt_d]
            for ell in range(1, net.depth):
                grads.append((delta[:, None] * gs[ell]).T @ phis[ell - 1] / sqrt_n)
            grads.append(delta @ phis[-1])
            bias_grads = None
            if net.biases is not None:
                bias_grads = [delta @ gs[ell] for ell in range(net.depth)]
            if lambda_wd > 0.0:
                for w in net.weights:
                    w *= 1.0 - eta0 * lambda_wd
                if net.biases is not None:
                    for b_ in net.biases:
                        b_ *= 1.0 - eta0 * lambda_wd
            for ell in range(net.depth + 1):
                net.weights[ell] += scale * grads[ell]
            if net.biases is not None:
                for ell in range(net.depth):
                    net.biases[ell] += scale * bias_grads[ell]
    return TrainLog(
        grid=grid,
        eta0=eta0,
        loss=loss,
        f=f_log,
        phi_log=phi_log,
        g_log=g_log,
        meta={
            "width": net.width,
            "depth": net.depth,
            "gamma0": net.gamma0,
            "activation": net.activation,
            "stride": stride,
            "lambda_wd": lambda_wd,
            "time_alignment": "one GD step at lr eta0*gamma^2 advances t by eta0",
        },
    )


def measure_kernels(log: TrainLog) -> dict:
    """Empirical two-time kernels from the logged fields.

    Returns per-layer lists of Kernels ``phi`` (features) and ``g``
    (gradients) over all logged samples, plus the assembled empirical
    NTK requiring the input gram: call ``ntk_assemble`` with them.
    """
    t = log.grid.n_steps
    if len(log.phi_log) != t:
        raise MissingCheckpoint(f"log has {len(log.phi_log)} checkpoints, grid wants {t}")
    depth = len(log.phi_log[0])
    n = log.phi_log[0][0].shape[1]
    p = log.phi_log[0][0].shape[0]
    samples = np.arange(p)
    phi_kernels, g_kernels = [], []
    for ell in range(depth):
        phi_flat = np.stack([log.phi_log[k][ell] for k in range(t)], axis=1).reshape(p * t, n)
        g_flat = np.stack([log.g_log[k][ell] for k in range(t)], axis=1).reshape(p * t, n)
        phi_kernels.append(
            Kernel(phi_flat @ phi_flat.T / n, samples, samples, log.grid, f"phi_emp_{ell + 1}")
        )
        g_kernels.append(
            Kernel(g_flat @ g_flat.T / n, samples, samples, log.grid, f"g_emp_{ell + 1}")
        )
    return {"phi": phi_kernels, "g": g_kernels}


def param_space_ntk(net: NetworkSnapshot, x: np.ndarray) -> np.ndarray:
    """gamma^2 * grad_theta f . grad_theta f via explicit per-layer gradients.

    Materializes each layer's parameter gradient per sample and
    accumulates Frobenius inner products; an oracle for the kernel-space
    assembly, independent of the logged-kernel path.
    """
    x = np.asarray(x, dtype=np.float64)
    p = x.shape[0]
    n = net.width
    _, hs, phis, dphis = _forward(net, x)
    gs = _backward(net, phis, dphis)
    out = np.zeros((p, p))
    gamma = net.gamma
    # df/dW^l_{ij} = [g^{l+1}_i/(gamma sqrt(N))] * [phi^l_j/sqrt(N)] (x/sqrt(D) at l=0)
    inputs = [x / np.sqrt(x.shape[1])] + [phis[ell] / np.sqrt(n) for ell in range(net.depth - 1)]
    outs = [gs[ell] / (gamma * np.sqrt(n)) for ell in range(net.depth)]
    for a, b in zip(outs, inputs):
        for mu in range(p):
            grad_mu = np.outer(a[mu], b[mu])
            for nu in range(mu + 1):
                val = float(np.vdot(grad_mu, np.outer(a[nu], b[nu])))
                out[mu, nu] += val
                if nu != mu:
                    out[nu, mu] += val
    # readout: df/dw_i = phi^L_i / (gamma sqrt(N))
    read = phis[-1] / (gamma * np.sqrt(n))
    out += read @ read.T
    if net.biases is not None:
        for ell in range(net.depth):
            gb = gs[ell] / gamma
            out += gb @ gb.T
    return gamma**2 * out
