import numpy as np
import pytest
from scipy.integrate import quad

from kernelflow.approx import (
    perturbation_functions,
    perturbative_linear_ntk,
    gradient_independence_solve,
    static_kernels,
)
from kernelflow.grids import SampleSet, TimeGrid
from kernelflow.kernels import alignment
from kernelflow.linear import LinearConfig, linear_solve
from kernelflow.ntk import ntk_assemble
from kernelflow.saddle import DmftConfig, dmft_solve

from conftest import random_psd


class TestStaticKernels:
    def test_linear_exact(self, rng):
        kx = random_psd(rng, 4)
        stat = static_kernels("linear", kx, 3)
        for ell in range(1, 4):
            assert np.array_equal(stat.phi[ell], kx)
            assert np.array_equal(stat.g[ell], np.ones((4, 4)))
        assert np.allclose(stat.ntk0, 4.0 * kx, atol=1e-14)

    def test_relu_identity_gram_arc_cosine(self):
        stat = static_kernels("relu", np.eye(2), 1)
        assert stat.phi[1][0, 0] == pytest.approx(0.5, abs=1e-14)
        assert stat.phi[1][0, 1] == pytest.approx(1.0 / (2.0 * np.pi), abs=1e-14)
        # gradient moment at orthogonal inputs: (pi - pi/2) / (2 pi) = 1/4
        assert stat.g[1][0, 1] == pytest.approx(0.25, abs=1e-14)

    @pytest.mark.slow
    def test_relu_monte_carlo_oracle(self, rng):
        kx = np.array([[1.3, -0.4], [-0.4, 0.8]])
        stat = static_kernels("relu", kx, 1)
        n = 10_000_000
        ell = np.linalg.cholesky(kx)
        draws = rng.standard_normal((n, 2)) @ ell.T
        relu = np.maximum(draws, 0.0)
        mc = relu.T @ relu / n
        assert np.abs(stat.phi[1] - mc).max() < 5.0 * np.abs(kx).max() / np.sqrt(n) * 3

    def test_tanh_diagonal_quadrature_oracle(self, rng):
        kx = random_psd(rng, 3) + 0.2 * np.eye(3)
        stat = static_kernels("tanh", kx, 1)
        for i in range(3):
            v = kx[i, i]
            exact = quad(
                lambda u: np.tanh(np.sqrt(v) * u) ** 2 * np.exp(-(u**2) / 2) / np.sqrt(2 * np.pi),
                -12, 12, epsabs=1e-13,
            )[0]
            assert abs(stat.phi[1][i, i] - exact) < 1e-8

    def test_tanh_offdiagonal_mc_oracle(self):
        kx = np.array([[1.0, 0.6], [0.6, 1.5]])
        stat = static_kernels("tanh", kx, 2)
        rng = np.random.default_rng(0)
        ell = np.linalg.cholesky(stat.phi[1])
        draws = rng.standard_normal((2_000_000, 2)) @ ell.T
        th = np.tanh(draws)
        mc = th.T @ th / draws.shape[0]
        assert np.abs(stat.phi[2] - mc).max() < 3e-3

    def test_idempotent_and_deterministic(self, rng):
        kx = random_psd(rng, 3)
        a = static_kernels("tanh", kx, 2)
        b = static_kernels("tanh", kx, 2)
        for ell in range(1, 3):
            assert np.array_equal(a.phi[ell], b.phi[ell])
            assert np.array_equal(a.g[ell], b.g[ell])

    def test_degenerate_variance_deterministic(self):
        kx = np.diag([1.0, 0.0])
        stat = static_kernels("tanh", kx, 1)
        assert stat.phi[1][1, 1] == 0.0
        assert stat.phi[1][0, 1] == 0.0

    def test_bias_adds_one_to_input_covariance(self, rng):
        kx = random_psd(rng, 3)
        stat = static_kernels("linear", kx, 2, bias=True)
        assert np.allclose(stat.phi[1], kx + 1.0, atol=1e-14)
        assert np.allclose(stat.phi[2], kx + 2.0, atol=1e-14)


class TestGradientIndependence:
    def test_lazy_limit_identical_to_static(self, small_data):
        grid = TimeGrid(4, 0.2)
        cfg = DmftConfig(depth=2, gamma0=0.0, activation="tanh", n_mc=20, seed=0)
        state = gradient_independence_solve(cfg, small_data, grid)
        stat = static_kernels("tanh", small_data.input_gram, 2)
        for ell in range(2):
            expected = np.kron(stat.phi[ell + 1], np.ones((4, 4)))
            assert np.abs(state.phis[ell].values - expected).max() < 1e-12

    def test_depth_one_identical_to_full_solver(self, small_data):
        # no response kernels exist for one hidden layer, so the full
        # solver and the ansatz coincide bit-for-bit under shared seeds
        grid = TimeGrid(4, 0.25)
        cfg = DmftConfig(depth=1, gamma0=1.2, activation="tanh", n_mc=80,
                         tol=1e-4, max_iters=8, seed=7)
        full = dmft_solve(cfg, small_data, grid)
        gi = gradient_independence_solve(cfg, small_data, grid)
        assert np.array_equal(full.phis[0].values, gi.phis[0].values)
        assert np.array_equal(full.gs[0].values, gi.gs[0].values)

    def test_responses_pinned_to_zero(self, small_data):
        grid = TimeGrid(4, 0.25)
        cfg = DmftConfig(depth=3, gamma0=1.0, activation="tanh", n_mc=40,
                         tol=1e-2, max_iters=3, seed=2)
        state = gradient_independence_solve(cfg, small_data, grid)
        for kern in state.a_kernels + state.b_kernels:
            assert np.all(kern.values == 0.0)


class TestPerturbativeLinear:
    def test_gamma0_zero_is_lazy_ntk(self, rng):
        kx = random_psd(rng, 3)
        y = rng.standard_normal(3)
        grid = TimeGrid(6, 0.1)
        res = perturbative_linear_ntk(kx, y, grid, 0.0, 2)
        assert np.allclose(res["ntk"].values, np.kron(3.0 * kx, np.ones((6, 6))), atol=1e-12)

    def test_correction_vanishes_at_time_zero(self, rng):
        kx = random_psd(rng, 2)
        y = rng.standard_normal(2)
        grid = TimeGrid(8, 0.2)
        res = perturbative_linear_ntk(kx, y, grid, 0.7, 3)
        blocks = res["ntk"].as_blocks()
        assert np.abs(blocks[:, 0, :, 0] - 4.0 * kx).max() < 1e-12

    def test_layer_scaling_of_corrections(self, rng):
        kx = random_psd(rng, 2)
        y = rng.standard_normal(2)
        grid = TimeGrid(6, 0.2)
        res = perturbative_linear_ntk(kx, y, grid, 0.5, 4)
        h2, g2 = res["h2"], res["g2"]
        for ell in range(2, 5):
            assert np.allclose(h2[ell], ell * h2[1], atol=1e-12)
            assert np.allclose(g2[ell], (5 - ell) / 4.0 * g2[1], atol=1e-12)

    def test_perturbation_functions_initial_conditions(self, rng):
        kx = random_psd(rng, 3)
        y = rng.standard_normal(3)
        grid = TimeGrid(9, 0.15)
        funcs = perturbation_functions(kx, y, grid, 2)
        assert np.all(funcs.v[:, 0] == 0.0)
        assert np.all(funcs.vv[:, :, 0] == 0.0)
        # dv/dt = Delta^0 (check first finite difference against average)
        fd = (funcs.v[:, 1] - funcs.v[:, 0]) / grid.dt
        mid = 0.5 * (funcs.delta0[:, 0] + funcs.delta0[:, 1])
        assert np.abs(fd - mid).max() < 1e-6

    def test_relative_ntk_change_scales_with_depth(self, rng):
        kx = random_psd(rng, 2)
        y = rng.standard_normal(2)
        grid = TimeGrid(8, 0.15)
        gamma0 = 0.1
        changes = {}
        for depth in (2, 4, 8):
            res = perturbative_linear_ntk(kx, y, grid, gamma0, depth)
            base = np.kron((depth + 1.0) * kx, np.ones((8, 8)))
            changes[depth] = np.linalg.norm(res["ntk"].values - base) / np.linalg.norm(base)
        # relative change ~ gamma0^2 * L: the L-ratio of relative changes
        # equals L(L+1)/2/(L+1) = L/2 exactly up to the Delta^0 rate change
        assert changes[4] > 1.5 * changes[2]
        assert changes[8] > 1.5 * changes[4]

    def test_gamma0_squared_slope(self, rng):
        kx = random_psd(rng, 2)
        y = rng.standard_normal(2)
        grid = TimeGrid(8, 0.15)
        vals = []
        for g0 in (0.05, 0.1, 0.2):
            res = perturbative_linear_ntk(kx, y, grid, g0, 2)
            base = np.kron(3.0 * kx, np.ones((8, 8)))
            vals.append(np.linalg.norm(res["ntk"].values - base))
        assert vals[1] / vals[0] == pytest.approx(4.0, rel=1e-6)
        assert vals[2] / vals[1] == pytest.approx(4.0, rel=1e-6)

    @pytest.mark.slow
    def test_residual_against_closed_form_is_fourth_order(self, rng):
        # halving gamma0 should shrink |K_full - K_pert|/|K_full| ~16x
        x = rng.standard_normal((2, 6))
        y = rng.standard_normal(2)
        data = SampleSet.from_inputs(x, y)
        grid = TimeGrid(160, 0.0125)
        res = {}
        for g0 in (0.05, 0.1):
            lin = linear_solve(LinearConfig(depth=2, gamma0=g0, tol=1e-12, beta=0.9), data, grid)
            pert = perturbative_linear_ntk(data.train_gram, y, grid, g0, 2)
            k_full = np.zeros_like(pert["ntk"].values)
            for ell in range(0, 3):
                k_full += np.kron(np.ones((2, 2)), lin.g[ell + 1]) * lin.h[ell]
            res[g0] = np.linalg.norm(k_full - pert["ntk"].values) / np.linalg.norm(k_full)
        ratio = res[0.1] / res[0.05]
        assert 10.0 <= ratio <= 22.0
