import json
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from kernelflow.cli import load_data, main, run, validate_config
from kernelflow.errors import ConfigError, MalformedCsv
from kernelflow.kernels import load_kernel


def write_config(tmp_path, cfg, name="exp.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return path


class TestLoadData:
    def test_synthetic_orthogonal_axes_give_identity_gram(self, tmp_path):
        # x1 = e1 sqrt(D), x2 = e2 sqrt(D) -> Kx = I
        d = 4
        x = np.zeros((2, d))
        x[0, 0] = np.sqrt(d)
        x[1, 1] = np.sqrt(d)
        np.savetxt(tmp_path / "x.csv", x, delimiter=",")
        np.savetxt(tmp_path / "y.csv", np.array([1.0, -1.0]), delimiter=",")
        data = load_data({"kind": "csv", "inputs": "x.csv", "targets": "y.csv"}, tmp_path)
        assert np.allclose(data.input_gram, np.eye(2), atol=1e-14)

    def test_duplicate_rows_allowed(self, tmp_path):
        x = np.ones((2, 3))
        np.savetxt(tmp_path / "x.csv", x, delimiter=",")
        np.savetxt(tmp_path / "y.csv", np.array([1.0, 1.0]), delimiter=",")
        data = load_data({"kind": "csv", "inputs": "x.csv", "targets": "y.csv"}, tmp_path)
        assert np.allclose(data.input_gram, np.ones((2, 2)))

    def test_whitening_gives_identity_gram(self):
        data = load_data(
            {"kind": "synthetic", "P": 6, "D": 12, "seed": 3, "whiten": True}, Path(".")
        )
        p = 6
        defect = np.linalg.norm(data.input_gram - np.eye(p)) / np.sqrt(p)
        assert defect < 1e-10

    def test_explicit_target_vector(self):
        data = load_data(
            {"kind": "synthetic", "P": 2, "D": 4, "teacher": {"y": [0.5, -0.5]}}, Path(".")
        )
        assert np.array_equal(data.targets, [0.5, -0.5])

    def test_malformed_csv(self, tmp_path):
        (tmp_path / "x.csv").write_text("1,2\n3,not_a_number\n")
        np.savetxt(tmp_path / "y.csv", np.array([1.0, 2.0]), delimiter=",")
        with pytest.raises(MalformedCsv):
            load_data({"kind": "csv", "inputs": "x.csv", "targets": "y.csv"}, tmp_path)

    def test_sign_teacher(self):
        data = load_data({"kind": "synthetic", "P": 8, "D": 6, "teacher": "sign"}, Path("."))
        assert set(np.unique(data.targets)) <= {-1.0, 1.0}


class TestValidation:
    def test_unknown_mode_rejected(self):
        with pytest.raises(ConfigError):
            validate_config({"mode": "banana"})

    def test_mode_specific_requirements(self):
        with pytest.raises(ConfigError):
            validate_config({"mode": "dmft", "grid": {"T": 2, "dt": 0.1}})
        with pytest.raises(ConfigError):
            validate_config({"mode": "two-layer", "grid": {"T": 2, "dt": 0.1}, "solver": {}})

    def test_dry_run_validates_only(self, tmp_path, capsys):
        cfg = {
            "mode": "two-layer",
            "grid": {"T": 4, "dt": 0.1},
            "solver": {"gamma0": 0.0, "y_norm": 1.0},
        }
        status = run(cfg, tmp_path, None, threads=1, dry_run=True)
        assert status == 0
        assert not (tmp_path / "out").exists()


class TestRunModes:
    def test_two_layer_lazy_loss_csv(self, tmp_path):
        cfg = {
            "mode": "two-layer",
            "grid": {"T": 401, "dt": 0.005},
            "solver": {"gamma0": 0.0, "y_norm": 1.0},
            "out": "out",
        }
        status = run(cfg, tmp_path, None, threads=1)
        assert status == 0
        rows = (tmp_path / "out" / "loss.csv").read_text().strip().splitlines()[1:]
        for row in rows:
            step, t, loss = (float(v) for v in row.split(","))
            assert abs(loss - 0.5 * np.exp(-4.0 * t)) < 1e-6

    def test_static_mode_writes_kernels(self, tmp_path):
        cfg = {
            "mode": "static",
            "data": {"kind": "synthetic", "P": 3, "D": 6, "seed": 0},
            "solver": {"depth": 2, "activation": "relu"},
            "out": "out",
        }
        assert run(cfg, tmp_path, None, threads=1) == 0
        ntk = load_kernel(tmp_path / "out" / "ntk0.kern")
        assert ntk.values.shape == (3, 3)

    def test_dmft_mode_artifacts_and_report(self, tmp_path):
        cfg = {
            "mode": "dmft",
            "data": {"kind": "synthetic", "P": 2, "D": 6, "seed": 1},
            "grid": {"T": 3, "dt": 0.2},
            "solver": {"depth": 1, "gamma0": 0.5, "activation": "tanh",
                       "n_mc": 60, "tol": 1e-2, "max_iters": 6, "seed": 0},
            "out": "out",
        }
        status = run(cfg, tmp_path, None, threads=1)
        out = tmp_path / "out"
        report = json.loads((out / "report.json").read_text())
        assert status in (0, 2)
        assert report["version"]
        assert report["config"]["mode"] == "dmft"
        assert "config_hash" in report
        assert (out / "loss.csv").exists() and (out / "preds.csv").exists()
        assert (out / "diagnostics.jsonl").exists()
        kern = load_kernel(out / "phi_1.kern")
        assert kern.values.shape == (6, 6)

    def test_nonconvergence_exit_code_two(self, tmp_path):
        cfg = {
            "mode": "dmft",
            "data": {"kind": "synthetic", "P": 2, "D": 6, "seed": 1},
            "grid": {"T": 3, "dt": 0.2},
            "solver": {"depth": 2, "gamma0": 1.0, "activation": "tanh",
                       "n_mc": 50, "tol": 1e-9, "max_iters": 2, "seed": 0},
            "out": "out",
        }
        assert run(cfg, tmp_path, None, threads=1) == 2

    def test_perturb_mode(self, tmp_path):
        cfg = {
            "mode": "perturb",
            "data": {"kind": "synthetic", "P": 2, "D": 5, "seed": 2},
            "grid": {"T": 4, "dt": 0.1},
            "solver": {"depth": 2, "gamma0": 0.1},
            "out": "out",
        }
        assert run(cfg, tmp_path, None, threads=1) == 0
        kern = load_kernel(tmp_path / "out" / "ntk_perturb.kern")
        assert kern.meta["scheme"].startswith("perturbative")

    def test_linear_mode(self, tmp_path):
        cfg = {
            "mode": "linear",
            "data": {"kind": "synthetic", "P": 2, "D": 5, "seed": 2},
            "grid": {"T": 4, "dt": 0.1},
            "solver": {"depth": 2, "gamma0": 0.5},
            "out": "out",
        }
        assert run(cfg, tmp_path, None, threads=1) == 0
        assert (tmp_path / "out" / "h_1.kern").exists()
        assert (tmp_path / "out" / "h_2_diag.csv").exists()

    def test_nn_train_mode(self, tmp_path):
        cfg = {
            "mode": "nn-train",
            "data": {"kind": "synthetic", "P": 3, "D": 6, "seed": 4},
            "grid": {"T": 3, "dt": 0.1},
            "solver": {"depth": 1, "gamma0": 1.0, "activation": "tanh"},
            "nn": {"width": 64, "eta0": 0.1, "seed": 0},
            "out": "out",
        }
        assert run(cfg, tmp_path, None, threads=1) == 0
        assert (tmp_path / "out" / "phi_emp_1.kern").exists()

    def test_reruns_byte_identical(self, tmp_path):
        cfg = {
            "mode": "dmft",
            "data": {"kind": "synthetic", "P": 2, "D": 6, "seed": 1},
            "grid": {"T": 3, "dt": 0.2},
            "solver": {"depth": 1, "gamma0": 0.8, "activation": "tanh",
                       "n_mc": 40, "tol": 1e-2, "max_iters": 4, "seed": 0},
        }
        run(cfg, tmp_path, tmp_path / "a", threads=1)
        run(cfg, tmp_path, tmp_path / "b", threads=1)
        for name in ("report.json", "loss.csv", "preds.csv", "phi_1.kern", "g_1.kern"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


class TestCommandLine:
    def test_entry_point_solve_and_dry_run(self, tmp_path):
        cfg_path = write_config(tmp_path, {
            "mode": "two-layer",
            "grid": {"T": 4, "dt": 0.1},
            "solver": {"gamma0": 1.0, "y_norm": 1.0},
            "out": "out",
        })
        assert main(["solve", "--config", str(cfg_path), "--dry-run"]) == 0
        assert main(["solve", "--config", str(cfg_path)]) == 0
        assert (tmp_path / "out" / "report.json").exists()

    def test_bad_config_returns_one(self, tmp_path):
        cfg_path = write_config(tmp_path, {"mode": "nope"})
        assert main(["solve", "--config", str(cfg_path)]) == 1

    def test_missing_file_returns_one(self, tmp_path):
        assert main(["solve", "--config", str(tmp_path / "absent.json")]) == 1

    def test_seed_override(self, tmp_path):
        cfg_path = write_config(tmp_path, {
            "mode": "dmft",
            "data": {"kind": "synthetic", "P": 2, "D": 5, "seed": 0},
            "grid": {"T": 2, "dt": 0.2},
            "solver": {"depth": 1, "gamma0": 0.4, "activation": "tanh",
                       "n_mc": 30, "tol": 1e-2, "max_iters": 2, "seed": 0},
            "out": "out",
        })
        main(["solve", "--config", str(cfg_path), "--seed", "7"])
        report = json.loads((tmp_path / "out" / "report.json").read_text())
        assert report["config"]["solver"]["seed"] == 7
