"""Config-driven experiment runner.

One JSON config describes one experiment: data (synthetic or CSV), the
time grid, the solver mode and its parameters, and the output directory.
Artifacts are deterministic for a fixed config+seed: kernels in the
shared ``.kern`` format, ``loss.csv``/``preds.csv`` tables, and a
``report.json`` echoing the config with convergence diagnostics (and
alignment/residual summaries for the compare modes).

Exit codes: 0 success, 2 solver flagged non-convergence, 1 error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .approx import gradient_independence_solve, perturbative_linear_ntk, static_kernels
from .errors import ConfigError, KernelFlowError, MalformedCsv, NonPsdGram
from .grids import SampleSet, TimeGrid
from .kernels import Kernel, alignment, save_kernel
from .linear import LinearConfig, linear_solve, two_layer_general, two_layer_whitened
from .ntk import integrate_predictions
from .refnet import init_network, measure_kernels, train
from .saddle import DmftConfig, dmft_solve

MODES = ("dmft", "linear", "two-layer", "static", "grad-indep", "perturb", "nn-train", "compare")


# ----------------------------------------------------------------- data


def _read_csv_matrix(path: Path) -> np.ndarray:
    try:
        data = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    except (ValueError, OSError) as exc:
        raise MalformedCsv(f"{path}: {exc}") from exc
    return data


def _whiten(x: np.ndarray) -> np.ndarray:
    """Rotate/scale inputs so the gram X X^T / D becomes the identity."""
    p, d = x.shape
    if p > d:
        raise ConfigError(f"whitening needs n_features >= n_samples, got {p} > {d}")
    gram = x @ x.T / d
    evals, evecs = np.linalg.eigh(gram)
    if evals.min() <= 1e-12 * evals.max():
        raise ConfigError("whitening needs a full-rank input gram")
    inv_sqrt = evecs @ np.diag(evals**-0.5) @ evecs.T
    return inv_sqrt @ x


def load_data(spec: dict, base_dir: Path) -> SampleSet:
    """Build a SampleSet from a config data block.

    Synthetic: isotropic Gaussian inputs with a linear, sign, or explicit
    target rule.  CSV: rows are samples, columns features; the targets
    file holds one value per training sample.  ``whiten`` post-processes
    the inputs so the train gram is the identity.
    """
    kind = spec.get("kind", "synthetic")
    n_test = int(spec.get("n_test", 0))
    if kind == "synthetic":
        p = int(spec["P"])
        d = int(spec["D"])
        rng = np.random.default_rng(int(spec.get("seed", 0)))
        x = rng.standard_normal((p + n_test, d))
        if spec.get("whiten", False):
            x = _whiten(x)
        teacher = spec.get("teacher", "linear")
        if isinstance(teacher, dict) and "y" in teacher:
            y = np.asarray(teacher["y"], dtype=np.float64)
            if y.size != p:
                raise ConfigError(f"explicit y has {y.size} entries, expected {p}")
        elif teacher == "linear":
            beta = rng.standard_normal(d)
            y = x[:p] @ beta / np.sqrt(d)
        elif teacher == "sign":
            beta = rng.standard_normal(d)
            y = np.sign(x[:p] @ beta / np.sqrt(d))
        else:
            raise ConfigError(f"unknown teacher rule {teacher!r}")
        return SampleSet.from_inputs(x[:p], y, x[p:] if n_test else None)
    if kind == "csv":
        x = _read_csv_matrix(base_dir / spec["inputs"])
        y = _read_csv_matrix(base_dir / spec["targets"]).ravel()
        if spec.get("gram", False):
            if x.shape[0] != x.shape[1]:
                raise NonPsdGram("precomputed gram must be square")
            p = x.shape[0] - n_test
            return SampleSet(p, n_test, x, y[:p])
        p = x.shape[0] - n_test
        if p < 1:
            raise ConfigError("n_test leaves no training samples")
        if y.size != p:
            raise MalformedCsv(f"targets file has {y.size} values, expected {p}")
        if spec.get("whiten", False):
            x = _whiten(x)
        return SampleSet.from_inputs(x[:p], y, x[p:] if n_test else None)
    raise ConfigError(f"unknown data kind {kind!r}")


# ----------------------------------------------------------------- config


def _require(cfg: dict, key: str, mode: str):
    if key not in cfg:
        raise ConfigError(f"mode '{mode}' requires config key '{key}'")
    return cfg[key]


def validate_config(cfg: dict) -> dict:
    mode = _require(cfg, "mode", "<any>")
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    if mode != "two-layer" or "data" in cfg:
        if mode in {"dmft", "linear", "static", "grad-indep", "perturb", "nn-train", "compare"}:
            _require(cfg, "data", mode)
    if mode != "static":
        _require(cfg, "grid", mode)
    if mode in {"dmft", "linear", "grad-indep", "static", "perturb"}:
        _require(cfg, "solver", mode)
    if mode in {"nn-train"}:
        _require(cfg, "solver", mode)
        _require(cfg, "nn", mode)
    if mode == "compare":
        _require(cfg, "compare", mode)
    if mode == "two-layer":
        solver = _require(cfg, "solver", mode)
        if "data" not in cfg and "y_norm" not in solver:
            raise ConfigError("two-layer mode needs either data or solver.y_norm")
    return cfg


def _grid(cfg: dict) -> TimeGrid:
    g = cfg["grid"]
    return TimeGrid(int(g["T"]), float(g["dt"]))


def _dmft_config(cfg: dict, seed_override=None) -> DmftConfig:
    s = dict(cfg["solver"])
    if seed_override is not None:
        s["seed"] = seed_override
    allowed = {
        "depth", "gamma0", "activation", "n_mc", "beta", "tol", "max_iters",
        "seed", "lambda_wd", "use_bias", "fresh_draws", "loss",
    }
    unknown = set(s) - allowed - {"y_norm"}
    if unknown:
        raise ConfigError(f"unknown solver keys: {sorted(unknown)}")
    s.pop("y_norm", None)
    try:
        return DmftConfig(**s)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


# ----------------------------------------------------------------- artifacts


def _write_csv(path: Path, header: list[str], columns: list[np.ndarray]):
    rows = len(columns[0])
    with path.open("w") as fh:
        fh.write(",".join(header) + "\n")
        for i in range(rows):
            fh.write(",".join(f"{col[i]:.17g}" for col in columns) + "\n")


def _save_state_kernels(state, out: Path, prefix: str = ""):
    files = []
    for kern in state.phis + state.gs + state.a_kernels + state.b_kernels:
        name = f"{prefix}{kern.name}.kern"
        save_kernel(kern, out / name)
        files.append(name)
    return files


def _loss_preds_files(out: Path, grid: TimeGrid, f: np.ndarray, loss: np.ndarray):
    times = grid.times
    steps = np.arange(grid.n_steps, dtype=np.float64)
    _write_csv(out / "loss.csv", ["step", "t", "loss"], [steps, times, loss])
    cols = [times] + [f[i] for i in range(f.shape[0])]
    _write_csv(out / "preds.csv", ["t"] + [f"f_{i}" for i in range(f.shape[0])], cols)
    return ["loss.csv", "preds.csv"]


# ----------------------------------------------------------------- modes


def _run_dmft(cfg, data, grid, out, threads, pin_response=False):
    solver_cfg = _dmft_config(cfg)
    solve = gradient_independence_solve if pin_response else dmft_solve
    with (out / "diagnostics.jsonl").open("w") as diag:
        state = solve(solver_cfg, data, grid, threads=threads, diag_stream=diag)
    files = _save_state_kernels(state, out)
    files += _loss_preds_files(out, grid, state.f.values, state.loss_curve())
    report = {
        "converged": state.converged,
        "iterations": state.iterations,
        "final_loss": float(state.loss_curve()[-1]),
        "max_change": state.diagnostics[-1]["max_change"] if state.diagnostics else 0.0,
    }
    return report, files, 0 if state.converged else 2


def _run_linear(cfg, data, grid, out):
    s = dict(cfg["solver"])
    lin_cfg = LinearConfig(
        depth=int(s["depth"]),
        gamma0=float(s["gamma0"]),
        beta=float(s.get("beta", 0.6)),
        tol=float(s.get("tol", 1e-10)),
        max_iters=int(s.get("max_iters", 200)),
        pin_response=bool(s.get("pin_response", False)),
    )
    state = linear_solve(lin_cfg, data, grid)
    files = []
    samples = np.arange(data.n_total)
    for ell in range(1, state.depth + 1):
        k = Kernel(state.h[ell], samples, samples, grid, f"h_{ell}")
        save_kernel(k, out / f"h_{ell}.kern")
        files.append(f"h_{ell}.kern")
        gk = Kernel(
            state.g_expanded(ell, data.n_total), samples, samples, grid, f"g_{ell}"
        )
        save_kernel(gk, out / f"g_{ell}.kern")
        files.append(f"g_{ell}.kern")
    # equal-time H diagonals for kernel-trajectory plots
    t = grid.n_steps
    for ell in range(1, state.depth + 1):
        diag_tr = np.trace(state.equal_time_h(ell), axis1=1, axis2=2)
        _write_csv(out / f"h_{ell}_diag.csv", ["t", "trace"], [grid.times, diag_tr])
        files.append(f"h_{ell}_diag.csv")
    files += _loss_preds_files(out, grid, state.f.values, state.loss_curve())
    report = {
        "converged": state.converged,
        "iterations": state.iterations,
        "final_loss": float(state.loss_curve()[-1]),
    }
    return report, files, 0 if state.converged else 2


def _run_two_layer(cfg, data, grid, out):
    s = cfg["solver"]
    gamma0 = float(s["gamma0"])
    if data is not None:
        y = data.targets
        res = two_layer_general(gamma0, data.train_gram, y, grid)
        loss = 0.5 * np.sum(res["delta"] ** 2, axis=0)
        f = y[:, None] - res["delta"]
        files = _loss_preds_files(out, grid, f, loss)
        _write_csv(out / "g_scalar.csv", ["t", "g"], [grid.times, res["g"]])
        files.append("g_scalar.csv")
        report = {"final_loss": float(loss[-1])}
    else:
        y_norm = float(s["y_norm"])
        res = two_layer_whitened(gamma0, y_norm, grid)
        loss = 0.5 * res["delta"] ** 2
        f = (y_norm - res["delta"])[None, :]
        files = _loss_preds_files(out, grid, f, loss)
        _write_csv(
            out / "kernel_scalar.csv",
            ["t", "h_y", "conservation"],
            [grid.times, res["h_y"], res["conservation"]],
        )
        files.append("kernel_scalar.csv")
        report = {
            "final_loss": float(loss[-1]),
            "h_y_final": float(res["h_y"][-1]),
            "h_y_final_predicted": res["h_y_final_predicted"],
            "conservation_max_dev": float(np.abs(res["conservation"] - 1.0).max()),
        }
    return report, files, 0


def _run_static(cfg, data, out):
    s = cfg["solver"]
    stat = static_kernels(
        s.get("activation", "tanh"),
        data.input_gram,
        int(s["depth"]),
        n_quad=int(s.get("n_quad", 40)),
        bias=bool(s.get("use_bias", False)),
    )
    grid1 = TimeGrid(1, 1.0)
    samples = np.arange(data.n_total)
    files = []
    for ell in range(1, stat.depth + 1):
        for tag, mat in (("phi0", stat.phi[ell]), ("g0", stat.g[ell])):
            k = Kernel(mat, samples, samples, grid1, f"{tag}_{ell}")
            save_kernel(k, out / f"{tag}_{ell}.kern")
            files.append(f"{tag}_{ell}.kern")
    save_kernel(Kernel(stat.ntk0, samples, samples, grid1, "ntk0"), out / "ntk0.kern")
    files.append("ntk0.kern")
    return {"depth": stat.depth}, files, 0


def _run_perturb(cfg, data, grid, out):
    s = cfg["solver"]
    res = perturbative_linear_ntk(
        data.train_gram, data.targets, grid, float(s["gamma0"]), int(s["depth"])
    )
    save_kernel(res["ntk"], out / "ntk_perturb.kern")
    return {"gamma0": float(s["gamma0"])}, ["ntk_perturb.kern"], 0


def _run_nn_train(cfg, data, grid, out, base_dir):
    s = cfg["solver"]
    nn = cfg["nn"]
    p = data.n_train
    # regenerate the raw inputs the gram was built from
    x_all = _regenerate_inputs(cfg["data"], data, base_dir)
    net = init_network(
        int(nn["width"]),
        int(s["depth"]),
        x_all.shape[1],
        float(s["gamma0"]),
        s.get("activation", "tanh"),
        int(nn.get("seed", 0)),
        use_bias=bool(s.get("use_bias", False)),
    )
    log = train(
        net,
        x_all[:p],
        data.targets,
        grid,
        float(nn.get("eta0", grid.dt)),
        x_test=x_all[p:] if data.n_test else None,
        lambda_wd=float(s.get("lambda_wd", 0.0)),
    )
    kernels = measure_kernels(log)
    files = []
    for kern in kernels["phi"] + kernels["g"]:
        save_kernel(kern, out / f"{kern.name}.kern")
        files.append(f"{kern.name}.kern")
    files += _loss_preds_files(out, grid, log.f, log.loss)
    return {"final_loss": float(log.loss[-1]), "width": net.width}, files, 0


def _regenerate_inputs(spec: dict, data: SampleSet, base_dir: Path) -> np.ndarray:
    """Raw inputs for trainers that need X, matching load_data exactly."""
    if spec.get("kind", "synthetic") == "synthetic":
        rng = np.random.default_rng(int(spec.get("seed", 0)))
        x = rng.standard_normal((data.n_total, int(spec["D"])))
        if spec.get("whiten", False):
            x = _whiten(x)
        return x
    if spec.get("gram", False):
        raise ConfigError("nn-train needs raw inputs, not a precomputed gram")
    x = _read_csv_matrix(base_dir / spec["inputs"])
    if spec.get("whiten", False):
        x = _whiten(x)
    return x


def _run_compare(cfg, data, grid, out, base_dir, threads):
    kind = cfg["compare"].get("kind")
    if kind == "dmft-vs-nn":
        report, files, status = _compare_dmft_nn(cfg, data, grid, out, base_dir, threads)
    elif kind == "perturb-vs-linear":
        report, files, status = _compare_perturb_linear(cfg, data, grid, out)
    else:
        raise ConfigError(f"unknown compare kind {kind!r}")
    return report, files, status


def _compare_dmft_nn(cfg, data, grid, out, base_dir, threads):
    solver_cfg = _dmft_config(cfg)
    state = dmft_solve(solver_cfg, data, grid, threads=threads)
    x_all = _regenerate_inputs(cfg["data"], data, base_dir)
    nn = cfg["nn"]
    net = init_network(
        int(nn["width"]),
        solver_cfg.depth,
        x_all.shape[1],
        solver_cfg.gamma0,
        solver_cfg.activation,
        int(nn.get("seed", 0)),
        use_bias=solver_cfg.use_bias,
    )
    log = train(
        net,
        x_all[: data.n_train],
        data.targets,
        grid,
        float(nn.get("eta0", grid.dt)),
        x_test=x_all[data.n_train :] if data.n_test else None,
        lambda_wd=solver_cfg.lambda_wd,
    )
    emp = measure_kernels(log)
    align_phi = [
        alignment(state.phis[ell], emp["phi"][ell]) for ell in range(solver_cfg.depth)
    ]
    align_g = [alignment(state.gs[ell], emp["g"][ell]) for ell in range(solver_cfg.depth)]
    dmft_loss = state.loss_curve()
    files = _save_state_kernels(state, out, prefix="dmft_")
    for kern in emp["phi"] + emp["g"]:
        save_kernel(kern, out / f"nn_{kern.name}.kern")
        files.append(f"nn_{kern.name}.kern")
    _write_csv(
        out / "loss.csv",
        ["step", "t", "loss_dmft", "loss_nn"],
        [np.arange(grid.n_steps, dtype=float), grid.times, dmft_loss, log.loss],
    )
    files.append("loss.csv")
    report = {
        "alignment_phi": align_phi,
        "alignment_g": align_g,
        "loss_gap_final": float(abs(dmft_loss[-1] - log.loss[-1]) / max(log.loss[-1], 1e-12)),
        "dmft_converged": state.converged,
        "dmft_iterations": state.iterations,
    }
    return report, files, 0 if state.converged else 2


def _compare_perturb_linear(cfg, data, grid, out):
    s = cfg["solver"]
    depth = int(s["depth"])
    sweep = cfg["compare"].get("gamma0_sweep", [0.05, 0.1, 0.2])
    residuals = {}
    for g0 in sweep:
        lin = linear_solve(
            LinearConfig(depth=depth, gamma0=float(g0), tol=float(s.get("tol", 1e-10))),
            data,
            grid,
        )
        pert = perturbative_linear_ntk(data.train_gram, data.targets, grid, float(g0), depth)
        k_full = _linear_full_ntk(lin, data.n_total, grid)
        k_pert = pert["ntk"].values
        residuals[str(g0)] = float(
            np.linalg.norm(k_full - k_pert) / np.linalg.norm(k_full)
        )
    ratios = {}
    svals = [float(g) for g in sweep]
    for lo, hi in zip(svals, svals[1:]):
        denom = residuals[str(lo)]
        ratios[f"{hi}->{lo}"] = residuals[str(hi)] / denom if denom > 0 else float("inf")
    report = {"residuals": residuals, "ratios": ratios}
    return report, [], 0


def _linear_full_ntk(state, p: int, grid: TimeGrid) -> np.ndarray:
    """Two-time NTK sum_l G^{l+1}(t,s) H^l(t,s) from a linear solve."""
    depth = state.depth
    out = np.zeros((p * grid.n_steps, p * grid.n_steps))
    for ell in range(0, depth + 1):
        out += np.kron(np.ones((p, p)), state.g[ell + 1]) * state.h[ell]
    return out


# ----------------------------------------------------------------- driver


def run(config: dict, base_dir: Path, out_dir: Path | None, threads: int, dry_run: bool = False) -> int:
    validate_config(config)
    if dry_run:
        if "data" in config:
            load_data(config["data"], base_dir)
        print("config ok")
        return 0
    mode = config["mode"]
    out = Path(out_dir) if out_dir else base_dir / config.get("out", "out")
    out.mkdir(parents=True, exist_ok=True)
    data = load_data(config["data"], base_dir) if "data" in config else None
    grid = _grid(config) if "grid" in config else None

    if mode == "dmft":
        report, files, status = _run_dmft(config, data, grid, out, threads)
    elif mode == "grad-indep":
        report, files, status = _run_dmft(config, data, grid, out, threads, pin_response=True)
    elif mode == "linear":
        report, files, status = _run_linear(config, data, grid, out)
    elif mode == "two-layer":
        report, files, status = _run_two_layer(config, data, grid, out)
    elif mode == "static":
        report, files, status = _run_static(config, data, out)
    elif mode == "perturb":
        report, files, status = _run_perturb(config, data, grid, out)
    elif mode == "nn-train":
        report, files, status = _run_nn_train(config, data, grid, out, base_dir)
    elif mode == "compare":
        report, files, status = _run_compare(config, data, grid, out, base_dir, threads)
    else:  # pragma: no cover - validate_config guards
        raise ConfigError(mode)

    canonical = json.dumps(config, sort_keys=True)
    full_report = {
        "version": __version__,
        "config": config,
        "config_hash": hashlib.sha256(canonical.encode()).hexdigest(),
        "mode": mode,
        "seeds": {
            "data": config.get("data", {}).get("seed"),
            "solver": config.get("solver", {}).get("seed"),
            "nn": config.get("nn", {}).get("seed"),
        },
        "artifacts": sorted(files),
        "result": report,
    }
    with (out / "report.json").open("w") as fh:
        json.dump(full_report, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return status


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="kernelflow", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    solve = sub.add_parser("solve", help="run one experiment from a JSON config")
    solve.add_argument("--config", required=True, help="path to the experiment JSON")
    solve.add_argument("--out", default=None, help="output directory (default: config 'out')")
    solve.add_argument("--seed", type=int, default=None, help="override solver seed")
    solve.add_argument(
        "--threads",
        type=int,
        default=None,
        help="worker threads for Monte-Carlo chunks (env KERNELFLOW_THREADS)",
    )
    solve.add_argument("--dry-run", action="store_true", help="validate the config only")
    args = parser.parse_args(argv)

    cfg_path = Path(args.config).resolve()
    try:
        with cfg_path.open() as fh:
            config = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return 1
    if args.seed is not None:
        config.setdefault("solver", {})["seed"] = args.seed
    threads = args.threads
    if threads is None:
        threads = int(os.environ.get("KERNELFLOW_THREADS", "1"))
    try:
        return run(config, cfg_path.parent, args.out, threads, dry_run=args.dry_run)
    except KernelFlowError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
