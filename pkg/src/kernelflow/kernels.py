"""Dense two-time kernel containers, the alignment metric, and kernel files.

A kernel K_{mu alpha}(t, s) is stored as a dense (P'*T) x (P''*T) float64
matrix whose rows/columns use the sample-major flattened index of
:mod:`kernelflow.grids`.  The on-disk format is a one-line JSON header
followed by the raw little-endian float64 payload in row-major order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ShapeMismatch, ZeroNorm
from .grids import TimeGrid

__all__ = ["Kernel", "alignment", "save_kernel", "load_kernel"]

_MAGIC = "kernelflow-kernel-v1"


@dataclass
class Kernel:
    """A two-point function over the flattened (sample, time) index."""

    values: np.ndarray
    row_samples: np.ndarray
    col_samples: np.ndarray
    grid: TimeGrid
    name: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.row_samples = np.asarray(self.row_samples, dtype=np.int64)
        self.col_samples = np.asarray(self.col_samples, dtype=np.int64)
        t = self.grid.n_steps
        expected = (self.row_samples.size * t, self.col_samples.size * t)
        if self.values.shape != expected:
            raise ShapeMismatch(
                f"kernel '{self.name}' has shape {self.values.shape}, expected {expected}"
            )

    @staticmethod
    def from_matrix(values, grid: TimeGrid, name: str = "", meta: dict | None = None) -> "Kernel":
        """Wrap a square (P*T) x (P*T) matrix with 0..P-1 sample ids."""
        values = np.asarray(values, dtype=np.float64)
        p, rem = divmod(values.shape[0], grid.n_steps)
        if rem or values.ndim != 2:
            raise ShapeMismatch(f"matrix of shape {values.shape} does not tile T={grid.n_steps}")
        q, rem = divmod(values.shape[1], grid.n_steps)
        if rem:
            raise ShapeMismatch(f"matrix of shape {values.shape} does not tile T={grid.n_steps}")
        return Kernel(values, np.arange(p), np.arange(q), grid, name, meta or {})

    @property
    def n_row_samples(self) -> int:
        return self.row_samples.size

    @property
    def n_col_samples(self) -> int:
        return self.col_samples.size

    def as_blocks(self) -> np.ndarray:
        """View as (P', T, P'', T) with axes (mu, t, alpha, s)."""
        t = self.grid.n_steps
        return self.values.reshape(self.n_row_samples, t, self.n_col_samples, t)

    def equal_time(self) -> np.ndarray:
        """The (T, P', P'') stack of equal-time slices K(t_k, t_k)."""
        blocks = self.as_blocks()
        return np.stack([blocks[:, k, :, k] for k in range(self.grid.n_steps)])

    def symmetry_defect(self) -> float:
        """Relative Frobenius asymmetry; square kernels should stay < 1e-10."""
        v = self.values
        denom = np.linalg.norm(v)
        if denom == 0.0:
            return 0.0
        return float(np.linalg.norm(v - v.T) / denom)

    def symmetrized(self) -> "Kernel":
        return Kernel(
            0.5 * (self.values + self.values.T),
            self.row_samples,
            self.col_samples,
            self.grid,
            self.name,
            dict(self.meta),
        )


def alignment(a, b) -> float:
    """Cosine similarity Tr(a^T b) / (|a| |b|) of two equally shaped matrices."""
    av = a.values if isinstance(a, Kernel) else np.asarray(a, dtype=np.float64)
    bv = b.values if isinstance(b, Kernel) else np.asarray(b, dtype=np.float64)
    if av.shape != bv.shape:
        raise ShapeMismatch(f"alignment of {av.shape} against {bv.shape}")
    na = np.linalg.norm(av)
    nb = np.linalg.norm(bv)
    if na == 0.0 or nb == 0.0:
        raise ZeroNorm("alignment undefined for zero-norm matrices")
    return float(np.tensordot(av, bv) / (na * nb))


def save_kernel(kernel: Kernel, path) -> None:
    """Write header line + little-endian float64 row-major payload."""
    header = {
        "format": _MAGIC,
        "shape": list(kernel.values.shape),
        "row_samples": kernel.row_samples.tolist(),
        "col_samples": kernel.col_samples.tolist(),
        "T": kernel.grid.n_steps,
        "dt": kernel.grid.dt,
        "name": kernel.name,
    }
    header.update(kernel.meta)
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        fh.write(np.ascontiguousarray(kernel.values, dtype="<f8").tobytes())


def load_kernel(path) -> Kernel:
    path = Path(path)
    with path.open("rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        if header.get("format") != _MAGIC:
            raise ShapeMismatch(f"{path} is not a kernel file")
        shape = tuple(header["shape"])
        payload = fh.read()
    values = np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)
    grid = TimeGrid(header["T"], header["dt"])
    meta = {
        k: v
        for k, v in header.items()
        if k not in {"format", "shape", "row_samples", "col_samples", "T", "dt", "name"}
    }
    return Kernel(
        values,
        np.asarray(header["row_samples"]),
        np.asarray(header["col_samples"]),
        grid,
        header.get("name", ""),
        meta,
    )


def save_kernel_csv(kernel: Kernel, path) -> None:
    """Plain CSV export for small kernels (header comment + matrix rows)."""
    path = Path(path)
    with path.open("w") as fh:
        fh.write(f"# name={kernel.name} T={kernel.grid.n_steps} dt={kernel.grid.dt:.17g}\n")
        for row in kernel.values:
            fh.write(",".join(f"{v:.17g}" for v in row))
            fh.write("\n")
