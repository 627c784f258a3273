"""The (sample, time) index space that every kernel and trajectory lives on.

All two-time kernels are dense matrices over the flattened (sample, time)
index with sample-major, time-minor ordering: row ``mu * T + k`` holds
sample ``mu`` at time step ``k``.  This ordering is fixed so that kernel
files written by one solver can be read by any other.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, NonPsdGram, ShapeMismatch

__all__ = ["TimeGrid", "SampleSet", "Trajectory", "flat_index"]

#: eigenvalues of an input gram may dip this far below zero before the
#: gram is rejected (numerical negativity only)
GRAM_EIG_FLOOR = -1e-10


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_k = k*dt for k in {0, ..., n_steps-1}."""

    n_steps: int
    dt: float

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError(f"n_steps must be >= 1, got {self.n_steps}")
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps) * self.dt

    @property
    def horizon(self) -> float:
        return (self.n_steps - 1) * self.dt

    def __len__(self) -> int:
        return self.n_steps


def flat_index(n_samples: int, n_steps: int, sample: int, step: int) -> int:
    """Flattened row index of (sample, step), sample-major / time-minor."""
    if not (0 <= sample < n_samples and 0 <= step < n_steps):
        raise IndexError(f"({sample}, {step}) outside {n_samples}x{n_steps}")
    return sample * n_steps + step


@dataclass(frozen=True)
class SampleSet:
    """Training and test samples represented through their input gram.

    ``input_gram`` covers all ``n_train + n_test`` samples (train first)
    and equals ``X X^T / D`` when built from raw inputs.  Targets are
    given for the training samples only.
    """

    n_train: int
    n_test: int
    input_gram: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        gram = np.asarray(self.input_gram, dtype=np.float64)
        y = np.asarray(self.targets, dtype=np.float64).ravel()
        object.__setattr__(self, "input_gram", gram)
        object.__setattr__(self, "targets", y)
        n = self.n_train + self.n_test
        if self.n_train < 1 or self.n_test < 0:
            raise ValueError("need n_train >= 1 and n_test >= 0")
        if gram.shape != (n, n):
            raise DimensionMismatch(
                f"input_gram has shape {gram.shape}, expected ({n}, {n})"
            )
        if y.shape != (self.n_train,):
            raise DimensionMismatch(
                f"targets has shape {y.shape}, expected ({self.n_train},)"
            )
        if not np.allclose(gram, gram.T, atol=1e-12 * max(1.0, np.abs(gram).max())):
            raise NonPsdGram("input_gram is not symmetric")
        object.__setattr__(self, "input_gram", 0.5 * (gram + gram.T))
        min_eig = float(np.linalg.eigvalsh(self.input_gram).min())
        if min_eig < GRAM_EIG_FLOOR:
            raise NonPsdGram(f"input_gram has eigenvalue {min_eig:.3e} < {GRAM_EIG_FLOOR}")

    @staticmethod
    def from_inputs(
        x_train: np.ndarray, targets: np.ndarray, x_test: np.ndarray | None = None
    ) -> "SampleSet":
        """Build the gram K^x = X X^T / D from raw inputs (rows = samples)."""
        x_train = np.atleast_2d(np.asarray(x_train, dtype=np.float64))
        blocks = [x_train]
        n_test = 0
        if x_test is not None and len(x_test):
            x_test = np.atleast_2d(np.asarray(x_test, dtype=np.float64))
            if x_test.shape[1] != x_train.shape[1]:
                raise DimensionMismatch(
                    f"test inputs have {x_test.shape[1]} features, train has {x_train.shape[1]}"
                )
            blocks.append(x_test)
            n_test = x_test.shape[0]
        x = np.vstack(blocks)
        gram = x @ x.T / x.shape[1]
        return SampleSet(x_train.shape[0], n_test, gram, targets)

    @property
    def n_total(self) -> int:
        return self.n_train + self.n_test

    @property
    def train_gram(self) -> np.ndarray:
        return self.input_gram[: self.n_train, : self.n_train]


@dataclass
class Trajectory:
    """A real array indexed by (sample, time step)."""

    values: np.ndarray
    grid: TimeGrid
    sample_ids: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ShapeMismatch(f"trajectory must be 2-D, got shape {self.values.shape}")
        if self.values.shape[1] != self.grid.n_steps:
            raise ShapeMismatch(
                f"trajectory has {self.values.shape[1]} steps, grid has {self.grid.n_steps}"
            )
        if self.sample_ids is None:
            self.sample_ids = np.arange(self.values.shape[0])
        else:
            self.sample_ids = np.asarray(self.sample_ids)
            if self.sample_ids.shape != (self.values.shape[0],):
                raise ShapeMismatch("sample_ids length does not match trajectory rows")

    @property
    def n_samples(self) -> int:
        return self.values.shape[0]
