import numpy as np
import pytest

from kernelflow.errors import DimensionMismatch, NonPsdGram, ShapeMismatch
from kernelflow.grids import SampleSet, TimeGrid, Trajectory, flat_index


class TestTimeGrid:
    def test_times_strictly_increasing(self):
        grid = TimeGrid(5, 0.5)
        assert np.array_equal(grid.times, [0.0, 0.5, 1.0, 1.5, 2.0])
        assert np.all(np.diff(grid.times) > 0)

    def test_rejects_bad_parameters(self):
        with pytest.raises(ValueError):
            TimeGrid(0, 0.1)
        with pytest.raises(ValueError):
            TimeGrid(4, 0.0)
        with pytest.raises(ValueError):
            TimeGrid(4, -1.0)

    def test_flat_index_sample_major(self):
        assert flat_index(3, 4, 0, 0) == 0
        assert flat_index(3, 4, 1, 0) == 4
        assert flat_index(3, 4, 2, 3) == 11
        with pytest.raises(IndexError):
            flat_index(3, 4, 3, 0)


class TestSampleSet:
    def test_gram_from_inputs(self, rng):
        x = rng.standard_normal((4, 16))
        y = rng.standard_normal(4)
        data = SampleSet.from_inputs(x, y)
        assert np.allclose(data.input_gram, x @ x.T / 16)
        assert data.n_total == 4

    def test_test_samples_extend_gram(self, rng):
        x = rng.standard_normal((3, 8))
        xt = rng.standard_normal((2, 8))
        data = SampleSet.from_inputs(x, rng.standard_normal(3), xt)
        assert data.n_test == 2
        assert data.input_gram.shape == (5, 5)
        assert data.train_gram.shape == (3, 3)

    def test_rejects_indefinite_gram(self):
        bad = np.array([[1.0, 2.0], [2.0, 1.0]])  # eigenvalue -1
        with pytest.raises(NonPsdGram):
            SampleSet(2, 0, bad, np.zeros(2))

    def test_tolerates_tiny_negative_eigenvalue(self):
        gram = np.eye(2) * 1e-3
        gram[0, 1] = gram[1, 0] = 1e-3 + 1e-14
        SampleSet(2, 0, gram, np.zeros(2))  # does not raise

    def test_rejects_asymmetric_gram(self):
        bad = np.array([[1.0, 0.5], [0.1, 1.0]])
        with pytest.raises(NonPsdGram):
            SampleSet(2, 0, bad, np.zeros(2))

    def test_target_length_checked(self, rng):
        x = rng.standard_normal((3, 8))
        with pytest.raises(DimensionMismatch):
            SampleSet.from_inputs(x, np.zeros(2))


class TestTrajectory:
    def test_shape_must_match_grid(self):
        grid = TimeGrid(4, 0.1)
        Trajectory(np.zeros((2, 4)), grid)
        with pytest.raises(ShapeMismatch):
            Trajectory(np.zeros((2, 5)), grid)
