import numpy as np
import pytest

from kernelflow.errors import ShapeMismatch, ZeroNorm
from kernelflow.grids import TimeGrid
from kernelflow.kernels import Kernel, alignment, load_kernel, save_kernel, save_kernel_csv


class TestAlignment:
    def test_self_alignment_is_one(self, rng):
        x = rng.standard_normal((5, 5))
        assert alignment(x, x) == pytest.approx(1.0)

    def test_negation_gives_minus_one(self, rng):
        x = rng.standard_normal((5, 5))
        assert alignment(x, -x) == pytest.approx(-1.0)

    def test_hand_computed_half(self):
        # Tr = 1, norms 1 and 2 -> 0.5
        a = np.array([[1.0, 0.0], [0.0, 0.0]])
        b = np.ones((2, 2))
        assert alignment(a, b) == pytest.approx(0.5)

    def test_zero_norm_rejected(self):
        with pytest.raises(ZeroNorm):
            alignment(np.zeros((2, 2)), np.eye(2))

    def test_bounded_in_unit_interval(self, rng):
        for _ in range(20):
            a = rng.standard_normal((4, 4))
            b = rng.standard_normal((4, 4))
            assert -1.0 - 1e-12 <= alignment(a, b) <= 1.0 + 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            alignment(np.eye(2), np.eye(3))


class TestKernelContainer:
    def test_shape_validation(self):
        grid = TimeGrid(3, 0.1)
        with pytest.raises(ShapeMismatch):
            Kernel(np.zeros((5, 6)), np.arange(2), np.arange(2), grid)

    def test_blocks_and_equal_time(self, rng):
        grid = TimeGrid(3, 0.1)
        vals = rng.standard_normal((6, 6))
        k = Kernel.from_matrix(vals, grid)
        blocks = k.as_blocks()
        assert blocks.shape == (2, 3, 2, 3)
        assert blocks[1, 2, 0, 1] == vals[1 * 3 + 2, 0 * 3 + 1]
        eq = k.equal_time()
        assert eq.shape == (3, 2, 2)
        assert eq[2, 1, 0] == vals[5, 2]

    def test_symmetry_defect(self, rng):
        grid = TimeGrid(2, 0.1)
        m = rng.standard_normal((4, 4))
        sym = Kernel.from_matrix(m + m.T, grid)
        assert sym.symmetry_defect() < 1e-15
        asym = Kernel.from_matrix(m + m.T + 1e-3 * np.triu(np.ones((4, 4)), 1), grid)
        assert asym.symmetrized().symmetry_defect() < 1e-15


class TestKernelFiles:
    def test_roundtrip(self, tmp_path, rng):
        grid = TimeGrid(4, 0.2)
        k = Kernel.from_matrix(rng.standard_normal((8, 8)), grid, name="phi_1",
                               meta={"scheme": "test"})
        path = tmp_path / "phi_1.kern"
        save_kernel(k, path)
        back = load_kernel(path)
        assert np.array_equal(back.values, k.values)
        assert back.grid == grid
        assert back.name == "phi_1"
        assert back.meta["scheme"] == "test"
        assert np.array_equal(back.row_samples, k.row_samples)

    def test_header_is_single_json_line(self, tmp_path, rng):
        import json

        grid = TimeGrid(2, 0.5)
        k = Kernel.from_matrix(rng.standard_normal((4, 4)), grid, name="g")
        path = tmp_path / "g.kern"
        save_kernel(k, path)
        with path.open("rb") as fh:
            header = json.loads(fh.readline())
            payload = fh.read()
        assert header["shape"] == [4, 4]
        assert header["T"] == 2 and header["dt"] == 0.5
        assert len(payload) == 4 * 4 * 8
        # payload is little-endian float64 row-major
        vals = np.frombuffer(payload, dtype="<f8").reshape(4, 4)
        assert np.array_equal(vals, k.values)

    def test_csv_export(self, tmp_path):
        grid = TimeGrid(1, 1.0)
        k = Kernel.from_matrix(np.array([[1.5, 2.0], [2.0, 3.0]]), grid, name="kx")
        path = tmp_path / "kx.csv"
        save_kernel_csv(k, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0].startswith("#")
        assert [float(v) for v in lines[1].split(",")] == [1.5, 2.0]

    def test_rejects_non_kernel_file(self, tmp_path):
        path = tmp_path / "junk.kern"
        path.write_bytes(b'{"format": "something-else"}\n')
        with pytest.raises(ShapeMismatch):
            load_kernel(path)
