import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dropforest.errors import (
    DegenerateCellError,
    DimensionError,
    ParseError,
    ShapeMismatchError,
)
from dropforest.matrix_io import (
    CountMatrix,
    denormalize,
    normalize,
    read_labels,
    read_mask,
    read_matrix,
    write_labels,
    write_mask,
    write_matrix,
)


def matrices_equal(a: CountMatrix, b: CountMatrix) -> bool:
    return (
        a.gene_names == b.gene_names
        and a.cell_names == b.cell_names
        and a.values.shape == b.values.shape
        and np.array_equal(a.to_dense(), b.to_dense())
    )


class TestRead:
    def test_dense_2x2(self, tmp_path):
        p = tmp_path / "m.tsv"
        p.write_text("\tc1\tc2\ng1\t0\t3\ng2\t1\t0\n")
        m = read_matrix(str(p), "dense_delimited")
        assert (m.n_genes, m.n_cells, m.nnz) == (2, 2, 2)
        assert m.to_dense().tolist() == [[0, 3], [1, 0]]
        assert m.gene_names == ["g1", "g2"]
        assert m.cell_names == ["c1", "c2"]

    def test_dense_comma_and_no_corner(self, tmp_path):
        p = tmp_path / "m.csv"
        p.write_text("c1,c2,c3\ng1,1,0,2\n")
        m = read_matrix(str(p), "dense_delimited")
        assert m.cell_names == ["c1", "c2", "c3"]
        assert m.nnz == 2

    def test_matrix_market(self, tmp_path):
        p = tmp_path / "m.mtx"
        p.write_text(
            "%%MatrixMarket matrix coordinate real general\n2 3 2\n1 1 5\n2 3 7\n"
        )
        m = read_matrix(str(p), "matrix_market")
        assert (m.n_genes, m.n_cells, m.nnz) == (2, 3, 2)
        assert m.to_dense()[0, 0] == 5
        assert m.to_dense()[1, 2] == 7

    def test_negative_value_names_coordinates(self, tmp_path):
        p = tmp_path / "m.tsv"
        p.write_text("\tc1\tc2\ng1\t0\t3\ng2\t-1\t0\n")
        with pytest.raises(ValueError, match="g2"):
            read_matrix(str(p), "dense_delimited")

    def test_nan_rejected(self, tmp_path):
        p = tmp_path / "m.tsv"
        p.write_text("\tc1\ng1\tnan\n")
        with pytest.raises(ValueError, match="non-finite"):
            read_matrix(str(p), "dense_delimited")

    def test_ragged_rows(self, tmp_path):
        p = tmp_path / "m.tsv"
        p.write_text("\tc1\tc2\ng1\t0\t3\ng2\t1\n")
        with pytest.raises(DimensionError):
            read_matrix(str(p), "dense_delimited")

    def test_mm_bad_header(self, tmp_path):
        p = tmp_path / "m.mtx"
        p.write_text("%%MatrixMarket matrix coordinate pattern general\n1 1 0\n")
        with pytest.raises(ParseError):
            read_matrix(str(p), "matrix_market")

    def test_mm_entry_count_mismatch(self, tmp_path):
        p = tmp_path / "m.mtx"
        p.write_text("%%MatrixMarket matrix coordinate real general\n2 2 2\n1 1 5\n")
        with pytest.raises(ParseError):
            read_matrix(str(p), "matrix_market")


class TestRoundTrip:
    @pytest.mark.parametrize("fmt", ["matrix_market", "dense_delimited"])
    def test_simple(self, tmp_path, fmt):
        m = CountMatrix.from_dense(
            [[0.0, 3.5], [1.25, 0.0], [0.0, 0.0]], ["a", "b", "c"], ["x", "y"]
        )
        p = tmp_path / "m.out"
        write_matrix(m, str(p), fmt)
        assert matrices_equal(read_matrix(str(p), fmt), m)

    @pytest.mark.parametrize("fmt", ["matrix_market", "dense_delimited"])
    def test_all_zero_matrix(self, tmp_path, fmt):
        m = CountMatrix.from_dense(np.zeros((3, 2)))
        p = tmp_path / "z.out"
        write_matrix(m, str(p), fmt)
        back = read_matrix(str(p), fmt)
        assert back.nnz == 0 and back.values.shape == (3, 2)

    @pytest.mark.parametrize("fmt", ["matrix_market", "dense_delimited"])
    def test_second_write_byte_identical(self, tmp_path, fmt):
        rng = np.random.default_rng(3)
        dense = rng.random((6, 5)) * (rng.random((6, 5)) < 0.5)
        m = CountMatrix.from_dense(dense)
        p1, p2 = tmp_path / "a.out", tmp_path / "b.out"
        write_matrix(m, str(p1), fmt)
        write_matrix(read_matrix(str(p1), fmt), str(p2), fmt)
        assert p1.read_bytes() == p2.read_bytes()

    def test_simulated_matrix_bit_stable(self, tmp_path):
        # full-scale generated matrix survives two write/read cycles bit-for-bit
        from dropforest.simulate import SimConfig, simulate

        m = simulate(SimConfig(seed=31, dropout_mid=5.0)).observed
        p1, p2, p3 = (tmp_path / f"m{i}.mtx" for i in range(3))
        write_matrix(m, str(p1), "matrix_market")
        r1 = read_matrix(str(p1), "matrix_market")
        write_matrix(r1, str(p2), "matrix_market")
        r2 = read_matrix(str(p2), "matrix_market")
        write_matrix(r2, str(p3), "matrix_market")
        assert p1.read_bytes() == p2.read_bytes() == p3.read_bytes()
        assert matrices_equal(r2, m)

    @settings(max_examples=25, deadline=None)
    @given(g=st.integers(1, 6), c=st.integers(1, 6), seed=st.integers(0, 10_000))
    def test_roundtrip_property(self, tmp_path_factory, g, c, seed):
        rng = np.random.default_rng(seed)
        dense = np.where(rng.random((g, c)) < 0.4, rng.integers(0, 50, (g, c)), 0).astype(float)
        m = CountMatrix.from_dense(dense)
        root = tmp_path_factory.mktemp("rt")
        for fmt in ("matrix_market", "dense_delimited"):
            p = root / f"m.{fmt}"
            write_matrix(m, str(p), fmt)
            assert matrices_equal(read_matrix(str(p), fmt), m)


class TestNormalize:
    def test_log2_zero_maps_to_zero(self):
        m = CountMatrix.from_dense([[0.0, 100.0], [100.0, 0.0]])
        out, _ = normalize(m, "library_size_log2")
        dense = out.to_dense()
        assert dense[0, 0] == 0.0 and dense[1, 1] == 0.0

    def test_log2_of_three(self):
        # equal totals so size factors are 1; log2(3+1) = 2
        m = CountMatrix.from_dense([[3.0, 3.0]])
        out, _ = normalize(m, "library_size_log2")
        assert np.allclose(out.to_dense(), 2.0)

    def test_median_scaling(self):
        # totals {100, 300}: median 200 -> factors {2, 2/3}
        m = CountMatrix.from_dense([[40.0, 100.0], [60.0, 200.0]])
        out, rec = normalize(m, "library_size")
        assert np.allclose(rec.size_factors, [2.0, 2.0 / 3.0])
        assert np.allclose(out.to_dense()[:, 0], [80.0, 120.0])

    def test_degenerate_cell(self):
        m = CountMatrix.from_dense([[1.0, 0.0]])
        with pytest.raises(DegenerateCellError):
            normalize(m, "library_size")

    def test_mode_none_exact_identity(self):
        m = CountMatrix.from_dense([[0.0, 3.0], [1.0, 7.0]])
        out, rec = normalize(m, "none")
        assert np.array_equal(denormalize(out, rec).to_dense(), m.to_dense())

    def test_denormalize_log2_value(self):
        # totals {100, 300}, median 200 -> factor 2 for cell one;
        # log2 value 2 with size factor 2 -> (2^2 - 1) / 2 = 1.5
        m = CountMatrix.from_dense([[1.5, 100.0], [98.5, 200.0]])
        out, rec = normalize(m, "library_size_log2")
        assert rec.size_factors[0] == 2.0
        assert abs(out.to_dense()[0, 0] - 2.0) < 1e-12
        back = denormalize(out, rec)
        assert abs(back.to_dense()[0, 0] - 1.5) < 1e-9

    def test_shape_mismatch(self):
        m = CountMatrix.from_dense([[1.0, 2.0]])
        _, rec = normalize(m, "library_size")
        other = CountMatrix.from_dense([[1.0, 2.0, 3.0]])
        with pytest.raises(ShapeMismatchError):
            denormalize(other, rec)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(2, 8), st.integers(2, 6), st.integers(0, 10_000))
    def test_invertibility_and_sparsity(self, g, c, seed):
        rng = np.random.default_rng(seed)
        dense = np.where(rng.random((g, c)) < 0.5, rng.integers(1, 40, (g, c)), 0).astype(float)
        dense[0, :] = np.maximum(dense[0, :], 1.0)  # keep every cell total positive
        m = CountMatrix.from_dense(dense)
        for mode in ("library_size", "library_size_log2"):
            out, rec = normalize(m, mode)
            assert np.array_equal(out.to_dense() == 0, dense == 0)
            back = denormalize(out, rec).to_dense()
            assert np.max(np.abs(back - dense) / np.maximum(np.abs(dense), 1.0)) < 1e-9


class TestLabelsAndMask:
    def test_labels_roundtrip(self, tmp_path):
        p = tmp_path / "labels.txt"
        write_labels([0, 2, 1, 1], str(p))
        assert read_labels(str(p)).tolist() == [0, 2, 1, 1]

    def test_labels_parse_error(self, tmp_path):
        p = tmp_path / "labels.txt"
        p.write_text("0\nfoo\n")
        with pytest.raises(ParseError):
            read_labels(str(p))

    def test_mask_roundtrip(self, tmp_path):
        mask = np.zeros((4, 3), dtype=bool)
        mask[0, 1] = mask[3, 2] = True
        p = tmp_path / "mask.mtx"
        write_mask(mask, str(p))
        assert np.array_equal(read_mask(str(p)), mask)
        assert p.read_text().splitlines()[0].startswith("%%MatrixMarket matrix coordinate pattern")


class TestValidation:
    def test_duplicate_names_rejected(self):
        with pytest.raises(ValueError, match="unique"):
            CountMatrix.from_dense([[1.0], [2.0]], ["g", "g"], ["c"])

    def test_negative_rejected(self):
        with pytest.raises(ValueError, match="negative"):
            CountMatrix.from_dense([[-1.0]])
