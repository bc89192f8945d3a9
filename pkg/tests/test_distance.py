import numpy as np
import pytest

from phenorank import backend
from phenorank.distance import (
    DistanceMatrix,
    UnitVectorBlock,
    cosine_distance,
    distance_matrix,
    l2_normalize,
)
from phenorank.errors import DimensionMismatch, ZeroVector


def blocks(rng, n, m, dim):
    test = UnitVectorBlock.from_rows(rng.standard_normal((n, dim)))
    gallery = UnitVectorBlock.from_rows(rng.standard_normal((m, dim)))
    return test, gallery


class TestNormalize:
    def test_345_triangle(self):
        assert np.array_equal(l2_normalize([3.0, 4.0]), np.array([0.6, 0.8]))

    def test_unit_vector_unchanged(self):
        v = np.array([1.0, 0.0, 0.0])
        assert np.array_equal(l2_normalize(v), v)

    def test_zero_vector(self):
        with pytest.raises(ZeroVector):
            l2_normalize([0.0, 0.0])

    def test_tiny_vector(self):
        with pytest.raises(ZeroVector):
            l2_normalize([1e-13, 0.0])

    def test_block_rows_unit(self):
        rng = np.random.default_rng(0)
        block = UnitVectorBlock.from_rows(rng.standard_normal((20, 7)) * 100)
        block.validate()
        assert block.count == 20 and block.dimension == 7


class TestScalarDistance:
    def test_identical(self):
        v = l2_normalize([1.0, 2.0, 2.0])
        assert cosine_distance(v, v) == 0.0

    def test_orthogonal(self):
        assert cosine_distance([1.0, 0.0], [0.0, 1.0]) == 1.0

    def test_antipodal(self):
        assert cosine_distance([1.0, 0.0], [-1.0, 0.0]) == 2.0

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            cosine_distance([1.0, 0.0], [1.0, 0.0, 0.0])


class TestDistanceMatrix:
    def test_1x1_equals_scalar(self):
        rng = np.random.default_rng(1)
        u = l2_normalize(rng.standard_normal(16))
        v = l2_normalize(rng.standard_normal(16))
        matrix = distance_matrix(UnitVectorBlock.from_rows(u[None]),
                                 UnitVectorBlock.from_rows(v[None]))
        assert matrix.values[0, 0] == cosine_distance(u, v)

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(42)
        test, gallery = blocks(rng, 5, 7, 16)
        matrix = distance_matrix(test, gallery)
        for i in range(5):
            for j in range(7):
                expected = 1.0 - sum(
                    float(test.data[i, k]) * float(gallery.data[j, k])
                    for k in range(16))
                expected = min(2.0, max(0.0, expected))
                assert matrix.values[i, j] == pytest.approx(expected, abs=1e-12)

    def test_scale_invariance(self):
        rng = np.random.default_rng(7)
        raw_test = rng.standard_normal((4, 8))
        raw_gallery = rng.standard_normal((6, 8))
        a = distance_matrix(UnitVectorBlock.from_rows(raw_test),
                            UnitVectorBlock.from_rows(raw_gallery))
        b = distance_matrix(UnitVectorBlock.from_rows(raw_test * 3.0),
                            UnitVectorBlock.from_rows(raw_gallery * 3.0))
        np.testing.assert_allclose(a.values, b.values, atol=1e-12, rtol=0)

    def test_range(self):
        rng = np.random.default_rng(3)
        test, gallery = blocks(rng, 17, 23, 5)
        values = distance_matrix(test, gallery).values
        assert values.min() >= 0.0 and values.max() <= 2.0

    def test_symmetry(self):
        rng = np.random.default_rng(4)
        a, b = blocks(rng, 9, 13, 12)
        ab = distance_matrix(a, b).values
        ba = distance_matrix(b, a).values
        np.testing.assert_allclose(ab, ba.T, atol=1e-12, rtol=0)

    def test_dimension_mismatch(self):
        rng = np.random.default_rng(5)
        a = UnitVectorBlock.from_rows(rng.standard_normal((2, 4)))
        b = UnitVectorBlock.from_rows(rng.standard_normal((2, 5)))
        with pytest.raises(DimensionMismatch):
            distance_matrix(a, b)

    def test_empty_blocks(self):
        rng = np.random.default_rng(6)
        a = UnitVectorBlock.from_rows(np.zeros((0, 4)))
        b = UnitVectorBlock.from_rows(rng.standard_normal((3, 4)))
        out = distance_matrix(a, b)
        assert out.values.shape == (0, 3)
        assert isinstance(out, DistanceMatrix)

    def test_naive_double_loop_equivalence(self):
        rng = np.random.default_rng(8)
        for _ in range(10):
            n = int(rng.integers(1, 12))
            m = int(rng.integers(1, 12))
            dim = int(rng.integers(1, 40))
            test, gallery = blocks(rng, n, m, dim)
            got = distance_matrix(test, gallery).values
            naive = np.empty((n, m))
            for i in range(n):
                for j in range(m):
                    acc = 0.0
                    for k in range(dim):
                        acc += test.data[i, k] * gallery.data[j, k]
                    naive[i, j] = min(2.0, max(0.0, 1.0 - acc))
            np.testing.assert_allclose(got, naive, atol=1e-12, rtol=0)


class TestBackends:
    def test_backends_agree(self):
        rng = np.random.default_rng(9)
        test, gallery = blocks(rng, 30, 45, 24)
        original = backend.active_backend()
        try:
            backend.set_backend("numpy")
            a = distance_matrix(test, gallery).values
            backend.set_backend("numba")
            b = distance_matrix(test, gallery).values
        finally:
            backend.set_backend(original)
        np.testing.assert_allclose(a, b, atol=1e-12, rtol=0)

    def test_numba_bitwise_independent_of_tile(self):
        rng = np.random.default_rng(10)
        test, gallery = blocks(rng, 11, 37, 19)
        original = backend.active_backend()
        try:
            backend.set_backend("numba")
            base = distance_matrix(test, gallery, tile=1024).values
            for tile in (1, 3, 8, 64):
                again = distance_matrix(test, gallery, tile=tile).values
                assert np.array_equal(base, again)
        finally:
            backend.set_backend(original)

    def test_numba_bitwise_independent_of_threads(self):
        rng = np.random.default_rng(11)
        test, gallery = blocks(rng, 13, 29, 33)
        original = backend.active_backend()
        try:
            backend.set_backend("numba")
            backend.set_threads(1)
            one = distance_matrix(test, gallery).values
            backend.set_threads(8)
            eight = distance_matrix(test, gallery).values
        finally:
            backend.set_threads(1)
            backend.set_backend(original)
        assert np.array_equal(one, eight)

    def test_repeated_calls_identical(self):
        rng = np.random.default_rng(12)
        test, gallery = blocks(rng, 21, 17, 10)
        a = distance_matrix(test, gallery).values
        b = distance_matrix(test, gallery).values
        assert np.array_equal(a, b)
