import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hsipeft.tensor_ops import ShapeError, kron, kron_matvec, matmul, unvec, vec


def kron_blocks_oracle(a, b):
    """Direct block assembly: block (i, j) of the result is a[i, j] * b."""
    r1, r2 = a.shape
    m, n = b.shape
    out = np.zeros((r1 * m, r2 * n), dtype=np.result_type(a, b))
    for i in range(r1):
        for j in range(r2):
            out[i * m:(i + 1) * m, j * n:(j + 1) * n] = a[i, j] * b
    return out


class TestMatmul:
    def test_identity(self, rng):
        m = rng.normal(size=(2, 5)).astype(np.float32)
        assert np.array_equal(matmul(np.eye(2, dtype=np.float32), m), m)

    def test_hand_example(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        b = np.array([[5.0], [6.0]])
        assert np.array_equal(matmul(a, b), np.array([[17.0], [39.0]]))

    def test_matches_f64_oracle(self, rng):
        a = rng.uniform(size=(8, 8)).astype(np.float32)
        b = rng.uniform(size=(8, 8)).astype(np.float32)
        ref = a.astype(np.float64) @ b.astype(np.float64)
        err = np.abs(matmul(a, b) - ref).max() / np.abs(ref).max()
        assert err <= 1e-6

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            matmul(np.zeros((2, 3)), np.zeros((4, 2)))

    def test_associativity(self, rng):
        for _ in range(20):
            a, b, c = (rng.normal(size=(8, 8)).astype(np.float32)
                       for _ in range(3))
            lhs = matmul(matmul(a, b), c)
            rhs = matmul(a, matmul(b, c))
            bound = 1e-4 * (np.linalg.norm(a) * np.linalg.norm(b)
                            * np.linalg.norm(c))
            assert np.abs(lhs - rhs).max() <= bound


class TestKron:
    def test_scalar_one_identity(self, rng):
        b = rng.normal(size=(3, 4))
        assert np.array_equal(kron(np.array([[1.0]]), b), b)

    def test_identity_gives_block_diagonal(self, rng):
        b = rng.normal(size=(2, 2))
        out = kron(np.eye(2), b)
        assert np.array_equal(out[:2, :2], b)
        assert np.array_equal(out[2:, 2:], b)
        assert not out[:2, 2:].any()
        assert not out[2:, :2].any()

    def test_against_block_assembly_oracle(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        b = np.array([[0.0, 1.0], [1.0, 0.0]])
        expected = np.array([
            [0.0, 1.0, 0.0, 2.0],
            [1.0, 0.0, 2.0, 0.0],
            [0.0, 3.0, 0.0, 4.0],
            [3.0, 0.0, 4.0, 0.0],
        ])
        assert np.array_equal(kron(a, b), expected)
        assert np.array_equal(kron_blocks_oracle(a, b), expected)

    def test_random_against_oracle(self, rng):
        for _ in range(20):
            a = rng.normal(size=(rng.integers(1, 4), rng.integers(1, 4)))
            b = rng.normal(size=(rng.integers(1, 5), rng.integers(1, 5)))
            assert np.allclose(kron(a, b), kron_blocks_oracle(a, b))

    def test_non_2d_rejected(self):
        with pytest.raises(ShapeError):
            kron(np.zeros(3), np.zeros((2, 2)))

    def test_rank_is_multiplicative(self, rng):
        a = rng.normal(size=(2, 3)).astype(np.float64)
        b = rng.normal(size=(3, 2)).astype(np.float64)
        ra = np.linalg.matrix_rank(a)
        rb = np.linalg.matrix_rank(b)
        assert np.linalg.matrix_rank(kron(a, b)) == ra * rb


class TestKronMatvec:
    def test_left_scalar_one(self, rng):
        b = rng.normal(size=(4, 3))
        x = rng.normal(size=3)
        assert np.allclose(kron_matvec(np.array([[1.0]]), b, x), b @ x)

    def test_matches_materialized(self, rng):
        a = rng.normal(size=(2, 3)).astype(np.float32)
        b = rng.normal(size=(4, 5)).astype(np.float32)
        x = rng.normal(size=15).astype(np.float32)
        ref = kron(a, b) @ x
        err = np.abs(kron_matvec(a, b, x) - ref).max() / np.abs(ref).max()
        assert err <= 1e-6

    def test_zero_vector(self, rng):
        a = rng.normal(size=(2, 2))
        b = rng.normal(size=(3, 3))
        out = kron_matvec(a, b, np.zeros(6))
        assert np.array_equal(out, np.zeros(6))

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            kron_matvec(np.zeros((2, 2)), np.zeros((3, 3)), np.zeros(7))

    def test_batched_rows_match_single(self, rng):
        a = rng.normal(size=(2, 3))
        b = rng.normal(size=(3, 2))
        xs = rng.normal(size=(5, 6))
        batched = kron_matvec(a, b, xs)
        for i in range(5):
            assert np.allclose(batched[i], kron_matvec(a, b, xs[i]))

    def test_200_random_draws(self, rng):
        for _ in range(200):
            r1, r2 = rng.integers(1, 6, size=2)
            m, n = rng.integers(1, 8, size=2)
            a = rng.normal(size=(r1, r2)).astype(np.float32)
            b = rng.normal(size=(m, n)).astype(np.float32)
            x = rng.normal(size=r2 * n).astype(np.float32)
            ref = matmul(kron(a, b), x[:, None])[:, 0]
            got = kron_matvec(a, b, x)
            denom = max(np.abs(ref).max(), 1e-6)
            assert np.abs(got - ref).max() / denom <= 1e-5


class TestVecUnvec:
    def test_column_stacking(self):
        m = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(vec(m), np.array([1.0, 3.0, 2.0, 4.0]))

    def test_roundtrip(self, rng):
        m = rng.normal(size=(3, 5))
        assert np.array_equal(unvec(vec(m), 3, 5), m)

    def test_row_vector_is_itself(self, rng):
        row = rng.normal(size=(1, 6))
        assert np.array_equal(vec(row), row[0])

    def test_size_mismatch(self):
        with pytest.raises(ShapeError):
            unvec(np.zeros(5), 2, 3)

    @given(p=st.integers(1, 6), q=st.integers(1, 6), seed=st.integers(0, 10**6))
    @settings(max_examples=50, deadline=None)
    def test_roundtrip_property(self, p, q, seed):
        m = np.random.default_rng(seed).normal(size=(p, q))
        assert np.array_equal(unvec(vec(m), p, q), m)


@given(r1=st.integers(1, 4), r2=st.integers(1, 4),
       m=st.integers(1, 5), n=st.integers(1, 5), seed=st.integers(0, 10**6))
@settings(max_examples=60, deadline=None)
def test_kron_matvec_identity_property(r1, r2, m, n, seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(r1, r2))
    b = rng.normal(size=(m, n))
    x = rng.normal(size=r2 * n)
    assert np.allclose(kron_matvec(a, b, x), kron(a, b) @ x, rtol=1e-10, atol=1e-10)
