import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lfraug import InvalidInputError, SingularMatrixError
from lfraug.linalg import (
    CayleyFree,
    cayley_general,
    cayley_square,
    spectral_norm_diff,
    spectral_norm_exact,
)


def jacobi_eigenvalues(s, sweeps=100):
    """Independent eigenvalue oracle: cyclic Jacobi rotations on a symmetric matrix."""
    a = np.array(s, dtype=float)
    n = a.shape[0]
    for _ in range(sweeps):
        off = np.sqrt(np.sum(np.tril(a, -1) ** 2))
        if off < 1e-15:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(a[p, q]) < 1e-300:
                    continue
                theta = 0.5 * np.arctan2(2 * a[p, q], a[q, q] - a[p, p])
                c, sn = np.cos(theta), np.sin(theta)
                rot = np.eye(n)
                rot[p, p] = c
                rot[q, q] = c
                rot[p, q] = sn
                rot[q, p] = -sn
                a = rot.T @ a @ rot
    return np.sort(np.diag(a))


class TestSpectralNormExact:
    def test_identity(self):
        assert spectral_norm_exact(np.eye(3)) == pytest.approx(1.0, abs=1e-12)

    def test_diagonal(self):
        assert spectral_norm_exact(np.diag([3.0, 4.0])) == pytest.approx(4.0, abs=1e-12)

    def test_matches_jacobi_oracle(self):
        rng = np.random.default_rng(42)
        m = rng.standard_normal((5, 3))
        expected = np.sqrt(jacobi_eigenvalues(m.T @ m)[-1])
        assert spectral_norm_exact(m) == pytest.approx(expected, rel=1e-8)

    def test_rejects_non_finite(self):
        bad = np.array([[1.0, np.nan], [0.0, 1.0]])
        with pytest.raises(InvalidInputError):
            spectral_norm_exact(bad)

    def test_rejects_vector(self):
        with pytest.raises(InvalidInputError):
            spectral_norm_exact(np.ones(3))


class TestSpectralNormDiff:
    def test_dominant_singular_value(self):
        assert float(spectral_norm_diff(np.diag([3.0, 4.0]), 50)) == pytest.approx(
            4.0, abs=1e-8
        )

    def test_zero_matrix(self):
        for iters in (1, 3, 100):
            assert float(spectral_norm_diff(np.zeros((2, 2)), iters)) == 0.0

    def test_agrees_with_exact(self):
        rng = np.random.default_rng(7)
        m = rng.standard_normal((4, 4))
        est = float(spectral_norm_diff(m, 200))
        assert est == pytest.approx(spectral_norm_exact(m), abs=1e-6)

    def test_monotone_and_bounded(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            m = rng.standard_normal((4, 5))
            exact = spectral_norm_exact(m)
            prev = 0.0
            for iters in (1, 2, 5, 10, 40, 160):
                est = float(spectral_norm_diff(m, iters))
                assert est >= prev - 1e-12
                assert est <= exact + 1e-12
                prev = est

    def test_requires_positive_iters(self):
        with pytest.raises(InvalidInputError):
            spectral_norm_diff(np.eye(2), 0)


class TestCayleySquare:
    def test_zero_gives_identity(self):
        np.testing.assert_allclose(cayley_square(np.zeros((2, 2))), np.eye(2))

    def test_scalar_one(self):
        np.testing.assert_allclose(cayley_square(np.array([[1.0]])), [[0.0]])

    def test_scaled_identity(self):
        eps = 0.01
        out = cayley_square(eps * np.eye(3))
        np.testing.assert_allclose(out, (1 - eps) / (1 + eps) * np.eye(3), atol=1e-14)

    def test_skew_symmetric_gives_orthogonal(self):
        rng = np.random.default_rng(11)
        for _ in range(10):
            a = rng.standard_normal((4, 4))
            skew = a - a.T
            prod = cayley_square(-skew) @ cayley_square(skew)
            np.testing.assert_allclose(prod, np.eye(4), atol=1e-10)

    def test_singular_raises(self):
        with pytest.raises(SingularMatrixError):
            cayley_square(np.array([[-1.0]]))


class TestCayleyGeneral:
    def test_eps_identity_case(self):
        eps = 1e-4
        f = CayleyFree(x=np.zeros((2, 2)), y=np.zeros((2, 2)), z=np.zeros((0, 2)), eps=eps)
        out = cayley_general(f)
        np.testing.assert_allclose(out, (1 - eps) / (1 + eps) * np.eye(2), atol=1e-14)
        assert spectral_norm_exact(out) == pytest.approx(0.99980002, abs=1e-7)

    def test_rectangular_norm_below_one(self):
        rng = np.random.default_rng(5)
        f = CayleyFree(
            x=rng.standard_normal((2, 2)),
            y=rng.standard_normal((2, 2)),
            z=rng.standard_normal((1, 2)),
            eps=1e-4,
        )
        out = cayley_general(f)
        assert out.shape == (3, 2)
        assert spectral_norm_exact(out) < 1.0

    @pytest.mark.parametrize("shape", [(1, 1), (3, 2), (4, 4), (5, 1)])
    def test_norm_sweep(self, shape):
        n, m = shape
        rng = np.random.default_rng(1000 + n * 10 + m)
        for k in range(250):
            f = CayleyFree.random(n, m, rng, scale=10.0 ** rng.uniform(-2, 1))
            assert spectral_norm_exact(cayley_general(f)) < 1.0

    @settings(max_examples=60, deadline=None)
    @given(
        n=st.integers(1, 5),
        m=st.integers(1, 5),
        seed=st.integers(0, 2**31 - 1),
        scale=st.floats(1e-3, 30.0),
    )
    def test_norm_below_one_property(self, n, m, seed, scale):
        if n < m:
            n, m = m, n
        f = CayleyFree.random(n, m, np.random.default_rng(seed), scale=scale)
        assert spectral_norm_exact(cayley_general(f)) < 1.0

    def test_invariants_validated(self):
        with pytest.raises(InvalidInputError):
            CayleyFree(x=np.zeros((2, 2)), y=np.zeros((2, 2)), z=np.zeros((0, 2)), eps=0.0)
        with pytest.raises(InvalidInputError):
            CayleyFree(x=np.zeros((2, 2)), y=np.zeros((3, 3)), z=np.zeros((0, 2)))
