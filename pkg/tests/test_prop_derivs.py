"""Matrix exponential and auxiliary block-matrix derivative checks."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from newton_grape.prop_derivs import expm, slice_propagator_with_derivs


def taylor_expm(a, terms=30):
    """Plain Taylor-series oracle, valid for small-norm arguments."""
    out = np.eye(a.shape[0], dtype=complex)
    term = np.eye(a.shape[0], dtype=complex)
    for k in range(1, terms + 1):
        term = term @ a / k
        out = out + term
    return out


def random_hermitian(rng, n, scale=1.0):
    m = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    return scale * (m + m.conj().T) / 2.0


def dense_augmented_3x3(h, hi, hj, dt):
    """Literal Eq-style 3x3 block matrix, exponentiated densely."""
    n = h.shape[0]
    z = np.zeros((n, n), dtype=complex)
    m = np.block([[h, hi, z], [z, h, hj], [z, z, h]]) * (-1j * dt)
    return expm(m)


class TestExpm:
    def test_zero_gives_identity(self):
        assert_allclose(expm(np.zeros((4, 4))), np.eye(4), atol=1e-15)

    def test_diagonal(self):
        a, b = 0.37, -1.92
        assert_allclose(expm(np.diag([a, b])), np.diag([np.exp(a), np.exp(b)]), rtol=1e-14)

    def test_taylor_oracle_small_norm(self, rng):
        for _ in range(5):
            a = rng.standard_normal((8, 8)) + 1j * rng.standard_normal((8, 8))
            a *= 0.8 / np.linalg.norm(a, 2)
            ref = taylor_expm(a)
            assert np.linalg.norm(expm(a) - ref) <= 1e-12 * np.linalg.norm(ref)

    def test_large_norm_scaling_path(self, rng):
        a = random_hermitian(rng, 6, scale=40.0)
        w, q = np.linalg.eigh(a)
        ref = (q * np.exp(w)) @ q.conj().T
        assert np.linalg.norm(expm(a) - ref) <= 1e-10 * np.linalg.norm(ref)

    def test_rejects_non_square(self):
        with pytest.raises(ValueError, match="square"):
            expm(np.zeros((2, 3)))

    def test_rejects_non_finite(self):
        a = np.zeros((2, 2))
        a[0, 1] = np.nan
        with pytest.raises(ValueError, match="non-finite"):
            expm(a)


class TestSlicePropagators:
    def test_zero_direction(self, rng):
        h = random_hermitian(rng, 4)
        zero = np.zeros((4, 4), dtype=complex)
        sp = slice_propagator_with_derivs(h, [zero], 0.5, order=2)
        assert_allclose(sp.dp[0], zero, atol=1e-15)
        assert_allclose(sp.second_derivative(0, 0), zero, atol=1e-15)

    def test_commuting_closed_form(self, rng):
        # [H, Hk] = 0 makes dP/dc = -i dt Hk P exactly.
        w = rng.standard_normal(4)
        h = np.diag(w).astype(complex)
        hk = np.diag(rng.standard_normal(4)).astype(complex)
        dt = 0.7
        sp = slice_propagator_with_derivs(h, [hk], dt, order=1)
        assert_allclose(sp.dp[0], -1j * dt * hk @ sp.p, atol=1e-10)

    def test_second_derivative_fd_oracle(self, rng):
        # Directions are scaled up so the second difference dominates the
        # cancellation noise of the 1e-5 step.
        for _ in range(3):
            h = random_hermitian(rng, 4, 1.0)
            hi = random_hermitian(rng, 4, 6.0)
            hj = random_hermitian(rng, 4, 6.0)
            dt = 0.9
            sp = slice_propagator_with_derivs(h, [hi, hj], dt, order=2)
            eps = 1e-5

            def prop(ci, cj):
                return expm(-1j * dt * (h + ci * hi + cj * hj))

            fd_mixed = (
                prop(eps, eps) - prop(eps, -eps) - prop(-eps, eps) + prop(-eps, -eps)
            ) / (4.0 * eps**2)
            got = sp.second_derivative(0, 1)
            assert np.linalg.norm(got - fd_mixed) <= 1e-6 * np.linalg.norm(fd_mixed)

            fd_diag = (prop(eps, 0) - 2.0 * prop(0, 0) + prop(-eps, 0)) / eps**2
            got_d = sp.second_derivative(0, 0)
            assert np.linalg.norm(got_d - fd_diag) <= 1e-6 * np.linalg.norm(fd_diag)

    def test_first_derivative_fd_oracle(self, rng):
        h = random_hermitian(rng, 4, 1.0)
        hk = random_hermitian(rng, 4, 3.0)
        dt = 0.8
        sp = slice_propagator_with_derivs(h, [hk], dt, order=1)
        eps = 1e-5
        fd = (expm(-1j * dt * (h + eps * hk)) - expm(-1j * dt * (h - eps * hk))) / (2 * eps)
        assert np.linalg.norm(sp.dp[0] - fd) <= 1e-6 * np.linalg.norm(fd)

    def test_block_reads_match_dense_exponential(self, rng):
        h = random_hermitian(rng, 5, 1.2)
        hi = random_hermitian(rng, 5, 2.0)
        hj = random_hermitian(rng, 5, 2.0)
        dt = 0.6
        n = 5
        e_ij = dense_augmented_3x3(h, hi, hj, dt)
        e_ji = dense_augmented_3x3(h, hj, hi, dt)

        # Diagonal blocks of the dense exponential agree with plain expm.
        p_plain = expm(-1j * dt * h)
        for k in range(3):
            blk = e_ij[k * n : (k + 1) * n, k * n : (k + 1) * n]
            assert np.linalg.norm(blk - p_plain) <= 1e-12 * np.linalg.norm(p_plain)

        sp = slice_propagator_with_derivs(h, [hi, hj], dt, order=2)
        scale = np.linalg.norm(p_plain)
        assert np.linalg.norm(sp.p - p_plain) <= 1e-12 * scale
        # Superdiagonals carry the first derivatives.
        assert np.linalg.norm(sp.dp[0] - e_ij[:n, n : 2 * n]) <= 1e-12 * scale
        assert np.linalg.norm(sp.dp[1] - e_ij[n : 2 * n, 2 * n :]) <= 1e-12 * scale
        # Top-right blocks of the two orderings sum to the second derivative.
        d2 = e_ij[:n, 2 * n :] + e_ji[:n, 2 * n :]
        assert np.linalg.norm(sp.second_derivative(0, 1) - d2) <= 1e-12 * np.linalg.norm(d2)

    def test_two_by_two_matches_three_by_three(self, rng):
        h = random_hermitian(rng, 4, 1.0)
        hk = random_hermitian(rng, 4, 2.0)
        other = random_hermitian(rng, 4, 2.0)
        dt = 0.5
        first = slice_propagator_with_derivs(h, [hk, other], dt, order=1)
        second = slice_propagator_with_derivs(h, [hk, other], dt, order=2)
        assert np.linalg.norm(first.dp[0] - second.dp[0]) <= 1e-12 * np.linalg.norm(first.dp[0])
        assert np.linalg.norm(first.p - second.p) <= 1e-12

    def test_pair_swap_symmetry(self, rng):
        h = random_hermitian(rng, 4, 1.0)
        hi = random_hermitian(rng, 4, 2.0)
        hj = random_hermitian(rng, 4, 2.0)
        a = slice_propagator_with_derivs(h, [hi, hj], 0.5, order=2, pairs=[(0, 1)])
        b = slice_propagator_with_derivs(h, [hj, hi], 0.5, order=2, pairs=[(0, 1)])
        assert np.linalg.norm(
            a.second_derivative(0, 1) - b.second_derivative(1, 0)
        ) <= 1e-12 * np.linalg.norm(a.second_derivative(0, 1))

    def test_unitarity_without_relaxation(self, rng):
        h = random_hermitian(rng, 6, 2.0)
        sp = slice_propagator_with_derivs(h, [], 0.4, order=1)
        assert np.linalg.norm(sp.p.conj().T @ sp.p - np.eye(6)) < 1e-10

    def test_dimension_mismatch(self, rng):
        with pytest.raises(ValueError, match="dimension"):
            slice_propagator_with_derivs(np.eye(4), [np.eye(3)], 0.1, order=1)

    def test_bad_order(self):
        with pytest.raises(ValueError, match="order"):
            slice_propagator_with_derivs(np.eye(2), [], 0.1, order=3)

    def test_bad_pair(self):
        with pytest.raises(ValueError, match="unknown channel"):
            slice_propagator_with_derivs(np.eye(2), [np.eye(2)], 0.1, order=2, pairs=[(0, 1)])
