"""Fidelity functional, gradient and Hessian against independent oracles."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from newton_grape.expm_cache import ExpmCache
from newton_grape.grape_core import (
    ControlProblem,
    ControlSequence,
    PenaltySpec,
    fidelity,
    fidelity_gradient,
    fidelity_hessian,
)
from newton_grape.grape_core import evaluate_with_sweeps
from newton_grape.prop_derivs import expm, slice_propagator_with_derivs
from newton_grape.spin_model import (
    ChannelSpec,
    SpinSystem,
    StateSpec,
    build_controls,
    build_drift,
    build_state,
)
from conftest import central_diff_grad, central_diff_jac, random_two_spin_problem


def grad_of(problem, seq):
    k, n = seq.n_channels, seq.n_slices

    def j_of(flat):
        return fidelity(problem, ControlSequence.from_flat(flat, k, n)).j

    return j_of


class TestFidelity:
    def test_identity_propagators_give_unity(self):
        system = SpinSystem(("1H", "13C"), 9.4, (0.0, 0.0), {})
        state = build_state(system, StateSpec("lz", (0,)))
        problem = ControlProblem(
            drift=np.zeros((16, 16), dtype=complex),
            controls=(build_controls(system, [ChannelSpec((0,), "x")])[0],),
            rho0=state,
            delta=state,
            dt=0.1,
            n_slices=3,
        )
        seq = ControlSequence(np.zeros((1, 3)))
        report = fidelity(problem, seq)
        assert_allclose(report.j, 1.0, atol=1e-14)
        assert report.trajectory_evals == 1

    def test_pi_half_rotation_sign_against_hilbert_oracle(self):
        # One spin, Lz -> Ly under an x pulse with total angle pi/2.  The
        # oracle conjugates the density matrix in Hilbert space directly.
        system = SpinSystem(("1H",), 9.4, (0.0,), {})
        rho0 = build_state(system, StateSpec("lz", (0,)))
        lx = np.array([[0, 0.5], [0.5, 0]], dtype=complex)
        ly = np.array([[0, -0.5j], [0.5j, 0]], dtype=complex)
        lz = np.array([[0.5, 0], [0, -0.5]], dtype=complex)
        delta_vec = ly.ravel() / np.linalg.norm(ly.ravel())
        n_slices, dt = 4, 0.05
        amp = (np.pi / 2.0) / (n_slices * dt)
        problem = ControlProblem(
            drift=np.zeros((4, 4), dtype=complex),
            controls=(build_controls(system, [ChannelSpec((0,), "x")])[0],),
            rho0=rho0,
            delta=build_state(system, StateSpec("lz", (0,))).__class__(delta_vec),
            dt=dt,
            n_slices=n_slices,
        )
        seq = ControlSequence(np.full((1, n_slices), amp))
        report = fidelity(problem, seq)
        assert_allclose(abs(report.j), 1.0, atol=1e-12)

        u = expm(-1j * (np.pi / 2.0) * lx)
        rho_t = u @ (lz / np.linalg.norm(lz.ravel())) @ u.conj().T
        oracle = np.real(np.vdot(delta_vec, rho_t.ravel()))
        assert_allclose(report.j, oracle, atol=1e-12)

    def test_orthogonal_target_gives_zero(self):
        # Unit (identity) component is invariant and orthogonal to traceless
        # rho0; with zero controls the overlap stays zero.
        system = SpinSystem(("1H",), 9.4, (7.0,), {})
        ident = np.eye(2, dtype=complex).ravel()
        delta = build_state(system, StateSpec("lz", (0,))).__class__(
            ident / np.linalg.norm(ident)
        )
        problem = ControlProblem(
            drift=build_drift(system),
            controls=(build_controls(system, [ChannelSpec((0,), "x")])[0],),
            rho0=build_state(system, StateSpec("lz", (0,))),
            delta=delta,
            dt=0.01,
            n_slices=3,
        )
        report = fidelity(problem, ControlSequence(np.zeros((1, 3))))
        assert_allclose(report.j, 0.0, atol=1e-12)

    def test_refinement_invariance(self, rng):
        # Halving dt while doubling N with repeated amplitudes leaves the
        # piecewise-constant waveform, and hence J, unchanged.
        problem, seq = random_two_spin_problem(rng, n_slices=4)
        refined = ControlProblem(
            drift=problem.drift,
            controls=problem.controls,
            rho0=problem.rho0,
            delta=problem.delta,
            dt=problem.dt / 2.0,
            n_slices=8,
            ensemble_scalings=problem.ensemble_scalings,
        )
        seq_ref = ControlSequence(np.repeat(seq.amplitudes, 2, axis=1))
        assert_allclose(
            fidelity(problem, seq).j, fidelity(refined, seq_ref).j, atol=1e-10
        )

    def test_dimension_mismatch(self, rng):
        problem, seq = random_two_spin_problem(rng)
        with pytest.raises(ValueError, match="does not match"):
            fidelity(problem, ControlSequence(np.zeros((3, 4))))

    def test_non_finite_amplitudes(self):
        with pytest.raises(ValueError, match="finite"):
            ControlSequence(np.array([[np.inf]]))


class TestGradient:
    def test_zero_control_operators_zero_gradient(self, rng):
        problem, seq = random_two_spin_problem(rng)
        zeroed = ControlProblem(
            drift=problem.drift,
            controls=tuple(np.zeros_like(c) for c in problem.controls),
            rho0=problem.rho0,
            delta=problem.delta,
            dt=problem.dt,
            n_slices=problem.n_slices,
        )
        report = fidelity_gradient(zeroed, seq)
        assert_allclose(report.grad, np.zeros(problem.n_vars), atol=1e-14)

    def test_fd_oracle(self, rng):
        problem, seq = random_two_spin_problem(rng, n_slices=4)
        report = fidelity_gradient(problem, seq)
        fd = central_diff_grad(grad_of(problem, seq), seq.flatten())
        assert_allclose(report.grad, fd, rtol=1e-6, atol=1e-6 * np.max(np.abs(fd)))

    def test_single_slice_single_channel(self, rng):
        problem, _ = random_two_spin_problem(rng, n_slices=1, n_channels=1)
        seq = ControlSequence(np.array([[0.37]]))
        report = fidelity_gradient(problem, seq)
        sp = slice_propagator_with_derivs(
            problem.drift + 0.37 * problem.controls[0],
            list(problem.controls),
            problem.dt,
            order=1,
        )
        direct = np.real(
            np.vdot(problem.delta.coefficients, sp.dp[0] @ problem.rho0.coefficients)
        )
        assert_allclose(report.grad[0], direct, rtol=1e-12)

    def test_trajectory_accounting(self, rng):
        problem, seq = random_two_spin_problem(rng, ensemble=(0.9, 1.0, 1.1))
        assert fidelity(problem, seq).trajectory_evals == 3
        assert fidelity_gradient(problem, seq).trajectory_evals == 6
        assert fidelity_hessian(problem, seq).trajectory_evals == 6

    def test_ensemble_chain_rule_fd(self, rng):
        problem, seq = random_two_spin_problem(rng, n_slices=3, ensemble=(0.8, 1.2))
        report = fidelity_gradient(problem, seq)
        fd = central_diff_grad(grad_of(problem, seq), seq.flatten())
        assert_allclose(report.grad, fd, rtol=1e-6, atol=1e-6 * np.max(np.abs(fd)))


class TestHessian:
    def test_fd_of_gradient_oracle(self, rng):
        problem, seq = random_two_spin_problem(rng, n_slices=3)
        report = fidelity_hessian(problem, seq)
        k, n = seq.n_channels, seq.n_slices

        def g_of(flat):
            return fidelity_gradient(
                problem, ControlSequence.from_flat(flat, k, n)
            ).grad

        fd = central_diff_jac(g_of, seq.flatten())
        fd = (fd + fd.T) / 2.0
        assert np.max(np.abs(report.hess - fd)) <= 1e-5 * np.max(np.abs(fd))

    def test_single_slice_no_cross_terms(self, rng):
        problem, _ = random_two_spin_problem(rng, n_slices=1)
        seq = ControlSequence(np.array([[0.3], [-0.8]]))
        report = fidelity_hessian(problem, seq)
        assert report.hess.shape == (2, 2)

        def g_of(flat):
            return fidelity_gradient(
                problem, ControlSequence.from_flat(flat, 2, 1)
            ).grad

        fd = central_diff_jac(g_of, seq.flatten())
        assert_allclose(report.hess, (fd + fd.T) / 2.0, atol=1e-7)

    def test_symmetry(self, rng):
        problem, seq = random_two_spin_problem(rng, n_slices=3)
        report = fidelity_hessian(problem, seq)
        assert_allclose(report.hess, report.hess.T, atol=0)
        assert report.hess_asymmetry <= 1e-9 * np.linalg.norm(report.hess)

    def test_ensemble_hessian_fd(self, rng):
        problem, seq = random_two_spin_problem(rng, n_slices=2, ensemble=(0.9, 1.1))
        report = fidelity_hessian(problem, seq)
        k, n = 2, 2

        def g_of(flat):
            return fidelity_gradient(
                problem, ControlSequence.from_flat(flat, k, n)
            ).grad

        fd = central_diff_jac(g_of, seq.flatten())
        assert np.max(np.abs(report.hess - (fd + fd.T) / 2)) <= 1e-5 * np.max(np.abs(fd))


class TestPenaltiesInObjective:
    def test_penalty_enters_with_minus_sign(self, rng):
        problem, seq = random_two_spin_problem(rng)
        spec = PenaltySpec("norm_square", np.full(problem.n_vars, 0.01))
        with_pen = ControlProblem(
            drift=problem.drift,
            controls=problem.controls,
            rho0=problem.rho0,
            delta=problem.delta,
            dt=problem.dt,
            n_slices=problem.n_slices,
            penalties=(spec,),
        )
        plain = fidelity(problem, seq)
        penalized = fidelity(with_pen, seq)
        expected = 0.01 * float(np.sum(seq.flatten() ** 2))
        assert_allclose(plain.j - penalized.j, expected, rtol=1e-12)
        assert_allclose(penalized.penalty_value, expected, rtol=1e-12)
        assert_allclose(penalized.raw_fidelity, plain.j, rtol=1e-12)

    def test_penalized_gradient_fd(self, rng):
        spec = PenaltySpec("norm_square", np.full(8, 0.05))
        problem, seq = random_two_spin_problem(rng, n_slices=4, penalties=(spec,))
        report = fidelity_gradient(problem, seq)
        fd = central_diff_grad(grad_of(problem, seq), seq.flatten())
        assert_allclose(report.grad, fd, rtol=1e-6, atol=1e-6 * np.max(np.abs(fd)))

    def test_penalty_applied_to_nominal_not_scaled(self, rng):
        # The instrument limit constrains the programmed waveform: identical
        # penalty value whatever the ensemble scalings.
        spec = PenaltySpec("norm_square", np.full(8, 0.05))
        problem, seq = random_two_spin_problem(
            rng, n_slices=4, ensemble=(0.5, 1.5), penalties=(spec,)
        )
        single, _ = random_two_spin_problem(rng, n_slices=4, penalties=(spec,))
        assert_allclose(
            fidelity(problem, seq).penalty_value,
            0.05 * float(np.sum(seq.flatten() ** 2)),
            rtol=1e-12,
        )


class TestEnsembleReduction:
    def test_unit_scaling_reproduces_single_system(self, rng):
        problem, seq = random_two_spin_problem(rng, n_slices=3)
        ensemble = ControlProblem(
            drift=problem.drift,
            controls=problem.controls,
            rho0=problem.rho0,
            delta=problem.delta,
            dt=problem.dt,
            n_slices=problem.n_slices,
            ensemble_scalings=(1.0,),
        )
        a = fidelity_hessian(problem, seq)
        b = fidelity_hessian(ensemble, seq)
        assert a.j == b.j
        assert (a.grad == b.grad).all()
        assert (a.hess == b.hess).all()


class TestSweepReuse:
    def test_hessian_topup_costs_no_trajectories(self, rng):
        problem, seq = random_two_spin_problem(rng, n_slices=3)
        report1, sweeps = evaluate_with_sweeps(problem, seq, 1)
        assert report1.trajectory_evals == 2
        report2, _ = evaluate_with_sweeps(problem, seq, 2, reuse=sweeps)
        assert report2.trajectory_evals == 0
        fresh = fidelity_hessian(problem, seq)
        assert report2.j == fresh.j
        assert (report2.grad == fresh.grad).all()
        assert (report2.hess == fresh.hess).all()

    def test_workers_bitwise_identical(self, rng):
        problem, seq = random_two_spin_problem(rng, n_slices=4)
        a = fidelity_hessian(problem, seq, workers=1)
        b = fidelity_hessian(problem, seq, workers=3)
        assert a.j == b.j
        assert (a.hess == b.hess).all()


class TestCacheIntegration:
    def test_fidelity_identical_with_cache(self, rng):
        problem, seq = random_two_spin_problem(rng, n_slices=4)
        plain = fidelity(problem, seq)
        store = ExpmCache(threshold=1)
        cached = fidelity(problem, seq, cache=store)
        assert plain.j == cached.j
        assert store.stats.misses == 4
        again = fidelity(problem, seq, cache=store)
        assert again.j == plain.j
        assert store.stats.misses == 4  # all hits the second time
        assert store.stats.hits == 4
