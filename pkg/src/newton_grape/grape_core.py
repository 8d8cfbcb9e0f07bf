"""Fidelity functional, gradient and exact Hessian of the GRAPE objective.

The objective is J = Re<delta| P_N ... P_1 |rho0> - J_RF, with slice
propagators P_n = exp(-i(H0 + sum_k c_kn H_k + iR) dt).  The gradient is
assembled from one forward state sweep and one backward costate sweep; the
Hessian adds same-slice second-derivative blocks and cross-slice blocks
that re-use the first derivatives already extracted from the 3x3 augmented
exponentials.  Control amplitudes are flattened slice-major: flat index
n*K + k for slice n and channel k (0-based).

Ensembles model power miscalibration: member m propagates amplitudes scaled
by s_m, and the chain rule multiplies member gradients by s_m and Hessians
by s_m**2 before averaging.  Penalties act once, on the nominal sequence.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray
from threadpoolctl import threadpool_limits

from .expm_cache import ExpmCache, cached_expm
from .prop_derivs import slice_propagator_with_derivs
from .spin_model import StateVector

__all__ = [
    "ControlProblem",
    "ControlSequence",
    "FidelityReport",
    "PenaltySpec",
    "fidelity",
    "fidelity_gradient",
    "fidelity_hessian",
    "penalty_eval",
    "diff_matrix",
]

PENALTY_KINDS = ("norm_square", "derivative_norm_square", "spillout")


@dataclass(frozen=True)
class PenaltySpec:
    """One penalty functional on the flattened control sequence.

    kind 'norm_square':            J = sum_k w_k c_k^2
    kind 'derivative_norm_square': J = sum_k w_k [D c]_k^2
    kind 'spillout':               J = sum_k w_k (c_k - u_k)^2 [c_k > u_k]
                                     + sum_k w_k (c_k - l_k)^2 [c_k < l_k]
    """

    kind: str
    weights: NDArray[np.float64]
    upper: NDArray[np.float64] | None = None
    lower: NDArray[np.float64] | None = None
    transform: NDArray[np.float64] | None = None

    def __post_init__(self):
        if self.kind not in PENALTY_KINDS:
            raise ValueError(f"unknown penalty kind {self.kind!r}")
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 1 or (w < 0).any():
            raise ValueError("weights must be a nonnegative vector")
        object.__setattr__(self, "weights", w)
        if self.kind == "spillout":
            if self.upper is None or self.lower is None:
                raise ValueError("spillout penalty needs upper and lower bounds")
            u = np.asarray(self.upper, dtype=float)
            l = np.asarray(self.lower, dtype=float)
            if u.shape != w.shape or l.shape != w.shape:
                raise ValueError("bounds must match the weight vector shape")
            if (u < l).any():
                raise ValueError("upper bounds must be >= lower bounds")
            object.__setattr__(self, "upper", u)
            object.__setattr__(self, "lower", l)
        if self.kind == "derivative_norm_square":
            if self.transform is None:
                raise ValueError("derivative penalty needs a transform matrix")
            d = np.asarray(self.transform, dtype=float)
            if d.ndim != 2 or d.shape[0] != w.shape[0]:
                raise ValueError("transform rows must match the weight vector")
            object.__setattr__(self, "transform", d)


@dataclass(frozen=True)
class ControlProblem:
    """State-transfer problem data: operators, endpoints, grid and penalties.

    ``drift`` must already contain +iR when a relaxation operator applies.
    """

    drift: NDArray[np.complex128]
    controls: tuple[NDArray[np.complex128], ...]
    rho0: StateVector
    delta: StateVector
    dt: float
    n_slices: int
    penalties: tuple[PenaltySpec, ...] = ()
    ensemble_scalings: tuple[float, ...] = (1.0,)

    def __post_init__(self):
        drift = np.asarray(self.drift, dtype=complex)
        dim = drift.shape[0]
        if drift.shape != (dim, dim):
            raise ValueError("drift must be square")
        object.__setattr__(self, "drift", drift)
        ctrls = tuple(np.asarray(c, dtype=complex) for c in self.controls)
        for c in ctrls:
            if c.shape != (dim, dim):
                raise ValueError("all control operators must match the drift dimension")
        object.__setattr__(self, "controls", ctrls)
        for vec in (self.rho0, self.delta):
            if vec.coefficients.shape != (dim,):
                raise ValueError("state vectors must match the operator dimension")
        if self.n_slices < 1:
            raise ValueError("n_slices must be >= 1")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        scalings = tuple(float(s) for s in self.ensemble_scalings)
        if not scalings or any(s <= 0 for s in scalings):
            raise ValueError("ensemble_scalings must be a nonempty list of positive reals")
        object.__setattr__(self, "ensemble_scalings", scalings)
        object.__setattr__(self, "penalties", tuple(self.penalties))

    @property
    def n_channels(self) -> int:
        return len(self.controls)

    @property
    def dim(self) -> int:
        return self.drift.shape[0]

    @property
    def n_vars(self) -> int:
        return self.n_channels * self.n_slices


@dataclass(frozen=True)
class ControlSequence:
    """K x N real amplitude array in rad/s, channel-by-slice."""

    amplitudes: NDArray[np.float64]

    def __post_init__(self):
        a = np.asarray(self.amplitudes, dtype=float)
        if a.ndim != 2:
            raise ValueError("amplitudes must be a K x N array")
        if not np.isfinite(a).all():
            raise ValueError("amplitudes must be finite")
        object.__setattr__(self, "amplitudes", a)

    @property
    def n_channels(self) -> int:
        return self.amplitudes.shape[0]

    @property
    def n_slices(self) -> int:
        return self.amplitudes.shape[1]

    def flatten(self) -> NDArray[np.float64]:
        """Slice-major flattening: flat[n*K + k] = amplitudes[k, n]."""
        return self.amplitudes.T.ravel().copy()

    @classmethod
    def from_flat(cls, flat: NDArray[np.float64], n_channels: int, n_slices: int) -> "ControlSequence":
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (n_channels * n_slices,):
            raise ValueError("flat vector length must be K*N")
        return cls(flat.reshape(n_slices, n_channels).T)


@dataclass
class FidelityReport:
    """Objective value with optional derivatives and trajectory accounting.

    ``j`` is the full functional (overlap minus penalties); the overlap and
    penalty parts are reported separately for logging.  ``trajectory_evals``
    counts full system propagations: one forward pass per ensemble member,
    plus one costate pass per member when derivatives were requested.
    """

    j: float
    grad: NDArray[np.float64] | None = None
    hess: NDArray[np.float64] | None = None
    trajectory_evals: int = 0
    raw_fidelity: float = 0.0
    penalty_value: float = 0.0
    hess_asymmetry: float | None = None


def diff_matrix(n: int, order: int, dt: float = 1.0) -> NDArray[np.float64]:
    """Finite-difference differentiation matrix for the derivative penalty.

    Order 1 is forward differences over 1/dt with a zero last row; order 2
    is the central second difference with one-sided copies at both ends.
    """
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    if n < order + 1:
        raise ValueError(f"need at least {order + 1} points for order {order}")
    d = np.zeros((n, n))
    if order == 1:
        for i in range(n - 1):
            d[i, i] = -1.0
            d[i, i + 1] = 1.0
        return d / dt
    for i in range(1, n - 1):
        d[i, i - 1] = 1.0
        d[i, i] = -2.0
        d[i, i + 1] = 1.0
    d[0, :3] = (1.0, -2.0, 1.0)
    d[-1, -3:] = (1.0, -2.0, 1.0)
    return d / dt**2


def penalty_eval(spec: PenaltySpec, c: NDArray[np.float64]):
    """Value, gradient and Hessian of one penalty on the flattened sequence."""
    c = np.asarray(c, dtype=float)
    w = spec.weights
    if spec.kind == "derivative_norm_square":
        dmat = spec.transform
        if dmat.shape[1] != c.shape[0]:
            raise ValueError("transform columns must match the sequence length")
        dc = dmat @ c
        value = float(np.sum(w * dc**2))
        grad = 2.0 * dmat.T @ (w * dc)
        hess = 2.0 * dmat.T @ (w[:, None] * dmat)
        return value, grad, hess
    if w.shape != c.shape:
        raise ValueError("weights must match the flattened sequence length")
    if spec.kind == "norm_square":
        value = float(np.sum(w * c**2))
        grad = 2.0 * w * c
        hess = np.diag(2.0 * w)
        return value, grad, hess
    above = c > spec.upper
    below = c < spec.lower
    over = np.where(above, c - spec.upper, 0.0) + np.where(below, c - spec.lower, 0.0)
    value = float(np.sum(w * over**2))
    grad = 2.0 * w * over
    hess = np.diag(2.0 * w * (above | below))
    return value, grad, hess


def _combined_penalty(problem: ControlProblem, flat: NDArray[np.float64], order: int):
    value = 0.0
    grad = np.zeros_like(flat) if order >= 1 else None
    hess = np.zeros((flat.size, flat.size)) if order >= 2 else None
    for spec in problem.penalties:
        v, g, h = penalty_eval(spec, flat)
        value += v
        if grad is not None:
            grad += g
        if hess is not None:
            hess += h
    return value, grad, hess


def _member_slices(problem, amps, order, pairs, cache, executor):
    """Propagators (and derivatives) for every slice at given amplitudes."""
    drift, controls, dt = problem.drift, problem.controls, problem.dt
    ctrl_stack = np.stack(controls) if controls else np.zeros((0, problem.dim, problem.dim), complex)

    def generator(n):
        if ctrl_stack.shape[0]:
            return drift + np.tensordot(amps[:, n], ctrl_stack, axes=1)
        return drift

    if order == 0:
        def one(n):
            return cached_expm(cache, -1j * generator(n), dt)
    else:
        def one(n):
            return slice_propagator_with_derivs(generator(n), list(controls), dt, order, pairs)

    indices = range(problem.n_slices)
    if executor is None:
        return [one(n) for n in indices]
    return list(executor.map(one, indices))


def _evaluate(
    problem: ControlProblem,
    seq: ControlSequence,
    order: int,
    cache: ExpmCache | None = None,
    workers: int = 1,
) -> FidelityReport:
    # BLAS threading loses badly on the many small matrices handled here;
    # parallelism is over slices instead, through the workers argument.
    with threadpool_limits(limits=1, user_api="blas"):
        report, _ = _evaluate_serial_blas(problem, seq, order, cache, workers)
    return report


def evaluate_with_sweeps(problem, seq, order, cache=None, workers=1, reuse=None):
    """Evaluation that can retain or re-use the state/costate sweeps.

    When ``reuse`` holds the sweeps of an earlier evaluation at the same
    amplitudes, no new system propagation is performed: the trajectory count
    of the returned report is zero and only the exponential-derivative work
    is redone.  This is how the optimizer upgrades an accepted line-search
    point to a Hessian without re-propagating.
    """
    with threadpool_limits(limits=1, user_api="blas"):
        return _evaluate_serial_blas(problem, seq, order, cache, workers, reuse)


def _evaluate_serial_blas(
    problem: ControlProblem,
    seq: ControlSequence,
    order: int,
    cache: ExpmCache | None = None,
    workers: int = 1,
    reuse: list[dict] | None = None,
):
    kch, nsl = problem.n_channels, problem.n_slices
    if seq.amplitudes.shape != (kch, nsl):
        raise ValueError(
            f"sequence shape {seq.amplitudes.shape} does not match problem ({kch}, {nsl})"
        )
    flat = seq.flatten()
    nvar = flat.size
    pen_value, pen_grad, pen_hess = _combined_penalty(problem, flat, order)
    pairs = [(i, j) for i in range(kch) for j in range(i, kch)] if order >= 2 else None

    raw = 0.0
    grad = np.zeros(nvar) if order >= 1 else None
    hess = np.zeros((nvar, nvar)) if order >= 2 else None
    trajectories = 0
    members = problem.ensemble_scalings
    sweeps: list[dict] = []
    executor = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for im, s_m in enumerate(members):
            amps = s_m * seq.amplitudes
            slices = _member_slices(problem, amps, order, pairs, cache, executor)
            props = [sl if order == 0 else sl.p for sl in slices]

            if reuse is not None:
                rho = reuse[im]["rho"]
                chi = reuse[im]["chi"]
            else:
                # Forward state sweep: the serial trajectory.
                rho = [problem.rho0.coefficients]
                for p in props:
                    rho.append(p @ rho[-1])
                trajectories += 1
                chi = None
            raw += float(np.real(np.vdot(problem.delta.coefficients, rho[-1]))) / len(members)
            if order == 0:
                sweeps.append({"rho": rho, "chi": None})
                continue

            if chi is None:
                # Backward costate sweep re-uses the stored propagators.
                chi = [None] * (nsl + 1)
                chi[nsl] = problem.delta.coefficients
                for n in range(nsl, 1, -1):
                    chi[n - 1] = props[n - 1].conj().T @ chi[n]
                trajectories += 1
            sweeps.append({"rho": rho, "chi": chi})

            dps = np.stack([np.stack([sl.dp[k] for k in range(kch)]) for sl in slices])
            member_grad = np.empty(nvar)
            for n in range(1, nsl + 1):
                dpv = dps[n - 1] @ rho[n - 1]
                member_grad[(n - 1) * kch : n * kch] = np.real(dpv @ np.conj(chi[n]))
            grad += (s_m / len(members)) * member_grad

            if order >= 2:
                member_hess = np.zeros((nvar, nvar))
                for n in range(1, nsl + 1):
                    rows = slice((n - 1) * kch, n * kch)
                    block = np.empty((kch, kch))
                    for (i, j) in pairs:
                        val = float(
                            np.real(np.vdot(chi[n], slices[n - 1].d2p[(i, j)] @ rho[n - 1]))
                        )
                        block[i, j] = block[j, i] = val
                    member_hess[rows, rows] = block
                for m in range(1, nsl):
                    cols = slice((m - 1) * kch, m * kch)
                    v = (dps[m - 1] @ rho[m - 1]).T  # dim x K, one column per channel
                    for n in range(m + 1, nsl + 1):
                        rows = slice((n - 1) * kch, n * kch)
                        cross = np.einsum(
                            "jdk,d->jk", dps[n - 1] @ v, np.conj(chi[n])
                        ).real
                        member_hess[rows, cols] = cross
                        member_hess[cols, rows] = cross.T
                        if n < nsl:
                            v = props[n - 1] @ v
                hess += (s_m**2 / len(members)) * member_hess
    finally:
        if executor is not None:
            executor.shutdown()

    j = raw - pen_value
    report = FidelityReport(
        j=j,
        trajectory_evals=trajectories,
        raw_fidelity=raw,
        penalty_value=pen_value,
    )
    if order >= 1:
        report.grad = grad - pen_grad
    if order >= 2:
        report.hess_asymmetry = float(np.linalg.norm(hess - hess.T))
        report.hess = (hess + hess.T) / 2.0 - pen_hess
    return report, sweeps


def fidelity(problem, seq, cache=None, workers=1) -> FidelityReport:
    """Fidelity functional J only; one forward trajectory per member."""
    return _evaluate(problem, seq, 0, cache, workers)


def fidelity_gradient(problem, seq, cache=None, workers=1) -> FidelityReport:
    """J and its exact gradient via 2x2 augmented exponentials."""
    return _evaluate(problem, seq, 1, cache, workers)


def fidelity_hessian(problem, seq, cache=None, workers=1) -> FidelityReport:
    """J, gradient and the exact Hessian via 3x3 augmented exponentials."""
    return _evaluate(problem, seq, 2, cache, workers)
