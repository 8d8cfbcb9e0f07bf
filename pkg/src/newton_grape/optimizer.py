"""Newton-Raphson driver with Hessian regularization and baseline methods.

Everything here minimizes f; the GRAPE wrapper hands in f = -J so that the
fidelity is maximized and penalties are minimized.  A Newton step first
attempts a Cholesky factorization of the (symmetrized) Hessian; only when
that fails does it regularize, either by eigenvalue shifting (TRM) or by
shifting the spectrum of the gradient-augmented Hessian (RFO).  All methods
share one strong-Wolfe line search with bracketing and cubic-interpolation
sectioning; Newton-type methods always try the unit step first so terminal
convergence stays quadratic.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.typing import NDArray
from scipy.linalg import cho_factor, cho_solve

from .grape_core import ControlProblem, ControlSequence, evaluate_with_sweeps

__all__ = [
    "RegularizerSettings",
    "LineSearchSettings",
    "OptimSettings",
    "OptimLog",
    "IterationRecord",
    "ObjectiveValue",
    "OptimizationError",
    "try_cholesky",
    "trm_regularize",
    "rfo_step",
    "line_search",
    "minimize",
    "optimize",
]

logger = logging.getLogger(__name__)

METHODS = ("grad_descent", "lbfgs", "bfgs", "newton_trm", "newton_rfo")


@dataclass(frozen=True)
class RegularizerSettings:
    """Knobs for the TRM and RFO Hessian regularizers.

    ``delta`` is the eigenvalue floor of the explicit TRM shift; ``phi`` is
    the damping factor applied to the RFO scaling parameter while the
    regularized Hessian's condition number exceeds eps**(-1/cond_power);
    ``alpha0`` overrides the automatic choice sqrt(1/|lambda_min|) when set.
    ``growth_phi`` (> 1), when set, re-enlarges alpha up to ``alpha_max``
    while the condition number stays below the cap; off by default.
    """

    method: str = "rfo"
    delta: float = 1.0
    phi: float = 0.9
    alpha_max: float = 1.0
    cond_power: int = 3
    machine_eps: float = float(np.finfo(np.float64).eps)
    trm_variant: str = "iterative"
    alpha0: float | None = None
    growth_phi: float | None = None
    max_cond_iters: int = 80

    def __post_init__(self):
        if self.method not in ("cholesky_only", "trm", "rfo"):
            raise ValueError(f"unknown regularizer method {self.method!r}")
        if not 0.0 < self.phi < 1.0:
            raise ValueError("phi must lie in (0, 1)")
        if self.alpha_max < 1.0:
            raise ValueError("alpha_max must be >= 1")
        if self.delta <= 0.0:
            raise ValueError("delta must be positive")
        if self.trm_variant not in ("iterative", "eigenvalue"):
            raise ValueError(f"unknown trm_variant {self.trm_variant!r}")
        if self.growth_phi is not None and self.growth_phi <= 1.0:
            raise ValueError("growth_phi must exceed 1 when set")

    @property
    def cond_cap(self) -> float:
        return self.machine_eps ** (-1.0 / self.cond_power)


@dataclass(frozen=True)
class LineSearchSettings:
    c1: float = 1e-4
    c2: float = 0.9
    max_evals: int = 20

    def __post_init__(self):
        if not 0.0 < self.c1 < self.c2 < 1.0:
            raise ValueError("need 0 < c1 < c2 < 1")
        if self.max_evals < 1:
            raise ValueError("max_evals must be >= 1")


@dataclass(frozen=True)
class OptimSettings:
    grad_tol: float = 1e-6
    max_iterations: int = 200
    trajectory_budget: int | None = None
    target_objective: float | None = None  # stop once f <= target (J >= -target)
    lbfgs_memory: int = 20
    regularizer: RegularizerSettings = field(default_factory=RegularizerSettings)
    line_search: LineSearchSettings = field(default_factory=LineSearchSettings)


@dataclass
class ObjectiveValue:
    f: float
    grad: NDArray[np.float64]
    hess: NDArray[np.float64] | None = None
    cost: int = 1
    extra: dict = field(default_factory=dict)


@dataclass
class IterationRecord:
    """One optimizer iteration: state at the iterate plus the step taken."""

    iteration: int
    f: float
    grad_inf: float
    step_norm: float = float("nan")
    sigma: float = float("nan")
    alpha: float = float("nan")
    cond_estimate: float = float("nan")
    cost_cumulative: int = 0
    ls_evals: int = 0
    ls_alpha: float = float("nan")
    phi0: float = float("nan")
    dphi0: float = float("nan")
    phi_alpha: float = float("nan")
    dphi_alpha: float = float("nan")
    accepted: bool = False
    extra: dict = field(default_factory=dict)


@dataclass
class OptimLog:
    records: list[IterationRecord] = field(default_factory=list)
    termination: str = ""

    def column(self, name: str) -> list:
        return [getattr(r, name) for r in self.records]


class OptimizationError(RuntimeError):
    """Numerical failure inside an optimization; carries the partial log."""

    def __init__(self, message: str, log: OptimLog):
        super().__init__(message)
        self.log = log


def _check_symmetric(h: NDArray) -> NDArray:
    h = np.asarray(h, dtype=float)
    hnorm = np.linalg.norm(h)
    if hnorm > 0 and np.linalg.norm(h - h.T) > 1e-8 * hnorm:
        raise ValueError("matrix is not symmetric within tolerance")
    return h


def try_cholesky(h: NDArray) -> NDArray | None:
    """Lower Cholesky factor of h, or None if h is not positive definite."""
    h = _check_symmetric(h)
    try:
        return np.linalg.cholesky(h)
    except np.linalg.LinAlgError:
        return None


def trm_regularize(h: NDArray, settings: RegularizerSettings) -> NDArray:
    """Shift h by sigma*1 until positive definite (trust-region method).

    The iterative variant starts from the Frobenius-norm trial shift and
    doubles it until Cholesky succeeds; the eigenvalue variant shifts the
    spectrum so its minimum lands on ``settings.delta``.
    """
    h = _check_symmetric(h)
    if not np.isfinite(h).all():
        raise ValueError("matrix contains non-finite entries")
    n = h.shape[0]
    ident = np.eye(n)
    if settings.trm_variant == "eigenvalue":
        lam, q = np.linalg.eigh(h)
        sigma = max(0.0, settings.delta - lam[0])
        return q @ np.diag(lam + sigma) @ q.T
    fro = float(np.linalg.norm(h))
    min_diag = float(np.min(np.diag(h))) if n else 0.0
    sigma = fro - min_diag if min_diag < 0 else fro
    if sigma <= 0.0:
        sigma = 1.0  # degenerate zero Hessian carries no scale information
    while True:
        candidate = h + sigma * ident
        if try_cholesky(candidate) is not None:
            return candidate
        sigma *= 2.0


@dataclass(frozen=True)
class RfoDiagnostics:
    sigma: float
    alpha: float
    cond_estimate: float


def rfo_step(h: NDArray, g: NDArray, settings: RegularizerSettings):
    """Rational-function-optimization step with adaptive scaling.

    Builds the augmented matrix [[a^2 H, a g], [a g^T, 0]], shifts its
    spectrum to nonnegative, and inverts the top-left block of the shifted
    matrix (equal to H + sigma/a^2) against the gradient.  The scaling a
    starts at min(1, 1/sqrt(|lambda_min(H)|)) and is damped by phi while the
    condition number of the regularized block exceeds eps**(-1/n).
    """
    h = _check_symmetric(h)
    g = np.asarray(g, dtype=float)
    if not (np.isfinite(h).all() and np.isfinite(g).all()):
        raise ValueError("non-finite inputs")
    lam = np.linalg.eigvalsh(h)
    lam_min, lam_max = float(lam[0]), float(lam[-1])
    if settings.alpha0 is not None:
        alpha = float(settings.alpha0)
    elif lam_min != 0.0:
        # Scale so the smallest Hessian eigenvalue lands at magnitude one;
        # alpha_max = 1 keeps the conventional 0 < alpha <= 1 regime.
        alpha = 1.0 / np.sqrt(abs(lam_min))
    else:
        alpha = 1.0
    if alpha > settings.alpha_max:
        logger.debug("clamping rfo alpha0 %.3g to alpha_max %.3g", alpha, settings.alpha_max)
        alpha = settings.alpha_max

    def shifted(alpha):
        aug = np.zeros((h.shape[0] + 1, h.shape[0] + 1))
        aug[:-1, :-1] = alpha**2 * h
        aug[:-1, -1] = alpha * g
        aug[-1, :-1] = alpha * g
        w = np.linalg.eigvalsh(aug)
        sigma = max(0.0, -float(w[0]))
        shift = sigma / alpha**2
        cond = np.inf if lam_min + shift <= 0 else (lam_max + shift) / (lam_min + shift)
        return sigma, shift, cond

    sigma, shift, cond = shifted(alpha)
    for _ in range(settings.max_cond_iters):
        if cond <= settings.cond_cap:
            break
        alpha *= settings.phi
        sigma, shift, cond = shifted(alpha)
    if settings.growth_phi is not None:
        while alpha * settings.growth_phi <= settings.alpha_max:
            cand = alpha * settings.growth_phi
            c_sigma, c_shift, c_cond = shifted(cand)
            if c_cond > settings.cond_cap:
                break
            alpha, sigma, shift, cond = cand, c_sigma, c_shift, c_cond

    h_reg = h + shift * np.eye(h.shape[0])
    # Roundoff guard: the shifted block must stay positive definite.
    bump = 16.0 * settings.machine_eps * max(1.0, abs(lam_max))
    for _ in range(60):
        factor = try_cholesky(h_reg)
        if factor is not None:
            break
        shift += bump
        bump *= 2.0
        h_reg = h + shift * np.eye(h.shape[0])
    else:
        raise np.linalg.LinAlgError("rfo regularization failed to reach positive definiteness")
    step = -cho_solve((factor, True), g)
    return step, RfoDiagnostics(sigma=sigma, alpha=alpha, cond_estimate=cond)


@dataclass
class LineSearchResult:
    alpha: float
    f: float
    grad: NDArray[np.float64] | None
    evals: int
    success: bool
    phi0: float
    dphi0: float
    phi_alpha: float
    dphi_alpha: float
    extra: dict = field(default_factory=dict)


def _cubic_min(a, fa, da, b, fb, db):
    """Minimizer of the cubic matching values and slopes at a and b."""
    with np.errstate(all="ignore"):
        d1 = da + db - 3.0 * (fa - fb) / (a - b)
        rad = d1 * d1 - da * db
        if rad < 0.0:
            return None
        d2 = np.sign(b - a) * np.sqrt(rad)
        denom = db - da + 2.0 * d2
        if denom == 0.0:
            return None
        cand = b - (b - a) * (db + d2 - d1) / denom
    return float(cand) if np.isfinite(cand) else None


def line_search(objective, x, direction, settings: LineSearchSettings,
                f0=None, g0=None, initial_step: float = 1.0):
    """Strong-Wolfe line search: bracketing, then cubic-interpolation zoom.

    ``objective(x, order=1)`` must return an ObjectiveValue with f and grad.
    The first trial is ``initial_step`` (unit for Newton-type callers, so the
    pure Newton step is taken whenever it is admissible).  Returns the best
    point found with ``success=False`` if the evaluation budget runs out.
    """
    x = np.asarray(x, dtype=float)
    direction = np.asarray(direction, dtype=float)
    evals = 0

    if f0 is None or g0 is None:
        base = objective(x, 1)
        f0, g0 = base.f, base.grad
        evals += 1
    phi0 = float(f0)
    dphi0 = float(np.dot(g0, direction))
    if dphi0 >= 0.0:
        raise ValueError("line search requires a descent direction")
    c1, c2 = settings.c1, settings.c2

    def phi(a):
        nonlocal evals
        ev = objective(x + a * direction, 1)
        evals += 1
        return ev.f, float(np.dot(ev.grad, direction)), ev

    def wolfe(fa, da, a):
        return fa <= phi0 + c1 * a * dphi0 and abs(da) <= c2 * abs(dphi0)

    best = (np.inf, None)  # (phi value, result tuple)

    def remember(a, fa, da, ev):
        nonlocal best
        if fa < best[0]:
            best = (fa, (a, fa, da, ev))

    def result(a, fa, da, ev, success):
        return LineSearchResult(
            alpha=a, f=fa, grad=ev.grad, evals=evals, success=success,
            phi0=phi0, dphi0=dphi0, phi_alpha=fa, dphi_alpha=da,
            extra=ev.extra,
        )

    def give_up():
        if best[1] is None:
            return LineSearchResult(
                alpha=0.0, f=phi0, grad=np.asarray(g0), evals=evals, success=False,
                phi0=phi0, dphi0=dphi0, phi_alpha=phi0, dphi_alpha=dphi0,
            )
        a, fa, da, ev = best[1]
        return result(a, fa, da, ev, success=False)

    def zoom(lo, f_lo, d_lo, hi, f_hi, d_hi):
        # lo always satisfies Armijo and has the lower function value.
        while evals < settings.max_evals:
            a = _cubic_min(lo, f_lo, d_lo, hi, f_hi, d_hi)
            width = abs(hi - lo)
            inner_lo, inner_hi = min(lo, hi), max(lo, hi)
            if a is None or not np.isfinite(a):
                a = 0.5 * (lo + hi)
            else:
                # Keep the trial inside the bracket with a safeguard margin;
                # clamping beats bisection when the minimizer sits close to
                # an endpoint.
                a = min(max(a, inner_lo + 0.02 * width), inner_hi - 0.02 * width)
            fa, da, ev = phi(a)
            remember(a, fa, da, ev)
            if fa > phi0 + c1 * a * dphi0 or fa >= f_lo:
                hi, f_hi, d_hi = a, fa, da
                continue
            if abs(da) <= c2 * abs(dphi0):
                return result(a, fa, da, ev, success=True)
            if da * (hi - lo) >= 0.0:
                hi, f_hi, d_hi = lo, f_lo, d_lo
            lo, f_lo, d_lo = a, fa, da
        return give_up()

    a_prev, f_prev, d_prev = 0.0, phi0, dphi0
    a = float(initial_step)
    first = True
    while evals < settings.max_evals:
        fa, da, ev = phi(a)
        remember(a, fa, da, ev)
        if fa > phi0 + c1 * a * dphi0 or (not first and fa >= f_prev):
            return zoom(a_prev, f_prev, d_prev, a, fa, da)
        if abs(da) <= c2 * abs(dphi0):
            return result(a, fa, da, ev, success=True)
        if da >= 0.0:
            return zoom(a, fa, da, a_prev, f_prev, d_prev)
        a_prev, f_prev, d_prev = a, fa, da
        a = 3.0 * a
        first = False
    return give_up()


def _lbfgs_direction(g, s_list, y_list):
    q = g.copy()
    alphas = []
    for s, y in zip(reversed(s_list), reversed(y_list)):
        rho = 1.0 / np.dot(y, s)
        a = rho * np.dot(s, q)
        alphas.append(a)
        q -= a * y
    if s_list:
        s, y = s_list[-1], y_list[-1]
        q *= np.dot(s, y) / np.dot(y, y)
    for (s, y), a in zip(zip(s_list, y_list), reversed(alphas)):
        rho = 1.0 / np.dot(y, s)
        b = rho * np.dot(y, q)
        q += (a - b) * s
    return -q


def minimize(objective, x0, method: str, settings: OptimSettings):
    """Drive one of the five methods on a generic smooth objective.

    ``objective(x, order)`` returns an ObjectiveValue; order 2 is requested
    at Newton iterates, order 1 everywhere else.  Returns the best point
    seen and the iteration log.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    newton = method in ("newton_trm", "newton_rfo")
    ls = settings.line_search
    reg = settings.regularizer
    if method == "newton_trm" and reg.method == "rfo":
        reg = replace(reg, method="trm")
    if method == "newton_rfo" and reg.method == "trm":
        reg = replace(reg, method="rfo")

    x = np.asarray(x0, dtype=float).copy()
    log = OptimLog()
    cost = 0
    nvar = x.size

    bfgs_h = np.eye(nvar) if method == "bfgs" else None
    bfgs_first = True
    s_hist: list[np.ndarray] = []
    y_hist: list[np.ndarray] = []

    def fail(message):
        log.termination = message
        raise OptimizationError(message, log)

    try:
        ev = objective(x, 2 if newton else 1)
    except (np.linalg.LinAlgError, FloatingPointError) as exc:
        fail(f"objective evaluation failed: {exc}")
    cost += ev.cost
    best_x, best_f = x.copy(), ev.f

    for it in range(settings.max_iterations):
        g = ev.grad
        grad_inf = float(np.max(np.abs(g))) if g.size else 0.0
        rec = IterationRecord(
            iteration=it, f=ev.f, grad_inf=grad_inf, cost_cumulative=cost,
            extra=dict(ev.extra),
        )
        log.records.append(rec)
        if not np.isfinite(ev.f):
            log.termination = "non-finite objective"
            break
        if grad_inf < settings.grad_tol:
            log.termination = "gradient tolerance reached"
            break
        if settings.target_objective is not None and ev.f <= settings.target_objective:
            log.termination = "target objective reached"
            break
        if settings.trajectory_budget is not None and cost >= settings.trajectory_budget:
            log.termination = "trajectory budget exhausted"
            break

        # Step direction.
        sigma_used = float("nan")
        alpha_used = float("nan")
        cond_est = float("nan")
        if newton:
            h = (ev.hess + ev.hess.T) / 2.0
            lam = np.linalg.eigvalsh(h)
            cond_est = (
                float(np.max(np.abs(lam)) / np.min(np.abs(lam)))
                if np.min(np.abs(lam)) > 0
                else np.inf
            )
            factor = try_cholesky(h)
            if factor is not None:
                direction = -cho_solve((factor, True), g)
                sigma_used = 0.0
                alpha_used = 1.0
            elif method == "newton_trm":
                try:
                    h_reg = trm_regularize(h, reg)
                except np.linalg.LinAlgError as exc:
                    fail(f"TRM regularization failed: {exc}")
                direction = -np.linalg.solve(h_reg, g)
                sigma_used = float(h_reg[0, 0] - h[0, 0])
                alpha_used = 1.0
            else:
                try:
                    direction, diag = rfo_step(h, g, reg)
                except np.linalg.LinAlgError as exc:
                    fail(f"RFO regularization failed: {exc}")
                sigma_used = diag.sigma
                alpha_used = diag.alpha
                cond_est = diag.cond_estimate
        elif method == "bfgs":
            direction = -(bfgs_h @ g)
        elif method == "lbfgs":
            direction = _lbfgs_direction(g, s_hist, y_hist)
        else:
            direction = -g

        dphi0 = float(np.dot(g, direction))
        if dphi0 >= 0.0:
            # Numerical safeguard; regularized Newton guarantees descent.
            logger.warning("non-descent direction at iteration %d; using -grad", it)
            direction = -g
            dphi0 = -float(np.dot(g, g))
            if dphi0 == 0.0:
                log.termination = "zero gradient"
                break

        # Identical line-search protocol for every method: the first trial is
        # always the full predicted step, so a Newton step near the optimum
        # is taken as-is and terminal convergence stays quadratic.
        trial = 1.0

        def counting_objective(z, order):
            nonlocal cost
            val = objective(z, order)
            cost += val.cost
            return val

        try:
            res = line_search(
                counting_objective, x, direction, ls,
                f0=ev.f, g0=g, initial_step=trial,
            )
        except (np.linalg.LinAlgError, FloatingPointError) as exc:
            fail(f"line search failed: {exc}")

        rec.ls_evals = res.evals
        rec.phi0 = res.phi0
        rec.dphi0 = res.dphi0
        if not res.success or res.f >= ev.f:
            log.termination = "line search found no acceptable step"
            break
        rec.accepted = True
        rec.ls_alpha = res.alpha
        rec.phi_alpha = res.phi_alpha
        rec.dphi_alpha = res.dphi_alpha
        rec.sigma = sigma_used
        rec.alpha = alpha_used
        rec.cond_estimate = cond_est
        step = res.alpha * direction
        rec.step_norm = float(np.linalg.norm(step))

        x_new = x + step
        g_new = res.grad
        s_vec = x_new - x
        y_vec = g_new - g
        sy = float(np.dot(s_vec, y_vec))
        if method == "bfgs" and sy > 1e-12 * np.linalg.norm(s_vec) * np.linalg.norm(y_vec):
            if bfgs_first:
                bfgs_h = (sy / np.dot(y_vec, y_vec)) * np.eye(nvar)
                bfgs_first = False
            rho = 1.0 / sy
            v = np.eye(nvar) - rho * np.outer(s_vec, y_vec)
            bfgs_h = v @ bfgs_h @ v.T + rho * np.outer(s_vec, s_vec)
        elif method == "lbfgs" and sy > 1e-12 * np.linalg.norm(s_vec) * np.linalg.norm(y_vec):
            s_hist.append(s_vec)
            y_hist.append(y_vec)
            if len(s_hist) > settings.lbfgs_memory:
                s_hist.pop(0)
                y_hist.pop(0)


        x = x_new
        if newton:
            try:
                ev = objective(x, 2)
            except (np.linalg.LinAlgError, FloatingPointError) as exc:
                fail(f"objective evaluation failed: {exc}")
            cost += ev.cost
        else:
            ev = ObjectiveValue(f=res.f, grad=g_new, cost=0, extra=dict(res.extra))
        if ev.f < best_f:
            best_f, best_x = ev.f, x.copy()
    else:
        log.termination = "iteration limit reached"

    # Terminal record: the state we stopped at, with no step attached.
    if not log.records or log.records[-1].accepted:
        log.records.append(
            IterationRecord(
                iteration=len(log.records),
                f=ev.f,
                grad_inf=float(np.max(np.abs(ev.grad))) if ev.grad.size else 0.0,
                cost_cumulative=cost,
                extra=dict(ev.extra),
            )
        )
    return best_x, log


class _GrapeObjective:
    """Adapter: flattened amplitudes -> minimized -J with derivatives.

    The state/costate sweeps of the latest evaluation are kept so that a
    Hessian request at the same amplitudes (the accepted line-search point)
    re-uses them instead of re-propagating; per GRAPE iteration only the
    line-search trials then cost trajectories.
    """

    def __init__(self, problem: ControlProblem, cache=None, workers: int = 1):
        self.problem = problem
        self.cache = cache
        self.workers = workers
        self._key: bytes | None = None
        self._sweeps = None

    def __call__(self, x, order):
        x = np.asarray(x, dtype=float)
        seq = ControlSequence.from_flat(
            x, self.problem.n_channels, self.problem.n_slices
        )
        key = x.tobytes()
        reuse = self._sweeps if (order >= 2 and key == self._key) else None
        report, sweeps = evaluate_with_sweeps(
            self.problem, seq, max(order, 1), self.cache, self.workers, reuse
        )
        self._key, self._sweeps = key, sweeps
        return ObjectiveValue(
            f=-report.j,
            grad=-report.grad,
            hess=None if report.hess is None else -report.hess,
            cost=report.trajectory_evals,
            extra={
                "fidelity": report.j,
                "raw_fidelity": report.raw_fidelity,
                "penalty": report.penalty_value,
            },
        )


def optimize(
    problem: ControlProblem,
    seq0: ControlSequence,
    method: str,
    settings: OptimSettings | None = None,
    cache=None,
    workers: int = 1,
):
    """Maximize the GRAPE fidelity functional from an initial sequence.

    Returns the best control sequence found and the iteration log; the log's
    ``fidelity`` extras column carries J = overlap - penalties per iterate.
    """
    settings = settings or OptimSettings()
    objective = _GrapeObjective(problem, cache, workers)
    target = settings.target_objective
    if target is not None:
        settings = replace(settings, target_objective=-target)
    x_best, log = minimize(objective, seq0.flatten(), method, settings)
    seq_best = ControlSequence.from_flat(x_best, problem.n_channels, problem.n_slices)
    return seq_best, log
