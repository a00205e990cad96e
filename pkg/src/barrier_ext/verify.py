"""Convex ground-truth oracles and duality-gap certification.

Everything here runs on tiny quadratic programs with affine constraints,
where the constrained optimum, the dual function, and the gap identities
have closed forms, so the barrier handlers' guarantees become executable
checks rather than claims:

- the standard annealed barrier's gap equals N/t exactly,
- the barrier-extension's gap is bounded by N/t, with strictly positive
  implicit multipliers read off the handler's slope,
- any feasible iterate is certified (N/t)-suboptimal against an exhaustive
  active-set oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from barrier_ext.barriers import implicit_dual


class ConvergenceError(RuntimeError):
    """Inner minimization failed to reach the requested gradient norm."""


class CertificationError(RuntimeError):
    """A certified property failed; carries the offending certificate."""

    def __init__(self, message: str, certificate: "GapCertificate"):
        super().__init__(message)
        self.certificate = certificate


@dataclass(frozen=True)
class ConvexQP:
    """min ||theta - center||^2  s.t.  A theta - b <= 0 (row-wise).

    ``interior`` is a point satisfying every constraint strictly; the random
    generator guarantees one by construction and handcrafted instances must
    supply their own.
    """

    center: np.ndarray
    A: np.ndarray
    b: np.ndarray
    interior: np.ndarray

    def __post_init__(self) -> None:
        if self.A.ndim != 2 or self.A.shape[1] != self.center.shape[0]:
            raise ValueError(f"A shape {self.A.shape} incompatible with dimension {self.center.shape}")
        if self.b.shape != (self.A.shape[0],):
            raise ValueError(f"b shape {self.b.shape} incompatible with A {self.A.shape}")
        if np.any(self.constraint_values(self.interior) >= 0.0):
            raise ValueError("interior point is not strictly feasible")

    @property
    def dim(self) -> int:
        return self.center.shape[0]

    @property
    def n_constraints(self) -> int:
        return self.A.shape[0]

    def objective(self, theta: np.ndarray) -> float:
        d = theta - self.center
        return float(d @ d)

    def constraint_values(self, theta: np.ndarray) -> np.ndarray:
        return self.A @ theta - self.b


def random_qp(rng: np.random.Generator, dim: int, n_constraints: int) -> ConvexQP:
    """Sample a QP with a certified nonempty strict interior.

    An interior point rho is drawn first; constraint rows are unit vectors and
    offsets are placed a positive margin beyond rho, so rho stays strictly
    feasible. The objective center is drawn wide enough that constraints are
    active (or violated under soft handlers) for a good share of instances.
    """
    rho = rng.uniform(-1.0, 1.0, size=dim)
    rows = rng.normal(size=(n_constraints, dim))
    rows /= np.linalg.norm(rows, axis=1, keepdims=True)
    margin = rng.uniform(0.1, 1.0, size=n_constraints)
    b = rows @ rho + margin
    center = rng.uniform(-3.0, 3.0, size=dim)
    return ConvexQP(center=center, A=rows, b=b, interior=rho)


def dual_function_qp(qp: ConvexQP, lam: np.ndarray) -> float:
    """g(lam) = min_theta ||theta-c||^2 + lam.(A theta - b), in closed form.

    The inner minimizer is theta(lam) = c - A^T lam / 2.
    """
    lam = np.asarray(lam, dtype=np.float64)
    if lam.shape != (qp.n_constraints,):
        raise ValueError(f"lambda shape {lam.shape}, expected ({qp.n_constraints},)")
    if np.any(lam < 0.0):
        raise ValueError("dual variables must be nonnegative")
    theta = qp.center - qp.A.T @ lam / 2.0
    return qp.objective(theta) + float(lam @ qp.constraint_values(theta))


def oracle_optimum(qp: ConvexQP, feas_tol: float = 1e-9) -> tuple[np.ndarray, float]:
    """Exact constrained optimum by exhaustive active-set enumeration.

    For every constraint subset, project the center onto the corresponding
    equality face and keep the feasible candidate with the smallest
    objective. Exhaustive over 2^N subsets, hence a true oracle at N <= 8.
    """
    if qp.n_constraints > 16:
        raise ValueError("active-set enumeration is exponential; N too large")
    best_theta: np.ndarray | None = None
    best_value = math.inf
    for mask in range(1 << qp.n_constraints):
        if mask == 0:
            theta = qp.center.copy()
        else:
            idx = [i for i in range(qp.n_constraints) if mask >> i & 1]
            A_j = qp.A[idx]
            rhs = qp.b[idx] - A_j @ qp.center
            nu, *_ = np.linalg.lstsq(A_j @ A_j.T, rhs, rcond=None)
            theta = qp.center + A_j.T @ nu
        if np.all(qp.constraint_values(theta) <= feas_tol):
            value = qp.objective(theta)
            if value < best_value:
                best_value = value
                best_theta = theta
    if best_theta is None:
        raise ValueError("no feasible candidate found; infeasible QP?")
    return best_theta, best_value


@dataclass
class GapCertificate:
    """One certified primal-dual pair with its gap and the N/t bound."""

    prop: int  # 1 = standard barrier equality, 2 = extension bound
    t: float
    theta: np.ndarray
    lam: np.ndarray
    primal: float
    dual: float
    gap: float
    bound: float
    feasible: bool
    per_term: np.ndarray  # lam_i * f_i at theta
    cases: list[int]  # 0: f <= -1/t^2, 1: -1/t^2 < f <= 0, 2: f > 0
    stationarity: float
    checks: dict[str, bool]

    @property
    def ok(self) -> bool:
        return all(self.checks.values())

    def to_dict(self) -> dict:
        return {
            "prop": self.prop,
            "t": self.t,
            "n_constraints": int(self.lam.shape[0]),
            "theta": self.theta.tolist(),
            "lam": self.lam.tolist(),
            "primal": self.primal,
            "dual": self.dual,
            "gap": self.gap,
            "bound": self.bound,
            "feasible": self.feasible,
            "per_term": self.per_term.tolist(),
            "cases": self.cases,
            "stationarity": self.stationarity,
            "checks": self.checks,
            "ok": self.ok,
        }


def branch_case(f: float, t: float) -> int:
    """Which of the three gap-bound proof cases a constraint value falls in."""
    if f <= -1.0 / (t * t):
        return 0
    if f <= 0.0:
        return 1
    return 2


def _newton_minimize(
    value,
    grad,
    hess,
    x0: np.ndarray,
    gtol: float = 1e-10,
    max_iter: int = 200,
) -> np.ndarray:
    """Damped Newton with Armijo backtracking.

    ``value`` may return +inf to mark points outside the objective's domain
    (the backtracking then shrinks back inside). Stops at gradient norm
    ``gtol``, or earlier when the Newton decrement falls below the float64
    resolution of the objective (for stiff barriers with curvature ~t^3 the
    representable gradient floor can sit above gtol; callers re-check the
    residuals they actually certify).
    """
    x = x0.astype(np.float64).copy()
    fx = value(x)
    if not math.isfinite(fx):
        raise ValueError("minimization started outside the objective domain")
    for _ in range(max_iter):
        g = grad(x)
        gnorm = np.linalg.norm(g)
        if gnorm <= gtol:
            return x
        h = hess(x)
        try:
            step = np.linalg.solve(h, -g)
        except np.linalg.LinAlgError:
            step = -g
        if g @ step > 0.0:  # not a descent direction; fall back to steepest
            step = -g
        predicted = -float(g @ step)
        if predicted <= 1e-14 * (1.0 + abs(fx)):
            # objective differences are below float64 noise; take the step
            # only if it still reduces the gradient, else we are done
            candidate = x + step
            fc = value(candidate)
            if math.isfinite(fc) and np.linalg.norm(grad(candidate)) < gnorm:
                x, fx = candidate, fc
                continue
            return x
        alpha = 1.0
        armijo = 1e-4 * float(g @ step)
        for _ in range(60):
            candidate = x + alpha * step
            fc = value(candidate)
            if math.isfinite(fc) and fc <= fx + alpha * armijo:
                break
            alpha *= 0.5
        else:
            raise ConvergenceError("line search failed to make progress")
        x = candidate
        fx = fc
    g = grad(x)
    if np.linalg.norm(g) <= gtol:
        return x
    raise ConvergenceError(
        f"gradient norm {np.linalg.norm(g):.3e} above {gtol} after {max_iter} iterations"
    )


def _minimize_standard_barrier(qp: ConvexQP, t: float, x0: np.ndarray) -> np.ndarray:
    def value(x: np.ndarray) -> float:
        f = qp.constraint_values(x)
        if np.any(f >= 0.0):
            return math.inf
        return qp.objective(x) - float(np.log(-f).sum()) / t

    def grad(x: np.ndarray) -> np.ndarray:
        f = qp.constraint_values(x)
        return 2.0 * (x - qp.center) + qp.A.T @ (-1.0 / (t * f))

    def hess(x: np.ndarray) -> np.ndarray:
        f = qp.constraint_values(x)
        w = 1.0 / (t * f * f)
        return 2.0 * np.eye(qp.dim) + (qp.A.T * w) @ qp.A

    return _newton_minimize(value, grad, hess, x0)


def _extension_scalar(f: np.ndarray, t: float) -> np.ndarray:
    knee = -1.0 / (t * t)
    out = np.empty_like(f)
    log_side = f <= knee
    out[log_side] = -np.log(-f[log_side]) / t
    shift = -math.log(1.0 / (t * t)) / t + 1.0 / t
    out[~log_side] = t * f[~log_side] + shift
    return out


def _minimize_extension(qp: ConvexQP, t: float, x0: np.ndarray) -> np.ndarray:
    knee = -1.0 / (t * t)

    def value(x: np.ndarray) -> float:
        f = qp.constraint_values(x)
        return qp.objective(x) + float(_extension_scalar(f, t).sum())

    def grad(x: np.ndarray) -> np.ndarray:
        f = qp.constraint_values(x)
        lam = np.where(f <= knee, -1.0 / (t * f), t)
        return 2.0 * (x - qp.center) + qp.A.T @ lam

    def hess(x: np.ndarray) -> np.ndarray:
        f = qp.constraint_values(x)
        w = np.where(f <= knee, 1.0 / (t * f * f), 0.0)
        return 2.0 * np.eye(qp.dim) + (qp.A.T * w) @ qp.A

    return _newton_minimize(value, grad, hess, x0)


def _lagrangian_residual(qp: ConvexQP, theta: np.ndarray, lam: np.ndarray) -> float:
    return float(np.linalg.norm(2.0 * (theta - qp.center) + qp.A.T @ lam))


def certify_prop1(qp: ConvexQP, t: float, tol: float = 1e-6) -> GapCertificate:
    """Certify the standard-barrier gap equality gap == N/t.

    Minimizes the barrier objective from the QP's interior point, reads the
    duals off -1/(t f_i), and checks the gap against N/t at tolerance
    ``tol``. Raises CertificationError when the equality fails and
    ConvergenceError when the inner Newton solve stalls.
    """
    if t <= 0.0:
        raise ValueError("t must be positive")
    theta = _minimize_standard_barrier(qp, t, qp.interior)
    f = qp.constraint_values(theta)
    lam = -1.0 / (t * f)
    primal = qp.objective(theta)
    dual = dual_function_qp(qp, lam)
    gap = primal - dual
    bound = qp.n_constraints / t
    cert = GapCertificate(
        prop=1,
        t=t,
        theta=theta,
        lam=lam,
        primal=primal,
        dual=dual,
        gap=gap,
        bound=bound,
        feasible=bool(np.all(f <= 0.0)),
        per_term=lam * f,
        cases=[branch_case(v, t) for v in f],
        stationarity=_lagrangian_residual(qp, theta, lam),
        checks={"gap_equals_bound": abs(gap - bound) <= tol},
    )
    if not cert.ok:
        raise CertificationError(
            f"standard-barrier gap {gap:.3e} differs from N/t {bound:.3e} beyond {tol}", cert
        )
    return cert


def certify_prop2(
    qp: ConvexQP,
    t: float,
    tol: float = 1e-6,
    stationarity_tol: float = 1e-8,
    start: np.ndarray | None = None,
) -> GapCertificate:
    """Certify the extension's gap bound from an arbitrary starting point.

    Checks, at the converged extension minimizer with implicit duals:
    strictly positive duals, gap <= N/t + tol, every per-term product
    lam_i f_i >= -1/t - tol, and the Lagrangian stationarity residual.
    """
    if t <= 0.0:
        raise ValueError("t must be positive")
    x0 = qp.center if start is None else np.asarray(start, dtype=np.float64)
    theta = _minimize_extension(qp, t, x0)
    f = qp.constraint_values(theta)
    lam = np.array([implicit_dual(v, t) for v in f])
    primal = qp.objective(theta)
    dual = dual_function_qp(qp, lam)
    gap = primal - dual
    bound = qp.n_constraints / t
    per_term = lam * f
    cert = GapCertificate(
        prop=2,
        t=t,
        theta=theta,
        lam=lam,
        primal=primal,
        dual=dual,
        gap=gap,
        bound=bound,
        feasible=bool(np.all(f <= 0.0)),
        per_term=per_term,
        cases=[branch_case(v, t) for v in f],
        stationarity=_lagrangian_residual(qp, theta, lam),
        checks={
            "duals_strictly_positive": bool(np.all(lam > 0.0)),
            "gap_below_bound": gap <= bound + tol,
            "per_term_above_minus_inv_t": bool(np.all(per_term >= -1.0 / t - tol)),
            "lagrangian_stationarity": _lagrangian_residual(qp, theta, lam) < stationarity_tol,
        },
    )
    if not cert.ok:
        failed = [name for name, passed in cert.checks.items() if not passed]
        raise CertificationError(f"extension gap certificate failed: {', '.join(failed)}", cert)
    return cert


def certify_epsilon_subopt(cert: GapCertificate, qp: ConvexQP, tol: float = 1e-6) -> bool | None:
    """Check feasible iterates against the active-set oracle's optimum.

    Returns True/False for feasible certificates (objective within bound of
    the true optimum or not) and None when the certified point is
    infeasible, where suboptimality is not defined.
    """
    if not cert.feasible:
        return None
    _, e_star = oracle_optimum(qp)
    return cert.primal - e_star <= cert.bound + tol
