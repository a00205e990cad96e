"""Scalar barrier and penalty functions, their derivatives, and the t-schedule.

All functions here are pure, deterministic 64-bit float maps. They are the
single source of truth for the constraint handlers used by the training
loops and by the convex certification suite.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass


class BarrierDomainError(ValueError):
    """Raised when the standard log-barrier is evaluated outside z < 0."""


def psi_std(z: float, t: float) -> float:
    """Standard log-barrier -(1/t) * log(-z), defined only on z < 0.

    Callers that need an indicator-like semantics should treat the raised
    BarrierDomainError as +inf.
    """
    if t <= 0.0:
        raise ValueError(f"barrier hardness t must be positive, got {t}")
    if z >= 0.0:
        raise BarrierDomainError(f"standard log-barrier undefined at z={z} >= 0")
    return -(1.0 / t) * math.log(-z)


def psi_ext(z: float, t: float) -> float:
    """Log-barrier extension: equals psi_std on z <= -1/t^2, linear elsewhere.

    Total on the reals, continuous and continuously differentiable at the
    junction z = -1/t^2 (the junction itself takes the log branch).
    """
    if t <= 0.0:
        raise ValueError(f"barrier hardness t must be positive, got {t}")
    if z <= -1.0 / (t * t):
        return -(1.0 / t) * math.log(-z)
    return t * z - (1.0 / t) * math.log(1.0 / (t * t)) + 1.0 / t


def psi_ext_grad(z: float, t: float) -> float:
    """Derivative of psi_ext: -1/(t*z) on the log branch, t on the linear one.

    Strictly positive everywhere; this is the restoring force on satisfied
    constraints that plain penalties lack.
    """
    if t <= 0.0:
        raise ValueError(f"barrier hardness t must be positive, got {t}")
    if z <= -1.0 / (t * t):
        return -1.0 / (t * z)
    return t


def implicit_dual(z: float, t: float) -> float:
    """Implicit Lagrange multiplier associated with a constraint value z.

    Piecewise -1/(t*z) for z <= -1/t^2 and t otherwise; bit-identical to
    psi_ext_grad by construction (the multiplier of a converged extension
    minimizer is exactly the handler's slope at the constraint value).
    """
    if t <= 0.0:
        raise ValueError(f"barrier hardness t must be positive, got {t}")
    if z <= -1.0 / (t * t):
        return -1.0 / (t * z)
    return t


def quadratic_penalty(z: float) -> float:
    """max(0, z)^2; zero with zero slope on the whole feasible set."""
    zp = max(0.0, z)
    return zp * zp


def relu_penalty(z: float, t: float) -> float:
    """max(0, t*z); the t-parameterized hinge penalty baseline."""
    if t <= 0.0:
        raise ValueError(f"penalty hardness t must be positive, got {t}")
    return max(0.0, t * z)


@dataclass(frozen=True)
class BarrierSchedule:
    """Annealing state of the barrier hardness: t starts at t0, grows by mu."""

    t0: float
    mu: float
    t: float

    def __post_init__(self) -> None:
        if not self.t0 > 0.0:
            raise ValueError(f"t0 must be positive, got {self.t0}")
        if not self.mu > 1.0:
            raise ValueError(f"mu must exceed 1, got {self.mu}")
        if self.t < self.t0:
            raise ValueError(f"t={self.t} below initial value t0={self.t0}")

    @classmethod
    def start(cls, t0: float, mu: float) -> "BarrierSchedule":
        return cls(t0=t0, mu=mu, t=t0)


def schedule_step(s: BarrierSchedule) -> BarrierSchedule:
    """One annealing step: multiply the current hardness by mu."""
    return BarrierSchedule(t0=s.t0, mu=s.mu, t=s.t * s.mu)


class ConstraintHandlerKind(enum.Enum):
    """The five ways a scalar inequality f <= 0 can enter the loss."""

    QUADRATIC_PENALTY = "quadratic_penalty"
    RELU_PENALTY = "relu_penalty"
    STANDARD_LOG_BARRIER = "standard_log_barrier"
    LOG_BARRIER_EXTENSION = "log_barrier_extension"
    LAGRANGIAN_DUAL = "lagrangian_dual"

    @property
    def needs_schedule(self) -> bool:
        return self not in (
            ConstraintHandlerKind.QUADRATIC_PENALTY,
            ConstraintHandlerKind.LAGRANGIAN_DUAL,
        )
