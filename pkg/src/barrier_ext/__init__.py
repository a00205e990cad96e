"""Inequality-constrained training with log-barrier extensions.

The package bundles a small tape-based reverse-mode autodiff engine, the
barrier/penalty constraint handlers, declarative segmentation constraints,
four training loops, convex duality-gap certification, and a synthetic
two-circles segmentation benchmark, all driven by one CLI (``barrier-ext``).
"""

from barrier_ext.barriers import (
    BarrierDomainError,
    BarrierSchedule,
    ConstraintHandlerKind,
    implicit_dual,
    psi_ext,
    psi_ext_grad,
    psi_std,
    quadratic_penalty,
    relu_penalty,
    schedule_step,
)

__all__ = [
    "BarrierDomainError",
    "BarrierSchedule",
    "ConstraintHandlerKind",
    "implicit_dual",
    "psi_ext",
    "psi_ext_grad",
    "psi_std",
    "quadratic_penalty",
    "relu_penalty",
    "schedule_step",
]

__version__ = "0.1.0"
