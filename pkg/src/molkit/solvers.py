"""Conjugate gradient for the data-consistency solves, generic Picard
iteration with residual tracking, and the closed-form damping threshold and
contraction-rate expressions used by the convergence/robustness checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConvergenceError, DivergenceError
from .imaging import ComplexImage


@dataclass
class SolverConfig:
    fp_tolerance: float = 1e-5
    fp_max_iterations: int = 200
    cg_tolerance: float = 1e-6
    cg_max_iterations: int = 50

    def __post_init__(self):
        for name in ("fp_tolerance", "fp_max_iterations", "cg_tolerance", "cg_max_iterations"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class FixedPointResult:
    """Converged (or not) Picard iteration: final iterate plus the relative
    update history ||x_{n+1} - x_n|| / ||x_n||, one entry per iteration."""

    x_star: ComplexImage
    residuals: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False


def conjugate_gradient(normal_op, rhs: ComplexImage, config: SolverConfig | None = None) -> ComplexImage:
    """Solve normal_op(y) = rhs for a Hermitian positive-definite operator.

    Starts from zero; a zero right-hand side returns zero immediately.
    Raises :class:`ConvergenceError` (carrying the final relative residual)
    if the tolerance is not met within the iteration budget.
    """
    cfg = config or SolverConfig()
    b = rhs.data
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return ComplexImage(np.zeros_like(b))
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rr = float(np.real(np.vdot(r, r)))
    for _ in range(cfg.cg_max_iterations):
        q = normal_op(ComplexImage(p)).data
        alpha = rr / float(np.real(np.vdot(p, q)))
        x += alpha * p
        r -= alpha * q
        rr_new = float(np.real(np.vdot(r, r)))
        if math.sqrt(rr_new) / bnorm < cfg.cg_tolerance:
            return ComplexImage(x)
        p = r + (rr_new / rr) * p
        rr = rr_new
    raise ConvergenceError(
        f"CG did not reach {cfg.cg_tolerance:g} within {cfg.cg_max_iterations} iterations",
        residual=math.sqrt(rr) / bnorm,
    )


def alpha_max(m: float) -> float:
    """Largest damping value with guaranteed convergence: 2m / (2 - m)^2."""
    if not 0.0 < m < 1.0:
        raise ValueError("m must be in (0, 1)")
    return 2.0 * m / (2.0 - m) ** 2


def contraction_rate(alpha: float, m: float) -> float:
    """Geometric rate bound sqrt(1 - 2*alpha*m + alpha^2*(2-m)^2); strictly
    below 1 exactly when alpha < alpha_max(m)."""
    if not 0.0 < m < 1.0:
        raise ValueError("m must be in (0, 1)")
    if not 0.0 < alpha < alpha_max(m):
        raise ValueError("alpha outside (0, alpha_max): rate >= 1, no contraction guarantee")
    return math.sqrt(1.0 - 2.0 * alpha * m + alpha**2 * (2.0 - m) ** 2)


def fixed_point_iterate(map_fn, x0: ComplexImage, config: SolverConfig | None = None) -> FixedPointResult:
    """Picard iteration x_{n+1} = map_fn(x_n) until the relative update drops
    below ``fp_tolerance`` or the budget runs out.

    Only the current iterate pair is retained.  A non-finite iterate raises
    :class:`DivergenceError` with the offending iteration index; exhausting
    the budget returns ``converged=False`` with the full residual history.
    """
    cfg = config or SolverConfig()
    x = x0.data.astype(np.complex128, copy=True)
    residuals = []
    for it in range(cfg.fp_max_iterations):
        x_next = map_fn(ComplexImage(x)).data
        if not np.all(np.isfinite(x_next)):
            raise DivergenceError(f"non-finite iterate at iteration {it}", iteration=it)
        denom = np.linalg.norm(x)
        res = float(np.linalg.norm(x_next - x) / (denom if denom > 0.0 else 1.0))
        residuals.append(res)
        x = x_next
        if res < cfg.fp_tolerance:
            return FixedPointResult(ComplexImage(x), residuals, len(residuals), True)
    return FixedPointResult(ComplexImage(x), residuals, len(residuals), False)


def estimate_rate(residuals) -> float:
    """Geometric mean of successive residual ratios over the last half of the
    history (skips transients)."""
    res = [float(r) for r in residuals]
    if len(res) < 5:
        raise ValueError("need at least 5 residuals to estimate a rate")
    if any(r <= 0.0 for r in res):
        raise ValueError("residuals must be positive")
    tail = res[len(res) // 2:]
    ratios = np.array(tail[1:]) / np.array(tail[:-1])
    return float(np.exp(np.mean(np.log(ratios))))
