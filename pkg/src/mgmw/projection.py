"""Projection of a perturbed motion back onto the pose manifold.

The projection runs in two steps.  Inverse kinematics first maps the
perturbed positions to joint angles, which restores bone lengths exactly.
A box-constrained optimization then pulls the angles inside the joint
limits while matching the original motion's angular acceleration:

    minimize  ||theta - theta_ref||^2 + w ||D2 theta - accel_target||^2
    subject to  lo_j <= theta[:, j] <= hi_j

with D2 the second-difference operator.  The problem separates per DoF
into n-frame quadratics with a banded Hessian, solved by a logarithmic
barrier method: for a decreasing barrier parameter, damped Newton steps
(fraction-to-boundary plus Armijo backtracking) drive the barrier
stationarity residual to zero, keeping every iterate strictly feasible.

The hard-label adversarial constraint is deliberately not handled here;
the attack loop re-establishes adversariality by probing toward the
projected motion.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solveh_banded

from .kinematics import forward_kinematics, inverse_kinematics
from .motion import ANGLES, POSITIONS, Motion, second_difference
from .skeleton import Skeleton

__all__ = [
    "ProjectionConfig",
    "ProjectionProblem",
    "ProjectionInfo",
    "solve_barrier",
    "manifold_project",
]

log = logging.getLogger("mgmw.projection")


@dataclass
class ProjectionConfig:
    dynamics_weight: float = 0.5      # w, acceleration-matching weight
    barrier_init_scale: float = 0.1   # nu0 = scale * mean box width
    barrier_decay: float = 0.2
    barrier_floor: float = 1e-9
    newton_max_iter: int = 50
    newton_tol: float = 1e-6          # inf-norm of the stationarity residual
    step_floor: float = 1e-14         # Armijo collapse threshold
    feasibility_margin: float = 1e-6  # fraction of box width for the start point
    output_angles: bool = False
    ik_max_iter: int = 60

    def __post_init__(self):
        if self.dynamics_weight < 0:
            raise ValueError("dynamics weight must be non-negative")
        if self.barrier_init_scale <= 0 or self.barrier_floor <= 0:
            raise ValueError("barrier parameters must be positive")
        if self.newton_tol <= 0:
            raise ValueError("tolerances must be positive")


@dataclass
class ProjectionProblem:
    reference: np.ndarray              # (n, m) angles to stay close to
    lo: np.ndarray                     # (m,) lower joint limits
    hi: np.ndarray                     # (m,) upper joint limits
    accel_target: np.ndarray | None = None   # (n, m) target second differences
    dynamics_weight: float = 0.5

    def __post_init__(self):
        self.reference = np.asarray(self.reference, dtype=float)
        self.lo = np.asarray(self.lo, dtype=float)
        self.hi = np.asarray(self.hi, dtype=float)
        if not np.all(np.isfinite(self.reference)):
            raise ValueError("reference angles must be finite")
        if np.any(self.lo >= self.hi):
            raise ValueError("box limits must satisfy lo < hi")


@dataclass
class ProjectionInfo:
    converged: bool
    kkt_residual: float
    newton_iterations: int
    flagged: bool = False
    ik_residual: float = 0.0


def _second_difference_matrix(n: int) -> np.ndarray:
    """Dense matrix form of the endpoint-copying second difference."""
    a = np.zeros((n, n))
    for t in range(1, n - 1):
        a[t, t - 1] = 1.0
        a[t, t] = -2.0
        a[t, t + 1] = 1.0
    a[0] = a[1]
    a[-1] = a[-2]
    return a


def _upper_banded(mat: np.ndarray, bandwidth: int) -> np.ndarray:
    """Upper banded storage accepted by scipy.linalg.solveh_banded."""
    n = mat.shape[0]
    ab = np.zeros((bandwidth + 1, n))
    for diag in range(bandwidth + 1):
        ab[bandwidth - diag, diag:] = np.diagonal(mat, diag)
    return ab


def solve_barrier(problem: ProjectionProblem, config: ProjectionConfig | None = None):
    """Minimize the projection objective inside the box; returns (theta, info).

    Every returned angle is strictly inside its limits.  Non-convergence
    within the Newton budget (or an Armijo step collapse) returns the best
    strictly feasible iterate with ``flagged`` set instead of raising.
    """
    config = config or ProjectionConfig()
    ref = problem.reference
    n, m = ref.shape
    w = problem.dynamics_weight
    use_accel = problem.accel_target is not None and w > 0.0 and n >= 3
    if use_accel:
        d2 = _second_difference_matrix(n)
        quad = 2.0 * np.eye(n) + 2.0 * w * (d2.T @ d2)
        bandwidth = 2
    else:
        d2 = None
        quad = 2.0 * np.eye(n)
        bandwidth = 0
    quad_band = _upper_banded(quad, bandwidth)

    widths = problem.hi - problem.lo
    nu0 = config.barrier_init_scale * float(widths.mean())
    margin = config.feasibility_margin * widths

    theta = np.clip(ref, problem.lo + margin, problem.hi - margin)
    total_newton = 0
    worst_residual = 0.0
    converged = True

    for j in range(m):
        lo, hi = problem.lo[j], problem.hi[j]
        u = theta[:, j].copy()
        rj = ref[:, j]
        acc = problem.accel_target[:, j] if use_accel else None

        def grad_f(u):
            g = 2.0 * (u - rj)
            if use_accel:
                g += 2.0 * w * (d2.T @ (d2 @ u - acc))
            return g

        def f_val(u):
            v = float((u - rj) @ (u - rj))
            if use_accel:
                r = d2 @ u - acc
                v += w * float(r @ r)
            return v

        nu = nu0
        iters = 0
        collapsed = False
        while True:
            # damped Newton on the barrier objective for the current nu
            best_res = np.inf
            stall = 0
            for _ in range(config.newton_max_iter):
                gap_lo = u - lo
                gap_hi = hi - u
                g = grad_f(u) - nu / gap_lo + nu / gap_hi
                residual = float(np.max(np.abs(g)))
                if residual <= max(config.newton_tol, 1e-3 * nu):
                    break
                if residual < 0.999 * best_res:
                    best_res = residual
                    stall = 0
                else:
                    # progress has hit the floating-point floor for this stage
                    stall += 1
                    if stall >= 3:
                        break
                band = quad_band.copy()
                band[-1] += nu / gap_lo ** 2 + nu / gap_hi ** 2
                step = -solveh_banded(band, g)
                # fraction-to-boundary rule keeps the iterate strictly inside
                alpha = 1.0
                neg = step < 0
                if neg.any():
                    alpha = min(alpha, 0.99 * float(np.min(gap_lo[neg] / -step[neg])))
                pos = step > 0
                if pos.any():
                    alpha = min(alpha, 0.99 * float(np.min(gap_hi[pos] / step[pos])))
                phi0 = f_val(u) - nu * float(np.sum(np.log(gap_lo)) + np.sum(np.log(gap_hi)))
                slope = float(g @ step)
                while alpha > config.step_floor:
                    cand = u + alpha * step
                    phi = f_val(cand) - nu * float(
                        np.sum(np.log(cand - lo)) + np.sum(np.log(hi - cand)))
                    if phi <= phi0 + 1e-4 * alpha * slope:
                        break
                    alpha *= 0.5
                if alpha <= config.step_floor:
                    collapsed = True
                    break
                u = u + alpha * step
                iters += 1
            if collapsed or nu <= config.barrier_floor:
                break
            nu = max(nu * config.barrier_decay, config.barrier_floor)

        gap_lo = u - lo
        gap_hi = hi - u
        final_res = float(np.max(np.abs(grad_f(u) - nu / gap_lo + nu / gap_hi)))
        worst_residual = max(worst_residual, final_res)
        if collapsed or final_res > 10.0 * config.newton_tol:
            converged = False
        total_newton += iters
        theta[:, j] = u

    if not np.all(np.isfinite(theta)):
        raise FloatingPointError("barrier solve produced non-finite angles")
    info = ProjectionInfo(converged=converged, kkt_residual=worst_residual,
                          newton_iterations=total_newton, flagged=not converged)
    log.debug("barrier solve: newton_iters=%d kkt=%.3e converged=%s",
              total_newton, worst_residual, converged)
    return theta, info


def manifold_project(skeleton: Skeleton, perturbed: Motion, original: Motion,
                     config: ProjectionConfig | None = None,
                     original_angles: Motion | None = None):
    """Project a perturbed motion onto the pose manifold; returns (Motion, info).

    ``original`` supplies the acceleration target; pass ``original_angles``
    (its inverse kinematics, computed once) to avoid re-solving it on every
    projection of the same attacked motion.
    """
    config = config or ProjectionConfig()
    if perturbed.representation != POSITIONS:
        raise ValueError("manifold projection expects position-space input")
    if original_angles is None:
        original_angles = inverse_kinematics(
            skeleton, original, max_iter=config.ik_max_iter).angles
    ik = inverse_kinematics(skeleton, perturbed,
                            reference=original_angles.frames,
                            max_iter=config.ik_max_iter)
    problem = ProjectionProblem(
        reference=ik.angles.frames,
        lo=skeleton.limits_min,
        hi=skeleton.limits_max,
        accel_target=second_difference(original_angles.frames),
        dynamics_weight=config.dynamics_weight,
    )
    theta, info = solve_barrier(problem, config)
    info.ik_residual = ik.max_residual
    projected = Motion(ANGLES, theta, perturbed.frame_rate)
    if config.output_angles:
        return projected, info
    return forward_kinematics(skeleton, projected), info
