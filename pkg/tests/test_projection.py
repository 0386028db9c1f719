import numpy as np
import pytest

from mgmw.kinematics import (
    bone_lengths,
    check_on_manifold,
    forward_kinematics,
    inverse_kinematics,
)
from mgmw.motion import ANGLES, POSITIONS, Motion, second_difference
from mgmw.projection import (
    ProjectionConfig,
    ProjectionProblem,
    manifold_project,
    solve_barrier,
)
from mgmw.rng import make_rng
from mgmw.skeleton import default_skeleton


def zoom_grid_argmin(value_fn, lo, hi, rounds=5, points=41):
    """Brute-force zooming grid search, independent of the solver path."""
    lo = np.asarray(lo, dtype=float).copy()
    hi = np.asarray(hi, dtype=float).copy()
    dims = lo.size
    best = None
    for _ in range(rounds):
        axes = [np.linspace(lo[d], hi[d], points) for d in range(dims)]
        mesh = np.meshgrid(*axes, indexing="ij")
        flat = np.stack([m.ravel() for m in mesh], axis=1)
        vals = np.array([value_fn(p) for p in flat])
        best = flat[int(np.argmin(vals))]
        span = (hi - lo) / (points - 1)
        lo = np.maximum(lo, best - 2 * span)
        hi = np.minimum(hi, best + 2 * span)
    return best


class TestSolveBarrier:
    def test_interior_reference_is_returned(self):
        rng = make_rng(1, "barrier-interior")
        ref = rng.uniform(-0.3, 0.3, size=(4, 3))
        problem = ProjectionProblem(ref, lo=np.full(3, -1.0), hi=np.full(3, 1.0),
                                    accel_target=None, dynamics_weight=0.0)
        theta, info = solve_barrier(problem)
        assert info.converged
        np.testing.assert_allclose(theta, ref, atol=1e-6)

    def test_symmetric_problem_lands_at_center(self):
        ref = np.zeros((5, 2))
        problem = ProjectionProblem(ref, lo=np.array([-0.7, -1.2]),
                                    hi=np.array([0.7, 1.2]),
                                    accel_target=np.zeros((5, 2)),
                                    dynamics_weight=0.8)
        theta, _ = solve_barrier(problem)
        np.testing.assert_allclose(theta, 0.0, atol=1e-6)

    def test_single_frame_clamp_against_grid_oracle(self):
        # one DoF pushed past its limit, one resting inside
        lo = np.array([-0.5, -0.8])
        hi = np.array([0.5, 0.8])
        ref = np.array([[0.7, 0.1]])
        problem = ProjectionProblem(ref, lo, hi, accel_target=None, dynamics_weight=0.0)
        theta, info = solve_barrier(problem)
        assert info.converged

        def objective(p):
            return float(np.sum((p - ref[0]) ** 2))

        oracle = zoom_grid_argmin(objective, lo, hi)
        assert np.max(np.abs(theta[0] - oracle)) <= 1e-4
        # analytic clamp oracle for the box-constrained quadratic
        np.testing.assert_allclose(theta[0], np.clip(ref[0], lo, hi), atol=1e-6)
        assert np.all(theta[0] > lo) and np.all(theta[0] < hi)

    def test_coupled_frames_against_grid_oracle(self):
        lo = np.array([-0.6])
        hi = np.array([0.6])
        ref = np.array([[0.9], [-0.2], [0.5]])
        acc = np.array([[0.3], [0.3], [0.3]])
        w = 0.7
        problem = ProjectionProblem(ref, lo, hi, accel_target=acc, dynamics_weight=w)
        theta, info = solve_barrier(problem)
        assert info.converged

        d2 = np.array([[1.0, -2.0, 1.0], [1.0, -2.0, 1.0], [1.0, -2.0, 1.0]])

        def objective(p):
            r = d2 @ p - acc[:, 0]
            return float(np.sum((p - ref[:, 0]) ** 2) + w * np.sum(r ** 2))

        oracle = zoom_grid_argmin(objective, np.full(3, lo[0]), np.full(3, hi[0]),
                                  rounds=6, points=31)
        assert np.max(np.abs(theta[:, 0] - oracle)) <= 1e-4

    def test_matches_unconstrained_normal_equations_inside_box(self):
        rng = make_rng(2, "barrier-normal")
        n, w = 6, 0.4
        ref = rng.uniform(-0.1, 0.1, size=(n, 2))
        acc = rng.uniform(-0.05, 0.05, size=(n, 2))
        problem = ProjectionProblem(ref, lo=np.full(2, -2.0), hi=np.full(2, 2.0),
                                    accel_target=acc, dynamics_weight=w)
        theta, _ = solve_barrier(problem)
        from mgmw.projection import _second_difference_matrix
        d2 = _second_difference_matrix(n)
        lhs = np.eye(n) + w * d2.T @ d2
        for j in range(2):
            expected = np.linalg.solve(lhs, ref[:, j] + w * d2.T @ acc[:, j])
            np.testing.assert_allclose(theta[:, j], expected, atol=1e-6)

    def test_objective_non_increasing_along_barrier_path(self):
        rng = make_rng(3, "barrier-path")
        ref = rng.uniform(-1.5, 1.5, size=(5, 3))
        acc = rng.uniform(-0.3, 0.3, size=(5, 3))
        lo = np.full(3, -0.9)
        hi = np.full(3, 0.9)
        d2 = None
        from mgmw.projection import _second_difference_matrix
        d2 = _second_difference_matrix(5)

        def true_objective(theta):
            return float(np.sum((theta - ref) ** 2)
                         + 0.5 * np.sum((d2 @ theta - acc) ** 2))

        values = []
        for nu in (1e-1, 1e-3, 1e-5, 1e-7, 1e-9):
            cfg = ProjectionConfig(dynamics_weight=0.5, barrier_init_scale=nu / 1.8,
                                   barrier_floor=nu / 1.8 * 1.8)
            # scale * mean width = nu exactly: mean width is 1.8
            problem = ProjectionProblem(ref, lo, hi, accel_target=acc, dynamics_weight=0.5)
            theta, _ = solve_barrier(problem, cfg)
            values.append(true_objective(theta))
        diffs = np.diff(values)
        assert np.all(diffs <= 1e-9)

    def test_iterates_strictly_inside_box(self):
        rng = make_rng(4, "barrier-strict")
        ref = rng.uniform(-3.0, 3.0, size=(6, 4))
        lo = np.full(4, -0.5)
        hi = np.full(4, 0.5)
        problem = ProjectionProblem(ref, lo, hi, accel_target=None, dynamics_weight=0.0)
        theta, _ = solve_barrier(problem)
        assert np.all(theta > lo) and np.all(theta < hi)


@pytest.fixture(scope="module")
def skeleton():
    return default_skeleton()


def smooth_motion(skeleton, seed, n=12, scale=0.5):
    rng = make_rng(seed, "proj-motion")
    t = np.arange(n)[:, None] / n
    phase = rng.uniform(0, 2 * np.pi, size=(1, skeleton.dof_count))
    theta = scale * np.sin(2 * np.pi * 2 * t + phase) * (skeleton.limits_max * 0.9)
    return Motion(ANGLES, theta)


class TestManifoldProject:
    def test_on_manifold_motion_is_a_fixed_point(self, skeleton):
        angles = smooth_motion(skeleton, 21)
        pos = forward_kinematics(skeleton, angles)
        projected, info = manifold_project(skeleton, pos, pos)
        assert info.converged
        assert np.max(np.abs(projected.frames - pos.frames)) <= 1e-6

    def test_output_is_on_manifold_with_exact_bones(self, skeleton):
        angles = smooth_motion(skeleton, 22)
        pos = forward_kinematics(skeleton, angles)
        rng = make_rng(22, "proj-noise")
        noisy = pos.with_frames(pos.frames + rng.normal(size=pos.frames.shape) * 0.05)
        projected, _ = manifold_project(skeleton, noisy, pos)
        rel = np.abs(bone_lengths(skeleton, projected) - skeleton.reference_lengths())
        rel /= skeleton.reference_lengths()
        assert rel.max() <= 1e-6
        assert check_on_manifold(skeleton, projected,
                                 reference_angles=angles.frames).on_manifold

    def test_limit_violation_is_clamped(self, skeleton):
        theta = np.zeros((3, skeleton.dof_count))
        theta[:, 4] = skeleton.limits_max[4] + 0.2
        pos = forward_kinematics(skeleton, Motion(ANGLES, theta))
        cfg = ProjectionConfig(dynamics_weight=0.0, output_angles=True)
        projected, _ = manifold_project(skeleton, pos, pos, cfg)
        assert np.max(projected.frames[:, 4]) < skeleton.limits_max[4]
        np.testing.assert_allclose(projected.frames[:, 4], skeleton.limits_max[4],
                                   atol=1e-4)

    def test_dynamics_weight_reduces_acceleration_deviation(self, skeleton):
        angles = smooth_motion(skeleton, 23)
        pos = forward_kinematics(skeleton, angles)
        rng = make_rng(23, "proj-jerky")
        jerky = pos.with_frames(pos.frames + rng.normal(size=pos.frames.shape) * 0.08)
        acc_ref = second_difference(angles.frames)

        def accel_dev(weight):
            cfg = ProjectionConfig(dynamics_weight=weight, output_angles=True)
            proj, _ = manifold_project(skeleton, jerky, pos, cfg,
                                       original_angles=angles)
            return float(np.linalg.norm(second_difference(proj.frames) - acc_ref))

        assert accel_dev(20.0) < accel_dev(0.0)

    def test_projection_is_idempotent_without_dynamics_term(self, skeleton):
        angles = smooth_motion(skeleton, 24)
        pos = forward_kinematics(skeleton, angles)
        rng = make_rng(24, "proj-idem")
        noisy = pos.with_frames(pos.frames + rng.normal(size=pos.frames.shape) * 0.05)
        cfg = ProjectionConfig(dynamics_weight=0.0)
        once, _ = manifold_project(skeleton, noisy, pos, cfg, original_angles=angles)
        twice, _ = manifold_project(skeleton, once, pos, cfg, original_angles=angles)
        # active joint limits retreat by O(sqrt(barrier_floor)) per pass
        assert np.max(np.abs(twice.frames - once.frames)) <= 1e-4

    def test_repeated_projection_contracts_with_dynamics_term(self, skeleton):
        angles = smooth_motion(skeleton, 25)
        pos = forward_kinematics(skeleton, angles)
        rng = make_rng(25, "proj-contract")
        noisy = pos.with_frames(pos.frames + rng.normal(size=pos.frames.shape) * 0.08)
        cfg = ProjectionConfig(dynamics_weight=0.5)
        once, _ = manifold_project(skeleton, noisy, pos, cfg, original_angles=angles)
        twice, _ = manifold_project(skeleton, once, pos, cfg, original_angles=angles)
        first_move = np.linalg.norm(once.frames - noisy.frames)
        second_move = np.linalg.norm(twice.frames - once.frames)
        assert second_move <= first_move
