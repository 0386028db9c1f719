"""Forward/inverse kinematics and manifold membership checks.

Forward kinematics composes intrinsic XYZ Euler rotations down the tree;
output bone lengths therefore equal the skeleton's reference lengths by
construction.  Inverse kinematics runs damped least squares
(Levenberg-Marquardt on the joint angles with an analytic geometric
Jacobian), vectorized across frames, each frame starting from its
reference angles so equivalent Euler branches resolve to the one nearest
the reference.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .motion import ANGLES, POSITIONS, Motion
from .skeleton import Skeleton

__all__ = [
    "forward_kinematics",
    "inverse_kinematics",
    "IKResult",
    "bone_lengths",
    "check_on_manifold",
    "OnManifoldVerdict",
]


def _euler_xyz_batch(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Rotation matrices Rx(a) @ Ry(b) @ Rz(c) for angle vectors, shape (n, 3, 3)."""
    ca, sa = np.cos(a), np.sin(a)
    cb, sb = np.cos(b), np.sin(b)
    cc, sc = np.cos(c), np.sin(c)
    rot = np.empty(a.shape + (3, 3))
    rot[..., 0, 0] = cb * cc
    rot[..., 0, 1] = -cb * sc
    rot[..., 0, 2] = sb
    rot[..., 1, 0] = ca * sc + sa * sb * cc
    rot[..., 1, 1] = ca * cc - sa * sb * sc
    rot[..., 1, 2] = -sa * cb
    rot[..., 2, 0] = sa * sc - ca * sb * cc
    rot[..., 2, 1] = sa * cc + ca * sb * sc
    rot[..., 2, 2] = ca * cb
    return rot


def _fk_batch(skeleton: Skeleton, angles: np.ndarray):
    """Joint positions (n, J, 3) and global rotations (n, J, 3, 3)."""
    n = angles.shape[0]
    j = skeleton.joint_count
    positions = np.zeros((n, j, 3))
    rotations = np.empty((n, j, 3, 3))
    for joint in range(j):
        start = skeleton.dof_start.get(joint)
        if start is None:
            local = np.broadcast_to(np.eye(3), (n, 3, 3))
        else:
            local = _euler_xyz_batch(angles[:, start], angles[:, start + 1],
                                     angles[:, start + 2])
        parent = skeleton.parents[joint]
        if parent < 0:
            rotations[:, joint] = local
        else:
            bone = skeleton.offsets[joint] * skeleton.lengths[joint]
            positions[:, joint] = positions[:, parent] + rotations[:, parent] @ bone
            rotations[:, joint] = rotations[:, parent] @ local
    return positions, rotations


def forward_kinematics(skeleton: Skeleton, angles: Motion) -> Motion:
    """Map an angle-space motion to joint positions (root pinned at origin)."""
    if angles.representation != ANGLES:
        raise ValueError("forward kinematics expects an angle-space motion")
    if angles.dof_count != skeleton.dof_count:
        raise ValueError(
            f"motion has {angles.dof_count} DoFs, skeleton expects {skeleton.dof_count}")
    positions, _ = _fk_batch(skeleton, angles.frames)
    return Motion(POSITIONS, positions.reshape(angles.frame_count, -1), angles.frame_rate)


def _descendants(skeleton: Skeleton) -> dict:
    """Strict descendants per articulated joint (the points its angles move)."""
    desc = {}
    for joint in skeleton.articulated:
        stack = list(skeleton.children[joint])
        seen = []
        while stack:
            k = stack.pop()
            seen.append(k)
            stack.extend(skeleton.children[k])
        desc[int(joint)] = np.array(sorted(seen), dtype=int)
    return desc


def _jacobian_batch(skeleton: Skeleton, angles: np.ndarray, positions: np.ndarray,
                    rotations: np.ndarray, desc: dict) -> np.ndarray:
    """Geometric Jacobian of all joint positions w.r.t. all Euler angles, (n, 3J, m)."""
    n = angles.shape[0]
    j = skeleton.joint_count
    m = skeleton.dof_count
    jac = np.zeros((n, 3 * j, m))
    for joint in skeleton.articulated:
        joint = int(joint)
        start = skeleton.dof_start[joint]
        a = angles[:, start]
        b = angles[:, start + 1]
        ca, sa = np.cos(a), np.sin(a)
        cb, sb = np.cos(b), np.sin(b)
        parent = skeleton.parents[joint]
        if parent < 0:
            prot = np.broadcast_to(np.eye(3), (n, 3, 3))
        else:
            prot = rotations[:, parent]
        # local rotation axes of the three Euler factors, mapped to global frame
        ax_a = prot[:, :, 0]
        ax_b = np.einsum("nij,nj->ni", prot,
                         np.stack([np.zeros(n), ca, sa], axis=1))
        ax_c = np.einsum("nij,nj->ni", prot,
                         np.stack([sb, -sa * cb, ca * cb], axis=1))
        moved = desc[joint]
        rows = (3 * moved[:, None] + np.arange(3)).ravel()
        center = positions[:, joint]
        arms = positions[:, moved] - center[:, None, :]
        for d, axis in enumerate((ax_a, ax_b, ax_c)):
            vel = np.cross(axis[:, None, :], arms)
            jac[:, rows, start + d] = vel.reshape(n, -1)
    return jac


def _nearest_shift(angle: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """The 2*pi-shifted copy of ``angle`` nearest ``ref``."""
    return angle + 2.0 * np.pi * np.round((ref - angle) / (2.0 * np.pi))


def _canonicalize(skeleton: Skeleton, theta: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Pick, per joint and frame, the equivalent Euler-XYZ triple nearest the
    reference.  Intrinsic XYZ angles (a, b, c) and (a + pi, pi - b, c + pi)
    encode the same rotation; on top of that every angle is free modulo 2*pi.
    """
    out = theta.copy()
    for joint in skeleton.articulated:
        s = skeleton.dof_start[int(joint)]
        block = theta[:, s:s + 3]
        refblk = ref[:, s:s + 3]
        flipped = np.stack([block[:, 0] + np.pi, np.pi - block[:, 1],
                            block[:, 2] + np.pi], axis=1)
        cand1 = _nearest_shift(block, refblk)
        cand2 = _nearest_shift(flipped, refblk)
        d1 = np.sum((cand1 - refblk) ** 2, axis=1)
        d2 = np.sum((cand2 - refblk) ** 2, axis=1)
        out[:, s:s + 3] = np.where((d2 < d1)[:, None], cand2, cand1)
    return out


@dataclass
class IKResult:
    angles: Motion
    residuals: np.ndarray       # (n, J) per-joint position error norms
    flagged_frames: np.ndarray  # (n,) bool, residual above the flag threshold

    @property
    def max_residual(self) -> float:
        return float(self.residuals.max())


def inverse_kinematics(skeleton: Skeleton, positions: Motion,
                       reference: np.ndarray | None = None,
                       tol: float = 1e-10, max_iter: int = 60,
                       flag_tol: float = 1e-6) -> IKResult:
    """Recover joint angles whose forward kinematics best match ``positions``.

    Unreachable or degenerate frames never raise; they converge to the
    least-squares pose and show up as nonzero residuals with the frame
    flagged.  ``reference`` may be a single (m,) angle vector or an (n, m)
    array of per-frame references; it seeds the solve and disambiguates
    equivalent Euler branches.  Default reference is the zero pose.
    """
    if positions.representation != POSITIONS:
        raise ValueError("inverse kinematics expects a position-space motion")
    if positions.dof_count != skeleton.position_dof_count:
        raise ValueError(
            f"motion has {positions.dof_count} DoFs, skeleton expects "
            f"{skeleton.position_dof_count}")
    n = positions.frame_count
    m = skeleton.dof_count
    desc = _descendants(skeleton)
    if reference is None:
        ref = np.zeros((n, m))
    else:
        ref = np.asarray(reference, dtype=float)
        ref = np.broadcast_to(ref, (n, m)).copy() if ref.ndim == 1 else ref.copy()

    theta = _lm_solve(skeleton, desc, positions.frames, ref, tol, max_iter)
    theta = _canonicalize(skeleton, theta, ref)
    pos, _ = _fk_batch(skeleton, theta)
    residuals = np.linalg.norm(pos - positions.frames.reshape(n, -1, 3), axis=2)
    flagged = residuals.max(axis=1) > flag_tol
    return IKResult(Motion(ANGLES, theta, positions.frame_rate), residuals, flagged)


def _lm_solve(skeleton: Skeleton, desc: dict, targets: np.ndarray,
              start: np.ndarray, tol: float, max_iter: int) -> np.ndarray:
    """Levenberg-Marquardt over all frames in lockstep."""
    n, m = start.shape
    theta = start.copy()
    pos, rot = _fk_batch(skeleton, theta)
    r = targets - pos.reshape(n, -1)
    err = np.einsum("nr,nr->n", r, r)
    mu = np.full(n, 1e-4)
    active = np.max(np.abs(r), axis=1) >= tol
    eye = np.eye(m)

    for _ in range(max_iter):
        if not active.any():
            break
        jac = _jacobian_batch(skeleton, theta, pos, rot, desc)
        a = np.einsum("nrm,nrk->nmk", jac, jac)
        g = np.einsum("nrm,nr->nm", jac, r)
        # frames at a stationary point cannot improve further
        active &= np.max(np.abs(g), axis=1) >= 1e-10
        pending = active.copy()
        for _ in range(25):
            if not pending.any():
                break
            idx = np.flatnonzero(pending)
            lhs = a[idx] + mu[idx, None, None] * eye
            try:
                step = np.linalg.solve(lhs, g[idx][..., None])[..., 0]
            except np.linalg.LinAlgError:
                mu[idx] *= 10.0
                continue
            cand = theta[idx] + step
            cand_pos, cand_rot = _fk_batch(skeleton, cand)
            cand_r = targets[idx] - cand_pos.reshape(idx.size, -1)
            cand_err = np.einsum("nr,nr->n", cand_r, cand_r)
            better = cand_err < err[idx]
            acc = idx[better]
            if acc.size:
                theta[acc] = cand[better]
                pos[acc] = cand_pos[better]
                rot[acc] = cand_rot[better]
                r[acc] = cand_r[better]
                # negligible progress or a negligible step means convergence
                stalled = (err[acc] - cand_err[better]) <= 1e-12 * np.maximum(err[acc], 1e-30)
                stalled |= np.max(np.abs(step[better]), axis=1) < 1e-9
                err[acc] = cand_err[better]
                active[acc[stalled]] = False
                mu[acc] = np.maximum(mu[acc] * 0.3, 1e-12)
                pending[acc] = False
            rej = idx[~better]
            mu[rej] *= 10.0
            pending[rej] = mu[rej] <= 1e14
        active[pending] = False  # no productive step found within damping range
        active &= np.max(np.abs(r), axis=1) >= tol
    return theta


def bone_lengths(skeleton: Skeleton, positions) -> np.ndarray:
    """Per-frame Euclidean bone lengths, shape (n, bone_count).

    Bone ``i`` connects joint ``i + 1`` to its parent.  Accepts a
    position-space Motion or a raw (n, 3J) array.
    """
    frames = positions.frames if isinstance(positions, Motion) else np.asarray(positions, dtype=float)
    if isinstance(positions, Motion) and positions.representation != POSITIONS:
        raise ValueError("bone lengths need a position-space motion")
    n = frames.shape[0]
    if frames.shape[1] != skeleton.position_dof_count:
        raise ValueError("position DoF count does not match the skeleton")
    pts = frames.reshape(n, skeleton.joint_count, 3)
    child = np.arange(1, skeleton.joint_count)
    diffs = pts[:, child] - pts[:, skeleton.parents[child]]
    return np.linalg.norm(diffs, axis=2)


@dataclass
class OnManifoldVerdict:
    on_manifold: bool
    violations: list  # (frame, "bone"|"joint", index, exceedance)

    def __bool__(self) -> bool:
        return self.on_manifold


def check_on_manifold(skeleton: Skeleton, motion: Motion,
                      tol_bone: float = 1e-3, tol_angle: float = 1e-6,
                      reference_angles: np.ndarray | None = None) -> OnManifoldVerdict:
    """A motion is on-manifold when every frame keeps all bone lengths at
    their reference values (within ``tol_bone`` relative) and all joint
    angles inside their limits (within ``tol_angle`` radians).

    Position-space motions are first mapped to angles by inverse
    kinematics; angle-space motions have exact bone lengths by
    construction, so only the limits are checked.
    """
    violations = []
    if motion.representation == POSITIONS:
        lengths = bone_lengths(skeleton, motion)
        ref = skeleton.reference_lengths()
        rel = np.abs(lengths - ref) / ref
        for t, i in zip(*np.nonzero(rel > tol_bone)):
            violations.append((int(t), "bone", int(i), float(rel[t, i] - tol_bone)))
        angles = inverse_kinematics(skeleton, motion, reference=reference_angles).angles
    else:
        angles = motion

    lo = skeleton.limits_min - tol_angle
    hi = skeleton.limits_max + tol_angle
    below = lo - angles.frames
    above = angles.frames - hi
    for t, j in zip(*np.nonzero(below > 0)):
        violations.append((int(t), "joint", int(j), float(below[t, j])))
    for t, j in zip(*np.nonzero(above > 0)):
        violations.append((int(t), "joint", int(j), float(above[t, j])))

    return OnManifoldVerdict(not violations, violations)
