"""Kinematic skeleton: tree topology, bone geometry, joint limits.

Joints are indexed ``0..joint_count-1`` with joint 0 as the root, which is
pinned at the origin (no translation degrees of freedom).  Every non-root
joint hangs off its parent by a fixed-length bone, stored as a unit
direction plus a reference length.  Rotational degrees of freedom live only
on joints that have children: rotating a leaf moves no point, so leaves
carry no angles.  Each articulated joint contributes three intrinsic XYZ
Euler angles, each subject to a box limit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["Skeleton", "default_skeleton"]


@dataclass(frozen=True)
class Skeleton:
    parents: np.ndarray        # (J,) int, -1 for the root
    offsets: np.ndarray        # (J, 3) unit direction from parent; row 0 unused
    lengths: np.ndarray        # (J,) bone length from parent; row 0 unused
    limits_min: np.ndarray     # (dof_count,) radians, per angle DoF
    limits_max: np.ndarray     # (dof_count,) radians
    spinal_flags: np.ndarray   # (J,) bool, joints excluded from exploration

    # derived topology, filled in __post_init__
    children: tuple = field(init=False, repr=False)
    articulated: np.ndarray = field(init=False, repr=False)
    dof_start: dict = field(init=False, repr=False)
    topo_order: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        parents = np.asarray(self.parents, dtype=int)
        offsets = np.asarray(self.offsets, dtype=float)
        lengths = np.asarray(self.lengths, dtype=float)
        lmin = np.asarray(self.limits_min, dtype=float)
        lmax = np.asarray(self.limits_max, dtype=float)
        spinal = np.asarray(self.spinal_flags, dtype=bool)
        object.__setattr__(self, "parents", parents)
        object.__setattr__(self, "offsets", offsets)
        object.__setattr__(self, "lengths", lengths)
        object.__setattr__(self, "limits_min", lmin)
        object.__setattr__(self, "limits_max", lmax)
        object.__setattr__(self, "spinal_flags", spinal)

        j = parents.size
        if offsets.shape != (j, 3) or lengths.shape != (j,) or spinal.shape != (j,):
            raise ValueError("skeleton arrays have inconsistent joint counts")
        roots = np.flatnonzero(parents < 0)
        if roots.size != 1 or roots[0] != 0:
            raise ValueError("skeleton must have exactly one root at index 0")
        if np.any(parents[1:] >= np.arange(1, j)):
            # parents must precede children; this also rules out cycles
            raise ValueError("joints must be ordered so each parent precedes its children")
        if np.any(lengths[1:] <= 0):
            raise ValueError("every bone length must be positive")
        norms = np.linalg.norm(offsets[1:], axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ValueError("bone offsets must be unit vectors")

        children = [[] for _ in range(j)]
        for c in range(1, j):
            children[parents[c]].append(c)
        articulated = np.array([i for i in range(j) if children[i]], dtype=int)
        dof_start = {int(joint): 3 * k for k, joint in enumerate(articulated)}
        object.__setattr__(self, "children", tuple(tuple(c) for c in children))
        object.__setattr__(self, "articulated", articulated)
        object.__setattr__(self, "dof_start", dof_start)
        object.__setattr__(self, "topo_order", np.arange(j))

        m = 3 * articulated.size
        if lmin.shape != (m,) or lmax.shape != (m,):
            raise ValueError(f"limit arrays must have one entry per angle DoF ({m})")
        if np.any(lmin >= lmax):
            raise ValueError("every joint limit must satisfy min < max")

    @property
    def joint_count(self) -> int:
        return self.parents.size

    @property
    def bone_count(self) -> int:
        return self.parents.size - 1

    @property
    def dof_count(self) -> int:
        """Angle-space DoFs: three per articulated joint."""
        return 3 * self.articulated.size

    @property
    def position_dof_count(self) -> int:
        """Position-space DoFs: three coordinates per joint."""
        return 3 * self.parents.size

    def reference_lengths(self) -> np.ndarray:
        """Bone lengths ordered by child joint (bone i connects joint i+1 to its parent)."""
        return self.lengths[1:].copy()

    def position_weights(self, spinal_weight: float = 0.0, other_weight: float = 1.0) -> np.ndarray:
        """Per-position-DoF diagonal weights; spinal joints default to zero."""
        per_joint = np.where(self.spinal_flags, spinal_weight, other_weight)
        return np.repeat(per_joint, 3)


def default_skeleton() -> Skeleton:
    """Fifteen-joint humanoid used by the synthetic experiments.

    Root (hips), spine and head form the spinal chain; arms hang off the
    spine and legs off the root, each ending in a hand/foot plus a short
    thumb/toe branch.  The two non-collinear terminal bones make every
    rotational DoF observable from joint positions, so inverse kinematics
    is well posed.  Limits keep the middle Euler angle clear of the gimbal
    singularity at pi/2.
    """
    names = ["hips", "spine", "head",
             "l_arm", "l_hand", "l_thumb",
             "r_arm", "r_hand", "r_thumb",
             "l_leg", "l_foot", "l_toe",
             "r_leg", "r_foot", "r_toe"]
    parents = np.array([-1, 0, 1, 1, 3, 3, 1, 6, 6, 0, 9, 9, 0, 12, 12])

    def unit(v):
        v = np.asarray(v, dtype=float)
        return v / np.linalg.norm(v)

    offsets = np.array([
        [0.0, 0.0, 0.0],
        unit([0.0, 1.0, 0.0]),       # spine
        unit([0.0, 1.0, 0.0]),       # head
        unit([1.0, 0.3, 0.0]),       # l_arm
        unit([1.0, -0.2, 0.0]),      # l_hand
        unit([0.6, 0.5, 0.6]),       # l_thumb
        unit([-1.0, 0.3, 0.0]),      # r_arm
        unit([-1.0, -0.2, 0.0]),     # r_hand
        unit([-0.6, 0.5, 0.6]),      # r_thumb
        unit([0.6, -1.0, 0.0]),      # l_leg
        unit([0.1, -1.0, 0.2]),      # l_foot
        unit([0.5, -0.6, 0.6]),      # l_toe
        unit([-0.6, -1.0, 0.0]),     # r_leg
        unit([-0.1, -1.0, 0.2]),     # r_foot
        unit([-0.5, -0.6, 0.6]),     # r_toe
    ])
    lengths = np.array([0.0, 0.45, 0.25,
                        0.5, 0.35, 0.2,
                        0.5, 0.35, 0.2,
                        0.55, 0.3, 0.18,
                        0.55, 0.3, 0.18])
    spinal = np.array([n in ("hips", "spine", "head") for n in names])

    # articulated: hips, spine, l_arm, r_arm, l_leg, r_leg
    half = {
        "hips": (0.8, 0.6, 0.8),
        "spine": (0.7, 0.5, 0.7),
        "l_arm": (1.2, 1.0, 1.2),
        "r_arm": (1.2, 1.0, 1.2),
        "l_leg": (1.1, 0.9, 1.1),
        "r_leg": (1.1, 0.9, 1.1),
    }
    articulated_names = [names[i] for i in (0, 1, 3, 6, 9, 12)]
    widths = np.concatenate([half[n] for n in articulated_names])
    return Skeleton(
        parents=parents,
        offsets=offsets,
        lengths=lengths,
        limits_min=-widths,
        limits_max=widths,
        spinal_flags=spinal,
    )
