"""Batch evaluation of adversarial motions against their originals.

Reported quantities, per batch of (original, adversarial) pairs:

* ``l``: joint position deviation, whole-motion Euclidean norm over n
  frames averaged over samples and frames.
* ``delta_a``: the same norm applied to second differences of positions,
  additionally divided by the joint count.
* ``delta_alpha``: second-difference deviation of the joint angles
  recovered by inverse kinematics (skipped for position-only evaluation).
* ``bone_dev``: mean absolute relative bone-length deviation, averaged
  over samples, frames and bones.  The average is of absolute values;
  signed averaging would let opposite deviations cancel (a ``signed``
  switch restores the raw signed mean).
* ``on_manifold``: fraction of adversarial motions whose every pose
  respects bone lengths and joint limits at the given tolerances.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kinematics import bone_lengths, check_on_manifold, inverse_kinematics
from .motion import Motion, mean_frame_deviation, second_difference
from .skeleton import Skeleton

__all__ = [
    "MetricsReport",
    "compute_metrics",
    "confusion_matrix",
    "deviation_histogram",
    "running_mean_stabilization",
    "format_report_table",
]


@dataclass
class MetricsReport:
    sample_count: int
    l: float
    delta_a: float
    bone_dev: float
    delta_alpha: float | None = None
    on_manifold: float | None = None
    success_rate: float | None = None
    mean_queries: float | None = None

    def as_dict(self) -> dict:
        return {
            "sample_count": self.sample_count,
            "l": self.l,
            "delta_a": self.delta_a,
            "delta_alpha": self.delta_alpha,
            "bone_dev": self.bone_dev,
            "on_manifold": self.on_manifold,
            "success_rate": self.success_rate,
            "mean_queries": self.mean_queries,
        }


def compute_metrics(pairs, skeleton: Skeleton, tol_bone: float = 1e-3,
                    tol_angle: float = 1e-6, include_angle_metrics: bool = True,
                    signed_bone: bool = False, success_rate: float | None = None,
                    mean_queries: float | None = None) -> MetricsReport:
    """Evaluate deviation metrics over (original, adversarial) motion pairs.

    ``include_angle_metrics=False`` reproduces position-only evaluation
    (no inverse kinematics): ``delta_alpha`` and ``on_manifold`` are left
    unset, the situation of datasets where angles are unavailable.
    """
    if not pairs:
        raise ValueError("metrics need at least one motion pair")
    joints = skeleton.joint_count
    ref = skeleton.reference_lengths()

    l_sum = 0.0
    acc_sum = 0.0
    alpha_sum = 0.0
    bone_sum = 0.0
    om_count = 0
    for original, adversarial in pairs:
        x = original.frames if isinstance(original, Motion) else np.asarray(original, dtype=float)
        xp = adversarial.frames if isinstance(adversarial, Motion) else np.asarray(adversarial, dtype=float)
        if x.shape != xp.shape:
            raise ValueError("paired motions must share one shape")
        n = x.shape[0]
        l_sum += mean_frame_deviation(x, xp)
        acc_sum += float(np.linalg.norm(second_difference(x) - second_difference(xp))) / (n * joints)
        lengths_x = bone_lengths(skeleton, x)
        lengths_xp = bone_lengths(skeleton, xp)
        dev = (lengths_x - lengths_xp) / lengths_x
        bone_sum += float(np.mean(dev)) if signed_bone else float(np.mean(np.abs(dev)))
        if include_angle_metrics:
            angles_x = inverse_kinematics(skeleton, _as_motion(original)).angles
            angles_xp = inverse_kinematics(skeleton, _as_motion(adversarial),
                                           reference=angles_x.frames).angles
            alpha_sum += float(np.linalg.norm(
                second_difference(angles_x.frames)
                - second_difference(angles_xp.frames))) / (n * joints)
            verdict = check_on_manifold(skeleton, _as_motion(adversarial), tol_bone,
                                        tol_angle, reference_angles=angles_x.frames)
            om_count += bool(verdict)

    count = len(pairs)
    return MetricsReport(
        sample_count=count,
        l=l_sum / count,
        delta_a=acc_sum / count,
        bone_dev=bone_sum / count,
        delta_alpha=(alpha_sum / count) if include_angle_metrics else None,
        on_manifold=(om_count / count) if include_angle_metrics else None,
        success_rate=success_rate,
        mean_queries=mean_queries,
    )


def _as_motion(value) -> Motion:
    if isinstance(value, Motion):
        return value
    return Motion("positions", np.asarray(value, dtype=float))


def confusion_matrix(records, class_count: int) -> np.ndarray:
    """Counts of (original label -> adversarial label) pairs, (C, C)."""
    counts = np.zeros((class_count, class_count), dtype=int)
    for original, final in records:
        if not (0 <= original < class_count and 0 <= final < class_count):
            raise ValueError(f"label pair ({original}, {final}) out of range")
        counts[original, final] += 1
    return counts


def deviation_histogram(pairs, verdicts, bins=10, value_range=None):
    """Histogram of per-sample whole-motion deviations split by manifold
    membership; returns (edges, on_counts, off_counts)."""
    devs = np.array([
        float(np.linalg.norm(_as_motion(a).frames - _as_motion(b).frames))
        for a, b in pairs])
    flags = np.asarray(verdicts, dtype=bool)
    if devs.size != flags.size:
        raise ValueError("one manifold verdict is needed per pair")
    if value_range is None:
        hi = float(devs.max()) if devs.size else 1.0
        value_range = (0.0, hi if hi > 0 else 1.0)
    on_counts, edges = np.histogram(devs[flags], bins=bins, range=value_range)
    off_counts, _ = np.histogram(devs[~flags], bins=bins, range=value_range)
    return edges, on_counts, off_counts


def running_mean_stabilization(values, rel_tol: float = 0.02, start: int = 8):
    """Smallest batch size at which every doubling changes the running mean
    by less than ``rel_tol`` relative; None if never stabilized.

    Supports protocols that grow the attacked batch until the evaluation
    metrics settle.
    """
    values = np.asarray(values, dtype=float)
    n = start
    while 2 * n <= values.size:
        mean_half = values[:n].mean()
        mean_full = values[:2 * n].mean()
        denom = max(abs(mean_full), 1e-12)
        if abs(mean_full - mean_half) / denom < rel_tol:
            return 2 * n
        n *= 2
    return None


def format_report_table(rows: dict) -> str:
    """Fixed-width text table; rows maps a config label to a MetricsReport."""
    headers = ["setting", "l", "da", "dalpha", "dB/B%", "OM%", "success%", "queries"]
    lines = ["  ".join(f"{h:>10}" for h in headers)]
    for label, report in rows.items():
        cells = [
            f"{label:>10}",
            f"{report.l:>10.4f}",
            f"{report.delta_a:>10.4f}",
            f"{report.delta_alpha:>10.4f}" if report.delta_alpha is not None else f"{'n/a':>10}",
            f"{report.bone_dev * 100:>10.3f}",
            f"{report.on_manifold * 100:>10.1f}" if report.on_manifold is not None else f"{'n/a':>10}",
            f"{report.success_rate * 100:>10.1f}" if report.success_rate is not None else f"{'n/a':>10}",
            f"{report.mean_queries:>10.1f}" if report.mean_queries is not None else f"{'n/a':>10}",
        ]
        lines.append("  ".join(cells))
    return "\n".join(lines)
