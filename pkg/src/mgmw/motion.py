"""Motion sequences and their temporal derivatives.

A motion is an ``n x m`` array of per-frame values, either joint angles
(radians, three per articulated joint) or joint positions (length units,
three per joint).  Frame rate defaults to 1, so finite differences are
per-frame quantities.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ANGLES",
    "POSITIONS",
    "Motion",
    "second_difference",
    "second_derivative",
    "first_difference",
    "mean_frame_deviation",
]

ANGLES = "angles"
POSITIONS = "positions"


@dataclass
class Motion:
    representation: str
    frames: np.ndarray          # (n, m) float64
    frame_rate: float = 1.0

    def __post_init__(self):
        if self.representation not in (ANGLES, POSITIONS):
            raise ValueError(f"unknown representation {self.representation!r}")
        frames = np.asarray(self.frames, dtype=float)
        if frames.ndim != 2:
            raise ValueError("frames must be a 2-D array of shape (n, m)")
        if frames.shape[0] < 3:
            raise ValueError("a motion needs at least 3 frames")
        if not np.all(np.isfinite(frames)):
            raise ValueError("motion frames must be finite")
        self.frames = frames

    @property
    def frame_count(self) -> int:
        return self.frames.shape[0]

    @property
    def dof_count(self) -> int:
        return self.frames.shape[1]

    def copy(self) -> "Motion":
        return Motion(self.representation, self.frames.copy(), self.frame_rate)

    def with_frames(self, frames: np.ndarray) -> "Motion":
        return Motion(self.representation, frames, self.frame_rate)

    def resample(self, frame_count: int) -> "Motion":
        """Linear interpolation in time onto ``frame_count`` frames."""
        n = self.frame_count
        if frame_count == n:
            return self.copy()
        if frame_count < 3:
            raise ValueError("resampling target must keep at least 3 frames")
        src = np.linspace(0.0, 1.0, n)
        dst = np.linspace(0.0, 1.0, frame_count)
        out = np.empty((frame_count, self.dof_count))
        for j in range(self.dof_count):
            out[:, j] = np.interp(dst, src, self.frames[:, j])
        return Motion(self.representation, out, self.frame_rate)


def second_difference(values: np.ndarray) -> np.ndarray:
    """Central second difference along axis 0, endpoints copying the nearest
    interior row so the output keeps the input's length."""
    values = np.asarray(values, dtype=float)
    if values.shape[0] < 3:
        raise ValueError("second difference needs at least 3 frames")
    out = np.empty_like(values)
    out[1:-1] = values[2:] - 2.0 * values[1:-1] + values[:-2]
    out[0] = out[1]
    out[-1] = out[-2]
    return out


def second_derivative(motion: Motion) -> np.ndarray:
    """Per-frame acceleration of a motion (unit frame time)."""
    return second_difference(motion.frames)


def first_difference(values: np.ndarray) -> np.ndarray:
    """Forward first difference along axis 0, last row copying the previous one."""
    values = np.asarray(values, dtype=float)
    if values.shape[0] < 2:
        raise ValueError("first difference needs at least 2 frames")
    out = np.empty_like(values)
    out[:-1] = values[1:] - values[:-1]
    out[-1] = out[-2]
    return out


def mean_frame_deviation(a: np.ndarray, b: np.ndarray) -> float:
    """Whole-motion Euclidean distance divided by the frame count.

    This is the per-sample deviation used both as the attack's stopping
    distance and as the batch position-deviation metric.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.linalg.norm(a - b) / a.shape[0])
