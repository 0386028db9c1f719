"""Self-describing JSON documents for skeletons, motions, datasets and models.

Floats are written with Python's shortest round-trip representation (17
significant digits when needed), so every document reloads bit-exactly.
Artifacts never embed timestamps; reruns with the same config and seed
produce byte-identical files.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .motion import Motion
from .skeleton import Skeleton

__all__ = [
    "to_jsonable",
    "dump_json",
    "load_json",
    "skeleton_to_dict",
    "skeleton_from_dict",
    "save_motion",
    "load_motion",
]


def to_jsonable(value):
    """Recursively convert numpy scalars/arrays so json can serialize them."""
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.bool_,)):
        return bool(value)
    if isinstance(value, dict):
        return {k: to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    return value


def dump_json(payload: dict, path) -> None:
    text = json.dumps(to_jsonable(payload), indent=1)
    Path(path).write_text(text + "\n")


def load_json(path) -> dict:
    return json.loads(Path(path).read_text())


def skeleton_to_dict(skeleton: Skeleton) -> dict:
    return {
        "parents": [None if p < 0 else int(p) for p in skeleton.parents],
        "offsets": skeleton.offsets.tolist(),
        "lengths": skeleton.lengths.tolist(),
        "limits_min": skeleton.limits_min.tolist(),
        "limits_max": skeleton.limits_max.tolist(),
        "spinal_flags": [bool(f) for f in skeleton.spinal_flags],
    }


def skeleton_from_dict(data: dict) -> Skeleton:
    return Skeleton(
        parents=np.array([-1 if p is None else p for p in data["parents"]], dtype=int),
        offsets=np.array(data["offsets"], dtype=float),
        lengths=np.array(data["lengths"], dtype=float),
        limits_min=np.array(data["limits_min"], dtype=float),
        limits_max=np.array(data["limits_max"], dtype=float),
        spinal_flags=np.array(data["spinal_flags"], dtype=bool),
    )


def save_motion(path, skeleton: Skeleton, motion: Motion) -> None:
    """Single-motion document: skeleton block, representation tag, frames."""
    dump_json({
        "skeleton": skeleton_to_dict(skeleton),
        "representation": motion.representation,
        "frame_rate": motion.frame_rate,
        "frames": motion.frames.tolist(),
    }, path)


def load_motion(path) -> tuple[Skeleton, Motion]:
    data = load_json(path)
    skeleton = skeleton_from_dict(data["skeleton"])
    motion = Motion(data["representation"], np.array(data["frames"], dtype=float),
                    data.get("frame_rate", 1.0))
    return skeleton, motion
