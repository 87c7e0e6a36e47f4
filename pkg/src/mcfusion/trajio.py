"""Plain-text trajectory files: ``timestamp tx ty tz qx qy qz qw`` per line."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .geometry import AbsolutePose, Trajectory


class TrajectoryParseError(ValueError):
    def __init__(self, path, line_no: int, reason: str):
        self.path = str(path)
        self.line_no = line_no
        self.reason = reason
        super().__init__(f"{path}:{line_no}: {reason}")


def _quat_to_matrix(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if not np.isfinite(n) or n < 1e-12:
        raise ValueError("zero or non-finite quaternion")
    R = Rotation.from_quat(q / n).as_matrix()
    # re-orthonormalise so AbsolutePose's 1e-9 check holds for 7-digit files
    U, _, Vt = np.linalg.svd(R)
    return U @ Vt


def read_trajectory(path) -> Trajectory:
    stamps, poses = [], []
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise TrajectoryParseError(path, line_no, f"expected 8 fields, got {len(parts)}")
            try:
                vals = [float(p) for p in parts]
                R = _quat_to_matrix(vals[4:8])
            except ValueError as exc:
                raise TrajectoryParseError(path, line_no, str(exc)) from None
            stamps.append(vals[0])
            poses.append(AbsolutePose(R, vals[1:4]))
    if not poses:
        raise TrajectoryParseError(path, 0, "no poses found")
    try:
        return Trajectory(np.array(stamps), tuple(poses))
    except ValueError as exc:
        raise TrajectoryParseError(path, 0, str(exc)) from None


def format_trajectory(traj: Trajectory, header: str | None = None) -> str:
    lines = []
    if header:
        lines.extend(f"# {h}" for h in header.splitlines())
    for ts, p in zip(traj.timestamps, traj.poses):
        q = Rotation.from_matrix(p.rotation).as_quat()
        if q[3] < 0:
            q = -q
        vals = [ts, *p.translation, *q]
        lines.append(" ".join(repr(float(v)) for v in vals))
    return "\n".join(lines) + "\n"


def write_trajectory(path, traj: Trajectory, header: str | None = None) -> None:
    Path(path).write_text(format_trajectory(traj, header))
