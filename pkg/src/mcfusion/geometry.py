"""SE(3) pose algebra, trajectory accumulation, similarity alignment and RPE.

Rotations use the intrinsic Z-Y-X (yaw-pitch-roll) Euler convention with the
angle vector ordered ``(roll, pitch, yaw)``::

    R = Rz(yaw) @ Ry(pitch) @ Rx(roll)

Relative poses are expressed in the earlier body frame, so a trajectory is a
left-to-right fold of ``compose`` over its relative steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

GIMBAL_TOL = 1e-9


class AlignmentDegenerateError(ValueError):
    """Raised when a similarity alignment is not uniquely determined."""


class InsufficientLengthError(ValueError):
    """Raised when a trajectory is too short for the requested RPE delta."""


def wrap_angle(a):
    """Wrap angles to (-pi, pi]."""
    a = np.asarray(a, dtype=float)
    return np.pi - np.mod(np.pi - a, 2.0 * np.pi)


@dataclass(frozen=True)
class RelativePose6:
    """6-DoF relative motion: translation ``rho`` (m), Euler ``phi`` (rad)."""

    rho: np.ndarray
    phi: np.ndarray

    def __post_init__(self):
        rho = np.array(self.rho, dtype=float).reshape(3)
        phi = wrap_angle(np.array(self.phi, dtype=float).reshape(3))
        if not (np.all(np.isfinite(rho)) and np.all(np.isfinite(phi))):
            raise ValueError("RelativePose6 components must be finite")
        rho.flags.writeable = False
        phi.flags.writeable = False
        object.__setattr__(self, "rho", rho)
        object.__setattr__(self, "phi", phi)

    @classmethod
    def zero(cls) -> "RelativePose6":
        return cls(np.zeros(3), np.zeros(3))

    @classmethod
    def from_vector(cls, v) -> "RelativePose6":
        v = np.asarray(v, dtype=float).reshape(6)
        return cls(v[:3], v[3:])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.rho, self.phi])


@dataclass(frozen=True)
class AbsolutePose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-9) or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation must be orthonormal with determinant +1")
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "AbsolutePose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def _trusted(cls, R: np.ndarray, t: np.ndarray) -> "AbsolutePose":
        # skips validation; only for products of already-valid rotations
        p = object.__new__(cls)
        object.__setattr__(p, "rotation", R)
        object.__setattr__(p, "translation", t)
        return p

    def as_matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T


@dataclass(frozen=True)
class Trajectory:
    timestamps: np.ndarray
    poses: tuple = field(default_factory=tuple)

    def __post_init__(self):
        ts = np.array(self.timestamps, dtype=float).reshape(-1)
        poses = tuple(self.poses)
        if len(ts) < 1 or len(ts) != len(poses):
            raise ValueError("trajectory needs >= 1 pose and one timestamp per pose")
        if len(ts) > 1 and np.any(np.diff(ts) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        ts.flags.writeable = False
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "poses", poses)

    def __len__(self) -> int:
        return len(self.poses)

    @property
    def positions(self) -> np.ndarray:
        return np.array([p.translation for p in self.poses])

    def relatives(self) -> list[RelativePose6]:
        return [relative(a, b) for a, b in zip(self.poses[:-1], self.poses[1:])]


@dataclass(frozen=True)
class RpeStats:
    rmse: float
    max: float
    mean: float
    std: float

    @classmethod
    def from_errors(cls, errors) -> "RpeStats":
        e = np.asarray(errors, dtype=float).reshape(-1)
        if e.size == 0:
            raise ValueError("no errors to summarise")
        return cls(
            rmse=float(np.sqrt(np.mean(e**2))),
            max=float(np.max(e)),
            mean=float(np.mean(e)),
            std=float(np.std(e)),
        )

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.rmse, self.max, self.mean, self.std)


# --- rotations ---------------------------------------------------------------


def euler_to_matrix(phi) -> np.ndarray:
    roll, pitch, yaw = np.asarray(phi, dtype=float).reshape(3)
    cr, sr = np.cos(roll), np.sin(roll)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cy, sy = np.cos(yaw), np.sin(yaw)
    return np.array(
        [
            [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
            [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
            [-sp, cp * sr, cp * cr],
        ]
    )


def matrix_to_euler(R) -> np.ndarray:
    """Inverse of :func:`euler_to_matrix`.

    At gimbal lock (``cos(pitch) < 1e-9``) roll is fixed to 0 and the whole
    rotation about the vertical is attributed to yaw.
    """
    R = np.asarray(R, dtype=float)
    cp = np.hypot(R[0, 0], R[1, 0])
    pitch = np.arctan2(-R[2, 0], cp)
    if cp < GIMBAL_TOL:
        roll = 0.0
        yaw = np.arctan2(-R[0, 1], R[1, 1])
    else:
        roll = np.arctan2(R[2, 1], R[2, 2])
        yaw = np.arctan2(R[1, 0], R[0, 0])
    return wrap_angle(np.array([roll, pitch, yaw]))


# --- SE(3) -------------------------------------------------------------------


def compose(a: AbsolutePose, b: AbsolutePose) -> AbsolutePose:
    return AbsolutePose._trusted(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def inverse(p: AbsolutePose) -> AbsolutePose:
    Rt = p.rotation.T
    return AbsolutePose._trusted(Rt, -Rt @ p.translation)


def to_pose(rel: RelativePose6) -> AbsolutePose:
    return AbsolutePose._trusted(euler_to_matrix(rel.phi), np.array(rel.rho))


def relative(prev: AbsolutePose, curr: AbsolutePose) -> RelativePose6:
    d = compose(inverse(prev), curr)
    return RelativePose6(d.translation, matrix_to_euler(d.rotation))


def accumulate(
    start: AbsolutePose,
    rels: Iterable[RelativePose6],
    timestamps: Sequence[float] | None = None,
) -> Trajectory:
    """Chain relative steps onto ``start``.

    Without explicit timestamps the poses are stamped 0, 1, 2, ...
    """
    poses = [start]
    for r in rels:
        if isinstance(r, RelativePose6):
            step = to_pose(r)
        else:
            v = np.asarray(r, dtype=float).reshape(6)
            if not np.all(np.isfinite(v)):
                raise ValueError("relative poses must be finite")
            step = AbsolutePose._trusted(euler_to_matrix(v[3:]), v[:3].copy())
        poses.append(compose(poses[-1], step))
    if timestamps is None:
        timestamps = np.arange(len(poses), dtype=float)
    return Trajectory(np.asarray(timestamps, dtype=float), tuple(poses))


# --- alignment ---------------------------------------------------------------


def _as_points(x) -> np.ndarray:
    if isinstance(x, Trajectory):
        return x.positions
    return np.asarray(x, dtype=float).reshape(-1, 3)


def umeyama_align(est, ref, rank_tol: float = 1e-10):
    """Least-squares similarity ``ref ~ s * R @ est + t``.

    Accepts trajectories or (N, 3) point arrays. Returns ``(s, R, t)``.
    Collinear or coincident inputs (covariance rank < 2) are rejected since
    the rotation about the common line is then undetermined; planar inputs
    are fine thanks to the reflection correction.
    """
    X = _as_points(est)
    Y = _as_points(ref)
    if X.shape != Y.shape:
        raise ValueError("est and ref must have equal lengths")
    n = X.shape[0]
    if n < 3:
        raise AlignmentDegenerateError(f"need at least 3 points, got {n}")

    mx, my = X.mean(axis=0), Y.mean(axis=0)
    Xc, Yc = X - mx, Y - my
    var_x = np.sum(Xc**2) / n
    cov = Yc.T @ Xc / n
    U, d, Vt = np.linalg.svd(cov)
    scale_ref = max(d[0], 1e-300)
    if var_x <= 0.0 or d[0] <= 0.0 or d[1] <= rank_tol * scale_ref:
        raise AlignmentDegenerateError("degenerate point configuration")

    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    s = float(np.trace(np.diag(d) @ S) / var_x)
    t = my - s * R @ mx
    return s, R, t


def apply_similarity(traj: Trajectory, s: float, R, t) -> Trajectory:
    R = np.asarray(R, dtype=float)
    t = np.asarray(t, dtype=float)
    poses = tuple(AbsolutePose(R @ p.rotation, s * R @ p.translation + t) for p in traj.poses)
    return Trajectory(traj.timestamps, poses)


# --- relative pose error -------------------------------------------------------


def _check_rpe_inputs(est: Trajectory, ref: Trajectory, delta: int) -> None:
    if delta < 1:
        raise ValueError("delta must be a positive integer")
    if len(est) != len(ref):
        raise ValueError("est and ref must have equal lengths")
    if len(ref) <= delta:
        raise InsufficientLengthError(f"length {len(ref)} <= delta {delta}")
    if not np.allclose(est.timestamps, ref.timestamps, rtol=0.0, atol=1e-6):
        raise ValueError("est and ref timestamps do not match")


def _rpe_deltas(est: Trajectory, ref: Trajectory, delta: int) -> list[AbsolutePose]:
    _check_rpe_inputs(est, ref, delta)
    out = []
    for i in range(len(ref) - delta):
        d_ref = compose(inverse(ref.poses[i]), ref.poses[i + delta])
        d_est = compose(inverse(est.poses[i]), est.poses[i + delta])
        out.append(compose(inverse(d_ref), d_est))
    return out


def _stack(traj: Trajectory) -> tuple[np.ndarray, np.ndarray]:
    return np.array([p.rotation for p in traj.poses]), traj.positions


def rpe_translation_errors(est: Trajectory, ref: Trajectory, delta: int = 1) -> np.ndarray:
    _check_rpe_inputs(est, ref, delta)
    Re, te = _stack(est)
    Rr, tr = _stack(ref)
    # relative motions over delta, expressed in the earlier frame
    de = np.einsum("nji,nj->ni", Re[:-delta], te[delta:] - te[:-delta])
    dr = np.einsum("nji,nj->ni", Rr[:-delta], tr[delta:] - tr[:-delta])
    Rdr = np.einsum("nji,njk->nik", Rr[:-delta], Rr[delta:])
    # translation of inverse(d_ref) * d_est
    return np.linalg.norm(np.einsum("nji,nj->ni", Rdr, de - dr), axis=1)


def rpe_rotation_errors(est: Trajectory, ref: Trajectory, delta: int = 1) -> np.ndarray:
    """Per-pair rotation error angle in radians."""
    out = []
    for e in _rpe_deltas(est, ref, delta):
        c = np.clip((np.trace(e.rotation) - 1.0) / 2.0, -1.0, 1.0)
        out.append(np.arccos(c))
    return np.array(out)


def rpe_translation(est: Trajectory, ref: Trajectory, delta: int = 1) -> RpeStats:
    return RpeStats.from_errors(rpe_translation_errors(est, ref, delta))


def rpe_rotation(est: Trajectory, ref: Trajectory, delta: int = 1) -> RpeStats:
    return RpeStats.from_errors(rpe_rotation_errors(est, ref, delta))
