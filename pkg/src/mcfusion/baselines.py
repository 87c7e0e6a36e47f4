"""Classical fusion baselines fed with per-camera mixture moments.

The Kalman filter tracks the relative pose itself under a random-walk process
model with identity measurement matrix. Angle residuals are wrapped, which is
the only nonlinearity kept.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .geometry import wrap_angle

DIM = 6
REG = 1e-9


class KalmanNumericalError(FloatingPointError):
    pass


@dataclass(frozen=True)
class KfState:
    x: np.ndarray
    P: np.ndarray
    # an exactly uninformative prior; the first update adopts the measurement
    diffuse: bool = False

    def __post_init__(self):
        x = np.array(self.x, dtype=float).reshape(DIM)
        P = np.array(self.P, dtype=float).reshape(DIM, DIM)
        if not self.diffuse:
            if np.max(np.abs(P - P.T)) > 1e-10 * max(1.0, np.max(np.abs(P))):
                raise ValueError("P must be symmetric")
            if np.min(np.linalg.eigvalsh(P)) < -1e-10:
                raise ValueError("P must be positive semi-definite")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "P", P)

    @classmethod
    def uninformative(cls) -> "KfState":
        return cls(np.zeros(DIM), np.zeros((DIM, DIM)), diffuse=True)


@dataclass(frozen=True)
class ProcessModel:
    Q: np.ndarray

    def __post_init__(self):
        Q = np.array(self.Q, dtype=float).reshape(DIM, DIM)
        if np.max(np.abs(Q - Q.T)) > 1e-12 or np.min(np.linalg.eigvalsh(Q)) < -1e-12:
            raise ValueError("Q must be symmetric positive semi-definite")
        object.__setattr__(self, "Q", Q)

    @classmethod
    def diagonal(cls, q_trans: float, q_rot: float) -> "ProcessModel":
        return cls(np.diag([q_trans] * 3 + [q_rot] * 3))


def kf_predict(state: KfState, model: ProcessModel) -> KfState:
    if state.diffuse:
        return state
    return KfState(state.x, state.P + model.Q)


def _regularise(R: np.ndarray) -> np.ndarray:
    R = 0.5 * (R + np.swapaxes(R, -1, -2))
    lo = np.linalg.eigvalsh(R)[..., 0]
    bad = lo <= 0
    if np.any(bad):
        R = R + np.where(bad, REG, 0.0)[..., None, None] * np.eye(DIM)
    return R


def _innovation(z, x):
    r = z - x
    r[..., 3:] = wrap_angle(r[..., 3:])
    return r


def _update_batch(x, P, z, R):
    """Joseph-form update on batched (S, 6) / (S, 6, 6) arrays."""
    S = P + R
    try:
        K = np.swapaxes(np.linalg.solve(S, P), -1, -2)
    except np.linalg.LinAlgError as exc:
        raise KalmanNumericalError("innovation covariance not invertible") from exc
    x = x + np.einsum("...ij,...j->...i", K, _innovation(z, x))
    x[..., 3:] = wrap_angle(x[..., 3:])
    IK = np.eye(DIM) - K
    P = IK @ P @ np.swapaxes(IK, -1, -2) + K @ R @ np.swapaxes(K, -1, -2)
    return x, 0.5 * (P + np.swapaxes(P, -1, -2))


def kf_update(state: KfState, z, R) -> KfState:
    z = np.asarray(z, dtype=float).reshape(DIM)
    R = _regularise(np.asarray(R, dtype=float).reshape(DIM, DIM))
    if state.diffuse:
        x = z.copy()
        x[3:] = wrap_angle(x[3:])
        return KfState(x, R)
    x, P = _update_batch(state.x[None].copy(), state.P[None], z[None], R[None])
    if not np.all(np.isfinite(P)):
        raise KalmanNumericalError("non-finite posterior covariance")
    return KfState(x[0], P[0])


def kf_fuse_batch(means, covs, model: ProcessModel, initial: KfState | None = None) -> np.ndarray:
    """Filter many sequences at once.

    ``means`` is (S, T, N, 6) and ``covs`` (S, T, N, 6, 6): per sequence, step
    and camera. Each step predicts, then updates camera by camera in order.
    Returns posterior means (S, T, 6).
    """
    means = np.asarray(means, dtype=float)
    covs = _regularise(np.asarray(covs, dtype=float))
    S, T, N, _ = means.shape
    if T < 1 or N < 1:
        raise ValueError("need at least one step and one camera")
    initial = initial or KfState.uninformative()
    x = np.tile(initial.x, (S, 1))
    P = np.tile(initial.P, (S, 1, 1))
    diffuse = initial.diffuse
    out = np.empty((S, T, DIM))
    for t in range(T):
        if not diffuse:
            P = P + model.Q
        for n in range(N):
            if diffuse:
                x = means[:, t, n].copy()
                x[:, 3:] = wrap_angle(x[:, 3:])
                P = covs[:, t, n].copy()
                diffuse = False
            else:
                x, P = _update_batch(x, P, means[:, t, n], covs[:, t, n])
        out[:, t] = x
    if not np.all(np.isfinite(out)):
        raise KalmanNumericalError("non-finite filter output")
    return out


def kf_fuse_sequence(measurements, model: ProcessModel, initial: KfState | None = None) -> np.ndarray:
    """``measurements[t][n] = (mean, covariance)``; returns (T, 6) posterior means."""
    means = np.array([[m for m, _ in step] for step in measurements], dtype=float)
    covs = np.array([[c for _, c in step] for step in measurements], dtype=float)
    return kf_fuse_batch(means[None], covs[None], model, initial)[0]


def inverse_variance_average(measurements):
    """Static information-weighted fusion of ``(mean, covariance)`` pairs."""
    info = np.zeros((DIM, DIM))
    vec = np.zeros(DIM)
    for z, R in measurements:
        R = np.asarray(R, dtype=float)
        try:
            Ri = np.linalg.inv(R)
        except np.linalg.LinAlgError as exc:
            raise KalmanNumericalError("singular measurement covariance") from exc
        if not np.all(np.isfinite(Ri)) or np.linalg.cond(R) > 1e15:
            raise KalmanNumericalError("singular measurement covariance")
        info += Ri
        vec += Ri @ np.asarray(z, dtype=float)
    cov = np.linalg.inv(info)
    return cov @ vec, 0.5 * (cov + cov.T)


def ivw_fuse_batch(means, covs) -> np.ndarray:
    """Per-step inverse-variance average over cameras: (S, T, N, 6) -> (S, T, 6)."""
    covs = _regularise(np.asarray(covs, dtype=float))
    info = np.linalg.inv(covs)
    total = info.sum(axis=2)
    vec = np.einsum("...nij,...nj->...i", info, means)
    return np.linalg.solve(total, vec[..., None])[..., 0]


def tune_process_noise(
    means,
    covs,
    targets,
    trans_grid=tuple(np.logspace(-5, -1, 9)),
    rot_grid=tuple(np.logspace(-7, -3, 5)),
) -> tuple[ProcessModel, float]:
    """Grid search of a diagonal Q minimising mean translation RMSE over the
    given sequences; returns the best model and its score."""
    targets = np.asarray(targets, dtype=float)
    best = (None, np.inf)
    for qt, qr in itertools.product(trans_grid, rot_grid):
        model = ProcessModel.diagonal(qt, qr)
        est = kf_fuse_batch(means, covs, model)
        err = np.linalg.norm(est[..., :3] - targets[..., :3], axis=-1)
        score = float(np.mean(np.sqrt(np.mean(err**2, axis=-1))))
        if score < best[1]:
            best = (model, score)
    return best
