"""Mixture density pose head: a Gaussian mixture over the 6-DoF relative pose.

Raw head output layout (width 8M): ``[alpha logits (M) | means (6M, row-major)
| log-sigma (M)]``. Means are used as-is, alphas go through a softmax and
sigmas through ``exp(clip(., -10, 10))``. Each component is isotropic.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import neuralcore as nc
from .geometry import RelativePose6

LOG_2PI = float(np.log(2.0 * np.pi))
LOG_SIGMA_CLAMP = 10.0
POSE_DIM = 6


@dataclass(frozen=True)
class MixtureParams:
    alphas: np.ndarray  # (M,)
    mus: np.ndarray  # (M, 6)
    sigmas: np.ndarray  # (M,)

    def __post_init__(self):
        a = np.array(self.alphas, dtype=float).reshape(-1)
        m = np.array(self.mus, dtype=float).reshape(len(a), POSE_DIM)
        s = np.array(self.sigmas, dtype=float).reshape(len(a))
        if np.any(a < 0) or abs(a.sum() - 1.0) > 1e-12:
            raise ValueError("alphas must lie on the probability simplex")
        if np.any(~np.isfinite(s)) or np.any(s <= 0):
            raise ValueError("sigmas must be positive and finite")
        if not np.all(np.isfinite(m)):
            raise ValueError("means must be finite")
        object.__setattr__(self, "alphas", a)
        object.__setattr__(self, "mus", m)
        object.__setattr__(self, "sigmas", s)

    @property
    def n_components(self) -> int:
        return len(self.alphas)

    def to_flat(self) -> np.ndarray:
        return np.concatenate([self.alphas, self.mus.reshape(-1), self.sigmas])

    @classmethod
    def from_flat(cls, flat, n_components: int | None = None) -> "MixtureParams":
        flat = np.asarray(flat, dtype=float).reshape(-1)
        M = n_components or len(flat) // 8
        if len(flat) != 8 * M:
            raise ValueError(f"flat mixture record must have 8M entries, got {len(flat)}")
        alphas = flat[:M]
        # tolerate rounding drift from text serialisation
        alphas = alphas / alphas.sum()
        return cls(alphas, flat[M : 7 * M].reshape(M, POSE_DIM), flat[7 * M :])


def _softmax(x, axis=-1):
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def activate_flat(raw) -> np.ndarray:
    """Vectorised head activation on (..., 8M) raw outputs; returns flat
    mixture records of the same shape."""
    raw = np.asarray(raw, dtype=float)
    M = raw.shape[-1] // 8
    alphas = _softmax(raw[..., :M])
    # renormalise once more so the simplex holds to ~1 ulp
    alphas = alphas / alphas.sum(axis=-1, keepdims=True)
    sigmas = np.exp(np.clip(raw[..., 7 * M :], -LOG_SIGMA_CLAMP, LOG_SIGMA_CLAMP))
    return np.concatenate([alphas, raw[..., M : 7 * M], sigmas], axis=-1)


def activate_head(raw) -> MixtureParams:
    raw = np.asarray(raw, dtype=float).reshape(-1)
    if raw.size % 8 or not np.all(np.isfinite(raw)):
        raise ValueError("raw head output must be finite with width 8M")
    return MixtureParams.from_flat(activate_flat(raw))


def _norm_const(normalizer: str) -> tuple[float, float]:
    # (multiplier of log sigma, additive constant)
    if normalizer == "6d":
        return float(POSE_DIM), 0.5 * POSE_DIM * LOG_2PI
    if normalizer == "1d":
        return 1.0, 0.5 * LOG_2PI
    raise ValueError(f"normalizer must be '6d' or '1d', got {normalizer!r}")


def component_logdensity(y, mu, sigma: float, normalizer: str = "6d") -> float:
    """Log density of an isotropic Gaussian component.

    ``normalizer='6d'`` is the proper 6-D density; ``'1d'`` keeps a single
    ``1/(sigma sqrt(2 pi))`` factor.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    y = y.as_vector() if isinstance(y, RelativePose6) else np.asarray(y, dtype=float)
    k, c = _norm_const(normalizer)
    d = y - np.asarray(mu, dtype=float)
    return float(-k * np.log(sigma) - c - d @ d / (2.0 * sigma * sigma))


def mixture_logdensity(y, params: MixtureParams, normalizer: str = "6d") -> float:
    y = y.as_vector() if isinstance(y, RelativePose6) else np.asarray(y, dtype=float)
    k, c = _norm_const(normalizer)
    d2 = np.sum((y[None, :] - params.mus) ** 2, axis=1)
    with np.errstate(divide="ignore"):
        log_a = np.log(params.alphas)
    terms = log_a - k * np.log(params.sigmas) - c - d2 / (2.0 * params.sigmas**2)
    m = np.max(terms)
    if not np.isfinite(m):
        return float(m)
    return float(m + np.log(np.sum(np.exp(terms - m))))


def mixture_mean(params: MixtureParams) -> RelativePose6:
    return RelativePose6.from_vector(mixture_mean_vector(params))


def mixture_mean_vector(params: MixtureParams) -> np.ndarray:
    return params.alphas @ params.mus


def mixture_covariance(params: MixtureParams) -> np.ndarray:
    """Law of total variance for an isotropic-component mixture."""
    mean = params.alphas @ params.mus
    second = np.einsum("i,ij,ik->jk", params.alphas, params.mus, params.mus)
    second += np.sum(params.alphas * params.sigmas**2) * np.eye(POSE_DIM)
    cov = second - np.outer(mean, mean)
    return 0.5 * (cov + cov.T)


def batch_moments(flat: np.ndarray, n_components: int) -> tuple[np.ndarray, np.ndarray]:
    """Means (..., 6) and covariances (..., 6, 6) of many flat mixture records."""
    M = n_components
    a = flat[..., :M]
    mus = flat[..., M : 7 * M].reshape(*flat.shape[:-1], M, POSE_DIM)
    s = flat[..., 7 * M :]
    mean = np.einsum("...i,...ij->...j", a, mus)
    d = mus - mean[..., None, :]
    cov = np.einsum("...i,...ij,...ik->...jk", a, d, d)
    cov = cov + np.sum(a * s**2, axis=-1)[..., None, None] * np.eye(POSE_DIM)
    return mean, cov


def sample(params: MixtureParams, seed=None, size: int | None = None):
    """Draw from the mixture. Returns a :class:`RelativePose6` when ``size``
    is None, otherwise a (size, 6) array."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n = 1 if size is None else size
    idx = rng.choice(params.n_components, size=n, p=params.alphas)
    draws = params.mus[idx] + rng.standard_normal((n, POSE_DIM)) * params.sigmas[idx, None]
    if size is None:
        return RelativePose6.from_vector(draws[0])
    return draws


# --- serialisation -----------------------------------------------------------------


def record_columns(n_components: int) -> list[str]:
    M = n_components
    mu = [f"mu{i}_{j}" for i in range(M) for j in range(POSE_DIM)]
    return [f"alpha{i}" for i in range(M)] + mu + [f"sigma{i}" for i in range(M)]


def format_mixture_records(records: np.ndarray, cameras: Sequence[str], header: str | None = None) -> str:
    """CSV text of (T, N, 8M) mixture records: one row per (step, camera)."""
    records = np.asarray(records, dtype=float)
    T, N, W = records.shape
    if N != len(cameras) or W % 8:
        raise nc.ShapeError(f"records {records.shape} do not match {len(cameras)} cameras")
    lines = [f"# {header}"] if header else []
    lines.append(",".join(["step", "camera", *record_columns(W // 8)]))
    for t in range(T):
        for n, cam in enumerate(cameras):
            lines.append(",".join([str(t), cam, *(repr(float(v)) for v in records[t, n])]))
    return "\n".join(lines) + "\n"


def parse_mixture_records(text: str) -> tuple[np.ndarray, list[str]]:
    """Inverse of :func:`format_mixture_records`; returns (records, cameras)."""
    rows = [ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    if not rows:
        raise ValueError("empty mixture record file")
    head = rows[0].split(",")
    M = (len(head) - 2) // 8
    if head[:2] != ["step", "camera"] or head[2:] != record_columns(M):
        raise ValueError("unexpected mixture record header")
    steps, cams, vals = [], [], []
    for ln in rows[1:]:
        parts = ln.split(",")
        steps.append(int(parts[0]))
        cams.append(parts[1])
        vals.append([float(v) for v in parts[2:]])
    cameras = list(dict.fromkeys(cams))
    N = len(cameras)
    if len(vals) % N or steps != [i // N for i in range(len(vals))]:
        raise ValueError("mixture records must list every camera for every step")
    return np.array(vals).reshape(len(vals) // N, N, 8 * M), cameras


# --- graph versions ------------------------------------------------------------------


def mixture_nll_node(raw: nc.Node, targets, n_components: int, normalizer: str = "6d") -> nc.Node:
    """Mean negative log-likelihood of ``targets`` (B, 6) under the mixtures
    encoded by ``raw`` (B, 8M)."""
    M = n_components
    k, c = _norm_const(normalizer)
    B = raw.shape[0]
    log_alpha = nc.log_softmax(raw[:, :M], axis=-1)
    mus = nc.reshape(raw[:, M : 7 * M], (B, M, POSE_DIM))
    log_sigma = nc.clip(raw[:, 7 * M :], -LOG_SIGMA_CLAMP, LOG_SIGMA_CLAMP)
    y = nc.const(np.asarray(targets, dtype=float)[:, None, :])
    d2 = nc.reduce_sum(nc.square(nc.sub(y, mus)), axis=-1)
    inv_two_var = nc.mul(nc.exp(nc.mul(log_sigma, -2.0)), 0.5)
    comp = nc.sub(nc.sub(nc.mul(log_sigma, -k), c), nc.mul(d2, inv_two_var))
    ll = nc.logsumexp(nc.add(log_alpha, comp), axis=-1)
    return nc.mul(nc.reduce_mean(ll), -1.0)


# --- per-camera model ---------------------------------------------------------------


def make_windows(features: np.ndarray, window: int) -> np.ndarray:
    """Causal windows (T, W, D) ending at each step; the first row is repeated
    to pad the start of the sequence."""
    features = np.asarray(features, dtype=float)
    T = features.shape[0]
    idx = np.arange(T)[:, None] + np.arange(-window + 1, 1)[None, :]
    return features[np.clip(idx, 0, T - 1)]


@dataclass
class MdnConfig:
    feature_dim: int = 32
    hidden: int = 64
    window: int = 5
    components: int = 5
    normalizer: str = "6d"


class MdnModel:
    """Bidirectional LSTM over a causal feature window followed by the mixture
    head. The output at the window's last position is the encoding for step t."""

    def __init__(self, config: MdnConfig, seed: int = 0, store: nc.ParamStore | None = None):
        self.config = config
        if store is None:
            rng = np.random.default_rng(seed)
            D, H, M = config.feature_dim, config.hidden, config.components
            store = nc.ParamStore()
            store.add_lstm("fwd", D, H, rng)
            store.add_lstm("bwd", D, H, rng)
            store.add_dense("head", 2 * H, 8 * M, rng)
        self.store = store

    def raw_node(self, leaves, windows) -> nc.Node:
        windows = np.asarray(windows, dtype=float)
        if windows.ndim != 3 or windows.shape[2] != self.config.feature_dim:
            raise nc.ShapeError(f"windows must be (B, W, {self.config.feature_dim}), got {windows.shape}")
        xs = [nc.const(windows[:, k, :]) for k in range(windows.shape[1])]
        outs = nc.bilstm_window(
            xs, nc.sub_params(leaves, "fwd"), nc.sub_params(leaves, "bwd"), self.config.hidden
        )
        return nc.dense(outs[-1], leaves["head.W"], leaves["head.b"])

    def loss_node(self, leaves, windows, targets) -> nc.Node:
        raw = self.raw_node(leaves, windows)
        return mixture_nll_node(raw, targets, self.config.components, self.config.normalizer)

    def predict_flat(self, windows, chunk: int = 4096) -> np.ndarray:
        """Activated mixture records (B, 8M) for a batch of windows."""
        consts = {k: nc.const(v) for k, v in self.store.params.items()}
        out = [
            activate_flat(self.raw_node(consts, windows[i : i + chunk]).value)
            for i in range(0, len(windows), chunk)
        ]
        return np.concatenate(out, axis=0)

    def predict_sequence(self, features) -> np.ndarray:
        return self.predict_flat(make_windows(features, self.config.window))

    def init_head_bias(self, targets: np.ndarray) -> None:
        """Start every component at the target mean with the target spread."""
        M = self.config.components
        b = self.store.params["head.b"]
        b[M : 7 * M] = np.tile(targets.mean(axis=0), M)
        b[7 * M :] = np.log(max(float(np.sqrt(targets.var(axis=0).mean())), 1e-3))


def nll(batch: Sequence[tuple], head: MdnModel) -> nc.Node:
    """Mean NLL over ``(window, target)`` pairs, differentiable w.r.t. the
    model's parameters (the returned node's leaves are fresh per call)."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    windows = np.stack([np.asarray(w, dtype=float) for w, _ in batch])
    targets = np.stack([np.asarray(y.as_vector() if isinstance(y, RelativePose6) else y) for _, y in batch])
    loss = head.loss_node(head.store.leaves(), windows, targets)
    if not np.isfinite(loss.value):
        raise nc.TrainingDivergedError("non-finite NLL")
    return loss


@dataclass
class MdnTrainConfig:
    epochs: int = 20
    batch_size: int = 128
    lr: float = 1e-3
    patience: int = 8
    factor: float = 0.7


def train_mdn(
    model: MdnModel,
    train_windows: np.ndarray,
    train_targets: np.ndarray,
    val_windows: np.ndarray,
    val_targets: np.ndarray,
    config: MdnTrainConfig,
    seed: int,
    on_epoch=None,
) -> tuple[MdnModel, list[nc.EpochRecord]]:
    model.init_head_bias(train_targets)

    def batch_loss(leaves, idx, rng):
        return model.loss_node(leaves, train_windows[idx], train_targets[idx])

    def val_loss(store):
        consts = {k: nc.const(v) for k, v in store.params.items()}
        total = 0.0
        for i in range(0, len(val_windows), 4096):
            w, y = val_windows[i : i + 4096], val_targets[i : i + 4096]
            total += float(model.loss_node(consts, w, y).value) * len(w)
        return total / len(val_windows)

    best, log = nc.fit(
        model.store,
        batch_loss,
        len(train_windows),
        val_loss,
        config.epochs,
        config.batch_size,
        seed,
        config.lr,
        config.patience,
        config.factor,
        on_epoch=on_epoch,
    )
    return MdnModel(model.config, store=best), log
