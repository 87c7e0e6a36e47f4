"""Deep fusion of per-camera mixtures: MLP projection, LSTM over time, linear
read-out to a fused relative pose, trained on a rotation-weighted pose loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import neuralcore as nc
from .geometry import Trajectory, accumulate

LAMBDA_PHI = 100.0


@dataclass
class FusionConfig:
    n_cameras: int = 6
    components: int = 5
    latent: int = 64
    hidden: int = 64
    dropout: float = 0.1
    camera_dropout: float = 0.1
    lambda_phi: float = LAMBDA_PHI

    @property
    def input_width(self) -> int:
        return self.n_cameras * 8 * self.components


def fusion_loss(predictions, targets, lambda_phi: float = LAMBDA_PHI) -> nc.Node:
    """``(1/T) sum_t |dy_rho|^2 + lambda_phi |dy_phi|^2`` over (T, 6) sequences;
    a leading batch axis (B, T, 6) is averaged as well."""
    z = nc.const(predictions)
    y = np.asarray(targets, dtype=float)
    if z.shape != y.shape or z.shape[-1] != 6 or z.shape[-2] < 1:
        raise nc.ShapeError(f"predictions {z.shape} vs targets {y.shape}")
    w = np.array([1.0, 1.0, 1.0, lambda_phi, lambda_phi, lambda_phi])
    per_step = nc.reduce_sum(nc.mul(nc.square(nc.sub(z, y)), w), axis=-1)
    return nc.reduce_mean(per_step)


class FusionNet:
    """Parameters live in ``store``; input/output standardisation constants in
    ``norm`` (fixed after fitting to the training set)."""

    def __init__(self, config: FusionConfig, seed: int = 0, store: nc.ParamStore | None = None, norm=None):
        self.config = config
        if store is None:
            rng = np.random.default_rng(seed)
            F, L, H = config.input_width, config.latent, config.hidden
            store = nc.ParamStore()
            store.add_dense("in1", F, L, rng)
            store.add_dense("in2", L, L, rng)
            store.add_lstm("rnn", L, H, rng)
            store.add_dense("out", H, 6, rng)
        self.store = store
        F = config.input_width
        self.norm = norm or {
            "in_mean": np.zeros(F),
            "in_std": np.ones(F),
            "out_mean": np.zeros(6),
            "out_std": np.ones(6),
        }

    def fit_normalisation(self, inputs: np.ndarray, targets: np.ndarray) -> None:
        x = inputs.reshape(-1, inputs.shape[-1])
        y = targets.reshape(-1, 6)
        self.norm = {
            "in_mean": x.mean(axis=0),
            "in_std": np.maximum(x.std(axis=0), 1e-6),
            "out_mean": y.mean(axis=0),
            "out_std": np.maximum(y.std(axis=0), 1e-6),
        }

    def forward(self, leaves, inputs, training: bool = False, rng=None) -> list[nc.Node]:
        """``inputs`` is (T, F) or (B, T, F); returns T nodes of shape (6,) or (B, 6)."""
        x = np.asarray(inputs, dtype=float)
        cfg = self.config
        if x.shape[-1] != cfg.input_width or x.ndim not in (2, 3) or x.shape[-2] < 1:
            raise nc.ShapeError(f"fusion input width {x.shape} != {cfg.input_width}")
        x = (x - self.norm["in_mean"]) / self.norm["in_std"]
        if training and cfg.camera_dropout > 0:
            x = self._drop_cameras(x, rng)
        batch = x.shape[0] if x.ndim == 3 else None
        state = nc.LstmState.zeros(cfg.hidden, batch)
        rnn = nc.sub_params(leaves, "rnn")
        outs = []
        for t in range(x.shape[-2]):
            xt = nc.const(x[:, t, :] if batch is not None else x[t])
            p = nc.relu(nc.dense(xt, leaves["in1.W"], leaves["in1.b"]))
            p = nc.dropout(p, cfg.dropout, training, rng)
            p = nc.relu(nc.dense(p, leaves["in2.W"], leaves["in2.b"]))
            p = nc.dropout(p, cfg.dropout, training, rng)
            state = nc.lstm_cell(p, state, rnn)
            z = nc.dense(state.hidden, leaves["out.W"], leaves["out.b"])
            outs.append(nc.add(nc.mul(z, self.norm["out_std"]), self.norm["out_mean"]))
        return outs

    def _drop_cameras(self, x, rng):
        # zero (i.e. set to the training mean) one camera block per sequence
        x = x.copy()
        width = 8 * self.config.components
        seqs = x if x.ndim == 3 else x[None]
        for s in seqs:
            if rng.random() < self.config.camera_dropout:
                n = rng.integers(self.config.n_cameras)
                s[:, n * width : (n + 1) * width] = 0.0
        return x

    def predict(self, inputs) -> np.ndarray:
        consts = {k: nc.const(v) for k, v in self.store.params.items()}
        outs = self.forward(consts, inputs, training=False)
        return np.stack([o.value for o in outs], axis=-2)

    def arrays(self) -> dict[str, np.ndarray]:
        out = dict(self.store.params)
        out.update({f"norm.{k}": v for k, v in self.norm.items()})
        return out

    @classmethod
    def from_arrays(cls, config: FusionConfig, arrays) -> "FusionNet":
        store = nc.ParamStore()
        norm = {}
        for k, v in arrays.items():
            if k.startswith("norm."):
                norm[k[5:]] = np.array(v)
            else:
                store.add(k, v)
        return cls(config, store=store, norm=norm)

    def expected_shapes(self) -> dict[str, tuple]:
        return {k: np.shape(v) for k, v in self.arrays().items()}


def fuse_forward(inputs, net: FusionNet) -> np.ndarray:
    """Fused (T, 6) relative poses for one (T, F) sequence, evaluation mode."""
    return net.predict(inputs)


@dataclass
class FusionTrainConfig:
    epochs: int = 30
    batch_size: int = 4
    lr: float = 1e-3
    patience: int = 8
    factor: float = 0.7
    # training subsequence length; None trains on whole sequences
    chunk: int | None = 20


def chunk_sequences(x: np.ndarray, length: int | None) -> np.ndarray:
    """Cut (S, T, ...) sequences into (S * T // length, length, ...) pieces;
    a ragged tail is dropped."""
    if length is None or length >= x.shape[1]:
        return x
    n = x.shape[1] // length
    x = x[:, : n * length]
    return x.reshape(x.shape[0] * n, length, *x.shape[2:])


def train_fusion(
    train_inputs: np.ndarray,
    train_targets: np.ndarray,
    val_inputs: np.ndarray,
    val_targets: np.ndarray,
    config: FusionConfig,
    train_config: FusionTrainConfig,
    seed: int,
    on_epoch=None,
) -> tuple[FusionNet, list[nc.EpochRecord]]:
    """Stage-2 training on (S, T, F) mixture sequences against (S, T, 6) truth.
    Returns the best-validation network and the per-epoch log."""
    net = FusionNet(config, seed=seed)
    net.fit_normalisation(train_inputs, train_targets)
    train_inputs = chunk_sequences(train_inputs, train_config.chunk)
    train_targets = chunk_sequences(train_targets, train_config.chunk)

    def batch_loss(leaves, idx, rng):
        outs = net.forward(leaves, train_inputs[idx], training=True, rng=rng)
        z = nc.concat([nc.reshape(o, (len(idx), 1, 6)) for o in outs], axis=1)
        return fusion_loss(z, train_targets[idx], config.lambda_phi)

    def val_loss(store):
        probe = FusionNet(config, store=store, norm=net.norm)
        return float(fusion_loss(probe.predict(val_inputs), val_targets, config.lambda_phi).value)

    best, log = nc.fit(
        net.store,
        batch_loss,
        len(train_inputs),
        val_loss,
        train_config.epochs,
        train_config.batch_size,
        seed + 1,
        train_config.lr,
        train_config.patience,
        train_config.factor,
        on_epoch=on_epoch,
    )
    return FusionNet(config, store=best, norm=net.norm), log


def mixture_records(scenario, heads) -> np.ndarray:
    """(T, N, 8M) activated mixture parameters from frozen per-camera heads."""
    if len(heads) != len(scenario.sequences):
        raise nc.ShapeError(f"{len(heads)} heads for {len(scenario.sequences)} cameras")
    return np.stack([h.predict_sequence(s.features) for h, s in zip(heads, scenario.sequences)], axis=1)


def scenario_inputs(scenario, heads) -> np.ndarray:
    """(T, N * 8M) fusion inputs for one scenario, cameras in rig order."""
    rec = mixture_records(scenario, heads)
    return rec.reshape(rec.shape[0], -1)


def predict_sequence(scenario, heads, net: FusionNet) -> Trajectory:
    """Fused relative poses accumulated from the scenario's initial pose."""
    z = fuse_forward(scenario_inputs(scenario, heads), net)
    gt = scenario.trajectory
    return accumulate(gt.poses[0], z, gt.timestamps)
