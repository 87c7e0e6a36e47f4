"""Staged training and evaluation over simulated scenario sets.

Stage 1 trains one mixture head per camera on its own feature stream; stage 2
freezes the heads and trains the fusion network on their mixture outputs.
Evaluation reports translation RPE per method and per condition.
"""

from __future__ import annotations

import csv
import io
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import baselines, mdn
from .config import CONDITIONS, ExperimentConfig
from .fusion import mixture_records as fusion_records
from .fusion import FusionConfig, FusionNet, FusionTrainConfig, train_fusion
from .geometry import RpeStats, Trajectory, accumulate, rpe_translation_errors
from .neuralcore import EpochRecord, ParamStore, load_checkpoint, save_checkpoint
from .simulator import SimScenario, simulate_scenario

log = logging.getLogger(__name__)

SPLITS = {"train": 0, "val": 1, "test": 2}
FUSION = "FUSION"
EKF = "EKF"
IVW = "IVW"
POOLED = "all"


def scenario_seed(master: int, split: str, index: int) -> int:
    ss = np.random.SeedSequence([int(master), SPLITS[split], int(index)])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def build_split(cfg: ExperimentConfig, split: str) -> list[SimScenario]:
    rig = cfg.build_rig()
    conds = cfg.conditions(rig)
    labels = getattr(cfg.data, split).labels()
    return [
        simulate_scenario(cfg.data.steps, cfg.data.dt, rig, conds[lab], scenario_seed(cfg.seed, split, i))
        for i, lab in enumerate(labels)
    ]


# --- stage 1 ----------------------------------------------------------------------


def mdn_config(cfg: ExperimentConfig) -> mdn.MdnConfig:
    m = cfg.model
    return mdn.MdnConfig(cfg.rig.feature_dim, m.mdn_hidden, m.window, m.components, m.normalizer)


def mdn_dataset(scenarios, camera: int, window: int) -> tuple[np.ndarray, np.ndarray]:
    W = [mdn.make_windows(s.sequences[camera].features, window) for s in scenarios]
    Y = [s.ground_truth_relatives() for s in scenarios]
    return np.concatenate(W), np.concatenate(Y)


def train_heads(cfg: ExperimentConfig, train, val, on_epoch=None) -> tuple[list[mdn.MdnModel], dict]:
    t = cfg.train
    tc = mdn.MdnTrainConfig(t.mdn_epochs, t.mdn_batch, t.lr, t.patience, t.factor)
    heads, logs = [], {}
    train = train[:: max(1, t.mdn_sequence_stride)]
    for n, name in enumerate(cfg.rig.cameras):
        Wt, Yt = mdn_dataset(train, n, cfg.model.window)
        Wv, Yv = mdn_dataset(val, n, cfg.model.window)
        seed = scenario_seed(cfg.seed, "train", 10_000 + n)
        model = mdn.MdnModel(mdn_config(cfg), seed=seed)
        cb = (lambda rec, store, name=name: on_epoch(name, rec, store)) if on_epoch else None
        model, hist = mdn.train_mdn(model, Wt, Yt, Wv, Yv, tc, seed + 1, on_epoch=cb)
        log.info("mdn %s: best val nll %.4f", name, min(r.val_loss for r in hist))
        heads.append(model)
        logs[name] = hist
    return heads, logs


def mixture_records(heads, scenario: SimScenario) -> np.ndarray:
    """(T, N, 8M) activated mixture parameters for every camera and step."""
    return fusion_records(scenario, heads)


# --- stage 2 ----------------------------------------------------------------------


def fusion_config(cfg: ExperimentConfig) -> FusionConfig:
    m = cfg.model
    return FusionConfig(
        len(cfg.rig.cameras), m.components, m.fusion_latent, m.fusion_hidden, m.dropout, m.camera_dropout, m.lambda_phi
    )


def fusion_dataset(heads, scenarios) -> tuple[np.ndarray, np.ndarray]:
    X = np.stack([mixture_records(heads, s).reshape(s.steps, -1) for s in scenarios])
    Y = np.stack([s.ground_truth_relatives() for s in scenarios])
    return X, Y


def train_fusion_stage(cfg: ExperimentConfig, heads, train, val, on_epoch=None) -> tuple[FusionNet, list[EpochRecord]]:
    Xt, Yt = fusion_dataset(heads, train)
    Xv, Yv = fusion_dataset(heads, val)
    t = cfg.train
    tc = FusionTrainConfig(t.fusion_epochs, t.fusion_batch, t.lr, t.patience, t.factor, t.fusion_chunk or None)
    return train_fusion(Xt, Yt, Xv, Yv, fusion_config(cfg), tc, scenario_seed(cfg.seed, "train", 20_000), on_epoch)


@dataclass
class TrainedSystem:
    heads: list
    net: FusionNet
    mdn_logs: dict = field(default_factory=dict)
    fusion_log: list = field(default_factory=list)


def train_system(cfg: ExperimentConfig, train=None, val=None) -> TrainedSystem:
    train = train if train is not None else build_split(cfg, "train")
    val = val if val is not None else build_split(cfg, "val")
    heads, mlogs = train_heads(cfg, train, val)
    net, flog = train_fusion_stage(cfg, heads, train, val)
    return TrainedSystem(heads, net, mlogs, flog)


# --- evaluation -------------------------------------------------------------------


@dataclass
class MetricsReport:
    """RPE table keyed by (method, condition); ``None`` marks a not-run cell."""

    cells: dict
    methods: list
    conditions: list
    meta: dict = field(default_factory=dict)

    def get(self, method: str, condition: str = POOLED) -> RpeStats | None:
        return self.cells[(method, condition)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        if "config_hash" in self.meta:
            buf.write(f"# config_hash={self.meta['config_hash']}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "condition", "rmse", "max", "mean", "std"])
        for m in self.methods:
            for c in self.conditions:
                st = self.cells.get((m, c))
                if st is None:
                    w.writerow([m, c, "NR", "NR", "NR", "NR"])
                else:
                    w.writerow([m, c, *(repr(v) for v in st.as_tuple())])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "MetricsReport":
        meta = {}
        rows = []
        for line in text.splitlines():
            if line.startswith("#"):
                k, _, v = line[1:].strip().partition("=")
                meta[k.strip()] = v.strip()
            elif line.strip():
                rows.append(line)
        reader = csv.reader(rows)
        header = next(reader)
        if header != ["method", "condition", "rmse", "max", "mean", "std"]:
            raise ValueError(f"unexpected metrics header {header}")
        cells, methods, conds = {}, [], []
        for m, c, *vals in reader:
            if m not in methods:
                methods.append(m)
            if c not in conds:
                conds.append(c)
            cells[(m, c)] = None if vals[0] == "NR" else RpeStats(*(float(v) for v in vals))
        return cls(cells, methods, conds, meta)


def sequence_errors(pred_rel: np.ndarray, scenario: SimScenario) -> np.ndarray:
    """Translation RPE (delta 1) of an accumulated (T, 6) prediction."""
    gt = scenario.trajectory
    est = accumulate(gt.poses[0], pred_rel, gt.timestamps)
    return rpe_translation_errors(est, gt, 1)


def predicted_trajectory(pred_rel: np.ndarray, scenario: SimScenario) -> Trajectory:
    gt = scenario.trajectory
    return accumulate(gt.poses[0], pred_rel, gt.timestamps)


def method_predictions(
    system: TrainedSystem,
    scenarios,
    methods=("per-camera", "fusion", "ekf", "ivw"),
    process_model: baselines.ProcessModel | None = None,
) -> tuple[dict[str, list[np.ndarray]], dict]:
    """Per-method lists of (T, 6) relative-pose predictions, one per scenario."""
    M = system.heads[0].config.components
    names = [s.camera for s in scenarios[0].sequences]
    records = [mixture_records(system.heads, s) for s in scenarios]
    moments = [mdn.batch_moments(r, M) for r in records]
    preds: dict[str, list[np.ndarray]] = {}
    info = {}
    if "per-camera" in methods:
        for n, name in enumerate(names):
            preds[name] = [mean[:, n] for mean, _ in moments]
    if "fusion" in methods:
        preds[FUSION] = [system.net.predict(r.reshape(r.shape[0], -1)) for r in records]
    if "ekf" in methods or "ivw" in methods:
        means = np.stack([m for m, _ in moments])
        covs = np.stack([c for _, c in moments])
        if "ekf" in methods:
            if process_model is None:
                targets = np.stack([s.ground_truth_relatives() for s in scenarios])
                process_model, score = baselines.tune_process_noise(means, covs, targets)
                info["ekf_tuning_score"] = score
            info["ekf_Q_diag"] = np.diag(process_model.Q).tolist()
            preds[EKF] = list(baselines.kf_fuse_batch(means, covs, process_model))
        if "ivw" in methods:
            preds[IVW] = list(baselines.ivw_fuse_batch(means, covs))
    return preds, info


def report_from_errors(errors: dict[str, list[np.ndarray]], labels: list[str], meta=None) -> MetricsReport:
    conds = [c for c in CONDITIONS] + [POOLED]
    cells = {}
    for m, per_seq in errors.items():
        for c in conds:
            picked = [e for e, lab in zip(per_seq, labels) if c == POOLED or lab == c]
            cells[(m, c)] = RpeStats.from_errors(np.concatenate(picked)) if picked else None
    return MetricsReport(cells, list(errors), conds, dict(meta or {}))


def evaluate(
    system: TrainedSystem,
    scenarios,
    methods=("per-camera", "fusion", "ekf", "ivw"),
    process_model=None,
    meta=None,
) -> tuple[MetricsReport, dict]:
    preds, info = method_predictions(system, scenarios, methods, process_model)
    errors = {m: [sequence_errors(p, s) for p, s in zip(ps, scenarios)] for m, ps in preds.items()}
    labels = [s.condition.label for s in scenarios]
    report = report_from_errors(errors, labels, meta)
    return report, {"predictions": preds, "errors": errors, **info}


def configured_noise_variance(cfg: ExperimentConfig) -> dict[tuple[str, str], float]:
    """Translation noise variance each (camera, condition) cell was simulated
    with, outlier inflation included."""
    rig = cfg.build_rig()
    out = {}
    for label, cond in cfg.conditions(rig).items():
        for n, cam in enumerate(rig.cameras):
            out[(cam.name, label)] = cam.trans_noise**2 * cond.effective_variance_factor(n)
    return out


def predicted_total_variance(system: TrainedSystem, scenarios) -> dict[tuple[str, str], float]:
    """Mean trace of the per-camera mixture covariance, by (camera, condition)."""
    M = system.heads[0].config.components
    sums: dict[tuple[str, str], list] = {}
    for s in scenarios:
        rec = mixture_records(system.heads, s)
        _, cov = mdn.batch_moments(rec, M)
        tr = np.trace(cov, axis1=-2, axis2=-1)  # (T, N)
        for n, seq in enumerate(s.sequences):
            sums.setdefault((seq.camera, s.condition.label), []).append(tr[:, n])
    return {k: float(np.mean(np.concatenate(v))) for k, v in sums.items()}


# --- artifacts --------------------------------------------------------------------


def mdn_checkpoint_path(directory, camera: str) -> Path:
    return Path(directory) / f"mdn_{camera}.ckpt"


def fusion_checkpoint_path(directory) -> Path:
    return Path(directory) / "fusion.ckpt"


def save_heads(directory, cfg: ExperimentConfig, heads) -> list[Path]:
    paths = []
    for name, head in zip(cfg.rig.cameras, heads):
        p = mdn_checkpoint_path(directory, name)
        meta = {"camera": name, "config_hash": cfg.config_hash(), "kind": "mdn"}
        save_checkpoint(p, head.store.params, meta)
        paths.append(p)
    return paths


def missing_heads(directory, cfg: ExperimentConfig) -> list[Path]:
    return [p for p in (mdn_checkpoint_path(directory, n) for n in cfg.rig.cameras) if not p.exists()]


def load_heads(directory, cfg: ExperimentConfig) -> list[mdn.MdnModel]:
    missing = missing_heads(directory, cfg)
    if missing:
        raise FileNotFoundError("missing MDN checkpoints: " + ", ".join(str(p) for p in missing))
    heads = []
    for name in cfg.rig.cameras:
        template = mdn.MdnModel(mdn_config(cfg))
        arrays, _ = load_checkpoint(mdn_checkpoint_path(directory, name), template.store.shapes())
        store = ParamStore()
        for k, v in arrays.items():
            store.add(k, v)
        heads.append(mdn.MdnModel(mdn_config(cfg), store=store))
    return heads


def save_fusion(directory, cfg: ExperimentConfig, net: FusionNet) -> Path:
    p = fusion_checkpoint_path(directory)
    save_checkpoint(p, net.arrays(), {"config_hash": cfg.config_hash(), "kind": "fusion"})
    return p


def load_fusion(directory, cfg: ExperimentConfig) -> FusionNet:
    p = fusion_checkpoint_path(directory)
    if not p.exists():
        raise FileNotFoundError(f"missing fusion checkpoint: {p}")
    template = FusionNet(fusion_config(cfg))
    arrays, _ = load_checkpoint(p, template.expected_shapes())
    return FusionNet.from_arrays(fusion_config(cfg), arrays)


def format_training_log(records, header: str | None = None) -> str:
    buf = io.StringIO()
    if header:
        buf.write(f"# {header}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "train_loss", "val_loss", "lr"])
    for r in records:
        w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.lr)])
    return buf.getvalue()


# --- ordering checks --------------------------------------------------------------


def ordering_summary(cfg: ExperimentConfig) -> dict:
    """Train and evaluate one seed end to end; returns the RMSE cells the
    ordering checks compare."""
    system = train_system(cfg)
    test = build_split(cfg, "test")
    report, _ = evaluate(system, test)
    cams = list(cfg.rig.cameras)
    variance = predicted_total_variance(system, test)
    return {
        "seed": cfg.seed,
        "predicted_variance": [[cam, cond, v] for (cam, cond), v in sorted(variance.items())],
        "cameras": {c: {k: report.get(c, k).rmse for k in (*CONDITIONS, POOLED)} for c in cams},
        "fusion": {k: report.get(FUSION, k).rmse for k in (*CONDITIONS, POOLED)},
        "ekf": {k: report.get(EKF, k).rmse for k in (*CONDITIONS, POOLED)},
    }


def ordering_summaries(cfg: ExperimentConfig, seeds, workers: int | None = None) -> list[dict]:
    """:func:`ordering_summary` for several seeds, one process per seed when
    more than one core is available."""
    cfgs = [cfg.with_seed(s) for s in seeds]
    workers = workers or min(len(cfgs), os.cpu_count() or 1)
    if workers <= 1:
        return [ordering_summary(c) for c in cfgs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(ordering_summary, cfgs))
