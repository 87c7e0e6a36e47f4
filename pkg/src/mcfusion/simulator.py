"""Synthetic multi-camera odometry: smooth vehicle paths plus per-camera
feature sequences carrying condition-dependent heteroscedastic noise.

Each camera sees the true relative pose corrupted by diagonal Gaussian noise
(occasionally inflated to model occlusion or glare), pushed through a fixed
camera-specific random affine map and a ``tanh``. A network has to learn the
decoder, which keeps the shape of the learning problem without images.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geometry import AbsolutePose, Trajectory, euler_to_matrix, wrap_angle
from .trajio import read_trajectory, write_trajectory

MAX_SPEED = 17.5  # 63 km/h
DEFAULT_FEATURE_DIM = 32
CAMERA_NAMES = ("FRONT", "FRONT_LEFT", "FRONT_RIGHT", "BACK", "BACK_LEFT", "BACK_RIGHT")


@dataclass(frozen=True)
class Camera:
    name: str
    extrinsic: AbsolutePose
    trans_noise: float  # m, per axis
    rot_noise: float  # rad, per axis

    def __post_init__(self):
        if self.trans_noise <= 0 or self.rot_noise <= 0:
            raise ValueError(f"camera {self.name}: noise std-devs must be positive")

    @property
    def noise_std(self) -> np.ndarray:
        return np.array([self.trans_noise] * 3 + [self.rot_noise] * 3)


@dataclass(frozen=True)
class CameraRig:
    cameras: tuple
    feature_dim: int = DEFAULT_FEATURE_DIM
    seed: int = 7
    # optional explicit (A, b) per camera; drawn from ``seed`` when None
    affine: tuple | None = None

    def __post_init__(self):
        if len(self.cameras) < 1:
            raise ValueError("rig needs at least one camera")
        names = [c.name for c in self.cameras]
        if len(set(names)) != len(names):
            raise ValueError("camera names must be unique")
        if self.affine is not None and len(self.affine) != len(self.cameras):
            raise ValueError("one affine map per camera required")

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.cameras]

    def index(self, name: str) -> int:
        return self.names.index(name)

    def affine_maps(self) -> list[tuple[np.ndarray, np.ndarray]]:
        if self.affine is not None:
            return [(np.asarray(A, float), np.asarray(b, float)) for A, b in self.affine]
        D = self.feature_dim
        # per-column gain follows the typical per-step magnitude of each pose
        # component: forward motion is ~1 m, sideways/vertical motion and
        # angles are one to two orders smaller
        col_scale = np.array([0.5, 5.0, 5.0, 15.0, 15.0, 15.0])
        maps = []
        for n in range(len(self.cameras)):
            rng = np.random.default_rng([self.seed, n])
            A = rng.standard_normal((D, 6)) * col_scale / np.sqrt(2.0)
            b = rng.normal(0.0, 0.2, size=D)
            maps.append((A, b))
        return maps

    def to_dict(self) -> dict:
        return {
            "feature_dim": self.feature_dim,
            "seed": self.seed,
            "cameras": [
                {
                    "name": c.name,
                    "rotation": c.extrinsic.rotation.tolist(),
                    "translation": c.extrinsic.translation.tolist(),
                    "trans_noise": c.trans_noise,
                    "rot_noise": c.rot_noise,
                }
                for c in self.cameras
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraRig":
        cams = tuple(
            Camera(
                c["name"],
                AbsolutePose(np.array(c["rotation"]), np.array(c["translation"])),
                float(c["trans_noise"]),
                float(c["rot_noise"]),
            )
            for c in d["cameras"]
        )
        return cls(cams, int(d.get("feature_dim", DEFAULT_FEATURE_DIM)), int(d.get("seed", 7)))


def default_rig(feature_dim: int = DEFAULT_FEATURE_DIM, seed: int = 7) -> CameraRig:
    """Six surround cameras; body frame is x forward, y left, z up."""
    layout = {
        # name: (mount yaw deg, mount position, trans noise m, rot noise rad)
        "FRONT": (0.0, (1.7, 0.0, 1.5), 0.040, 0.0040),
        "FRONT_LEFT": (55.0, (1.5, 0.5, 1.5), 0.050, 0.0050),
        "FRONT_RIGHT": (-55.0, (1.5, -0.5, 1.5), 0.050, 0.0050),
        "BACK": (180.0, (0.0, 0.0, 1.5), 0.055, 0.0055),
        "BACK_LEFT": (110.0, (1.0, 0.5, 1.5), 0.070, 0.0070),
        "BACK_RIGHT": (-110.0, (1.0, -0.5, 1.5), 0.050, 0.0050),
    }
    cams = tuple(
        Camera(name, AbsolutePose(euler_to_matrix((0.0, 0.0, np.radians(yaw))), pos), tn, rn)
        for name, (yaw, pos, tn, rn) in layout.items()
    )
    return CameraRig(cams, feature_dim, seed)


@dataclass(frozen=True)
class ConditionProfile:
    label: str
    noise_multiplier: tuple
    outlier_rate: float
    outlier_scale: float

    def __post_init__(self):
        if self.label not in ("daylight", "rain", "night"):
            raise ValueError(f"unknown condition {self.label!r}")
        object.__setattr__(self, "noise_multiplier", tuple(float(m) for m in self.noise_multiplier))
        if any(m <= 0 for m in self.noise_multiplier):
            raise ValueError("noise multipliers must be positive")
        if not 0.0 <= self.outlier_rate <= 1.0:
            raise ValueError("outlier_rate must be in [0, 1]")
        if self.outlier_scale < 1.0:
            raise ValueError("outlier_scale must be >= 1")

    def effective_variance_factor(self, n: int) -> float:
        """Expected noise variance of camera ``n`` relative to its base noise."""
        m2 = self.noise_multiplier[n] ** 2
        return m2 * (1.0 - self.outlier_rate + self.outlier_rate * self.outlier_scale**2)

    def to_dict(self) -> dict:
        return asdict(self) | {"noise_multiplier": list(self.noise_multiplier)}


def default_conditions(rig: CameraRig | None = None, outlier_scale: float = 6.0) -> dict[str, ConditionProfile]:
    names = rig.names if rig is not None else list(CAMERA_NAMES)
    n = len(names)
    night = tuple(1.5 if name in ("FRONT", "BACK") else 4.0 for name in names)
    return {
        "daylight": ConditionProfile("daylight", (1.0,) * n, 0.01, outlier_scale),
        "rain": ConditionProfile("rain", (2.0,) * n, 0.05, outlier_scale),
        "night": ConditionProfile("night", night, 0.10, outlier_scale),
    }


@dataclass(frozen=True)
class TrajectoryConfig:
    max_speed: float = MAX_SPEED
    max_accel: float = 3.0  # m/s^2
    accel_noise: float = 0.6
    max_yaw_rate: float = 0.5  # rad/s
    yaw_rate_noise: float = 0.05
    stop_probability: float = 0.004  # per step, chance to start a stationary segment
    stop_steps: tuple = (10, 40)
    initial_speed: tuple = (0.0, 12.0)


@dataclass
class FeatureSequence:
    camera: str
    features: np.ndarray  # (T, D)
    latent_truth: np.ndarray  # (T, 6) noisy poses actually encoded

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.latent_truth = np.asarray(self.latent_truth, dtype=float)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError("features must be a non-empty T x D matrix")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features must be finite")


@dataclass
class SimScenario:
    trajectory: Trajectory
    sequences: list
    condition: ConditionProfile
    seed: int
    rig: CameraRig | None = field(default=None, repr=False)

    def __post_init__(self):
        T = len(self.trajectory) - 1
        for s in self.sequences:
            if s.features.shape[0] != T:
                raise ValueError(f"camera {s.camera}: {s.features.shape[0]} steps, trajectory has {T}")

    @property
    def steps(self) -> int:
        return len(self.trajectory) - 1

    @property
    def cameras(self) -> list[str]:
        return [s.camera for s in self.sequences]

    def ground_truth_relatives(self) -> np.ndarray:
        return np.array([r.as_vector() for r in self.trajectory.relatives()])


def generate_trajectory(duration_steps: int, dt: float, seed: int, config: TrajectoryConfig | None = None) -> Trajectory:
    """Random smooth drive: bounded accelerations and yaw rates, with
    occasional stop-and-wait segments. ``duration_steps`` is the pose count."""
    if duration_steps < 2:
        raise ValueError("duration_steps must be >= 2")
    if dt <= 0:
        raise ValueError("dt must be positive")
    cfg = config or TrajectoryConfig()
    rng = np.random.default_rng(seed)

    pos = np.zeros(3)
    roll = pitch = yaw = 0.0
    speed = rng.uniform(*cfg.initial_speed)
    accel = 0.0
    yaw_rate = 0.0
    hold = 0  # remaining stationary steps
    stopping = False

    poses = [AbsolutePose(euler_to_matrix((roll, pitch, yaw)), pos.copy())]
    for _ in range(duration_steps - 1):
        if not stopping and hold == 0 and speed > 1.0 and rng.random() < cfg.stop_probability:
            stopping = True
        if stopping:
            accel = -cfg.max_accel
        elif hold > 0:
            accel = 0.0
            hold -= 1
        else:
            accel = np.clip(0.9 * accel + rng.normal(0.0, cfg.accel_noise), -cfg.max_accel, cfg.max_accel)
        speed = float(np.clip(speed + accel * dt, 0.0, cfg.max_speed))
        if stopping and speed == 0.0:
            stopping = False
            hold = int(rng.integers(cfg.stop_steps[0], cfg.stop_steps[1] + 1))

        yaw_rate = float(
            np.clip(0.95 * yaw_rate + rng.normal(0.0, cfg.yaw_rate_noise), -cfg.max_yaw_rate, cfg.max_yaw_rate)
        )
        # no turning on the spot
        new_yaw = yaw + yaw_rate * dt * min(1.0, speed / 3.0)
        new_pitch = float(np.clip(0.98 * pitch + rng.normal(0.0, 0.002), -0.1, 0.1))
        new_roll = float(np.clip(0.98 * roll + rng.normal(0.0, 0.001), -0.05, 0.05))

        mid = euler_to_matrix(((roll + new_roll) / 2, (pitch + new_pitch) / 2, (yaw + new_yaw) / 2))
        pos = pos + mid @ np.array([speed * dt, 0.0, 0.0])
        roll, pitch, yaw = new_roll, new_pitch, float(wrap_angle(new_yaw))
        poses.append(AbsolutePose(euler_to_matrix((roll, pitch, yaw)), pos.copy()))

    return Trajectory(np.arange(duration_steps) * dt, tuple(poses))


def observe(traj: Trajectory, rig: CameraRig, cond: ConditionProfile, seed: int) -> SimScenario:
    if len(traj) < 2:
        raise ValueError("trajectory needs at least 2 poses")
    if len(cond.noise_multiplier) != len(rig.cameras):
        raise ValueError("condition has one multiplier per camera")
    truth = np.array([r.as_vector() for r in traj.relatives()])
    T = truth.shape[0]
    seqs = []
    for n, (cam, (A, b)) in enumerate(zip(rig.cameras, rig.affine_maps())):
        rng = np.random.default_rng([seed, n])
        std = cam.noise_std * cond.noise_multiplier[n]
        outlier = rng.random(T) < cond.outlier_rate
        scale = np.where(outlier, cond.outlier_scale, 1.0)[:, None]
        noisy = truth + rng.standard_normal((T, 6)) * std * scale
        feats = np.tanh(noisy @ A.T + b)
        seqs.append(FeatureSequence(cam.name, feats, noisy))
    return SimScenario(traj, seqs, cond, int(seed), rig)


def simulate_scenario(
    steps: int,
    dt: float,
    rig: CameraRig,
    cond: ConditionProfile,
    seed: int,
    traj_config: TrajectoryConfig | None = None,
) -> SimScenario:
    """Trajectory of ``steps`` relative motions plus its observations."""
    traj = generate_trajectory(steps + 1, dt, seed, traj_config)
    return observe(traj, rig, cond, seed + 1_000_003)


# --- on-disk layout -------------------------------------------------------------


def _write_csv(path: Path, arr: np.ndarray, header: str | None = None) -> None:
    head = f"# {header}\n" if header else ""
    path.write_text(head + "".join(",".join(repr(float(v)) for v in row) + "\n" for row in arr))


def _read_csv(path: Path) -> np.ndarray:
    lines = path.read_text().splitlines()
    rows = [[float(v) for v in ln.split(",")] for ln in lines if ln.strip() and not ln.startswith("#")]
    return np.array(rows, dtype=float)


def save_scenario(directory, scenario: SimScenario, extra_meta: dict | None = None, header: str | None = None) -> Path:
    """Write one scenario directory; ``header`` becomes a comment line in
    every text file."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_trajectory(d / "ground_truth.txt", scenario.trajectory, header)
    for s in scenario.sequences:
        _write_csv(d / f"features_{s.camera}.csv", s.features, header)
        _write_csv(d / f"latent_{s.camera}.csv", s.latent_truth, header)
    meta = {
        "seed": scenario.seed,
        "condition": scenario.condition.to_dict(),
        "rig": scenario.rig.to_dict() if scenario.rig is not None else None,
        "cameras": scenario.cameras,
        "steps": scenario.steps,
    }
    if extra_meta:
        meta.update(extra_meta)
    (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return d


def load_scenario(directory) -> SimScenario:
    d = Path(directory)
    meta = json.loads((d / "meta.json").read_text())
    traj = read_trajectory(d / "ground_truth.txt")
    seqs = []
    for name in meta["cameras"]:
        feats = _read_csv(d / f"features_{name}.csv")
        latent_path = d / f"latent_{name}.csv"
        latent = _read_csv(latent_path) if latent_path.exists() else np.full((feats.shape[0], 6), np.nan)
        seqs.append(FeatureSequence(name, feats, latent))
    c = meta["condition"]
    cond = ConditionProfile(c["label"], tuple(c["noise_multiplier"]), c["outlier_rate"], c["outlier_scale"])
    rig = CameraRig.from_dict(meta["rig"]) if meta.get("rig") else None
    return SimScenario(traj, seqs, cond, int(meta["seed"]), rig)
