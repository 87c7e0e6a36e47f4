"""Command-line entry points: simulate, train, eval, plot, compare.

Every command reads one YAML config (``--config``; defaults when omitted) and
writes below its output directory. Failures print a single JSON error line to
stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import pipeline as pl
from .config import ExperimentConfig, dump_config, load_config, write_default_config
from .fusion import mixture_records
from .mdn import format_mixture_records
from .neuralcore import CheckpointError, TrainingDivergedError
from .simulator import load_scenario, save_scenario
from .trajio import TrajectoryParseError, read_trajectory, write_trajectory

METHODS = ("per-camera", "fusion", "ekf", "ivw")
EXIT_USAGE = 2
EXIT_FAILURE = 1


class CliError(Exception):
    def __init__(self, kind: str, message: str, **extra):
        super().__init__(message)
        self.kind = kind
        self.extra = extra


# --- config and layout --------------------------------------------------------------


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.out is not None:
        cfg.out = str(args.out)
    return cfg


def scenario_dir(cfg: ExperimentConfig, split: str, index: int, label: str) -> Path:
    return Path(cfg.out) / "scenarios" / split / f"{index:04d}_{label}"


def checkpoint_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg.out) / "checkpoints"


def provenance(cfg: ExperimentConfig) -> str:
    return f"config_hash={cfg.config_hash()}"


def load_split(cfg: ExperimentConfig, split: str) -> list:
    expected = getattr(cfg.data, split).labels()
    dirs = [scenario_dir(cfg, split, i, lab) for i, lab in enumerate(expected)]
    missing = [d for d in dirs if not (d / "meta.json").exists()]
    if missing:
        raise CliError("missing_prerequisite", f"{len(missing)} {split} scenarios missing; run simulate first", first=str(missing[0]))
    out = []
    for d in dirs:
        meta = json.loads((d / "meta.json").read_text())
        if meta.get("config_hash") != cfg.config_hash():
            raise CliError("stale_artifact", f"{d} was simulated with a different config", path=str(d))
        out.append(load_scenario(d))
    return out


# --- commands -----------------------------------------------------------------------


def cmd_simulate(cfg: ExperimentConfig) -> list[Path]:
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError("unwritable_output", str(exc), path=str(out)) from None
    (out / "config.yaml").write_text(f"# {provenance(cfg)}\n" + dump_config(cfg))
    written = []
    for split in pl.SPLITS:
        scenarios = pl.build_split(cfg, split)
        for i, s in enumerate(scenarios):
            d = scenario_dir(cfg, split, i, s.condition.label)
            meta = {"config_hash": cfg.config_hash(), "split": split, "index": i}
            try:
                save_scenario(d, s, meta, provenance(cfg))
            except OSError as exc:
                raise CliError("unwritable_output", str(exc), path=str(d)) from None
            written.append(d)
    return written


def cmd_train(cfg: ExperimentConfig, stage: str) -> list[Path]:
    ckpt = checkpoint_dir(cfg)
    logs = Path(cfg.out) / "logs"
    train = load_split(cfg, "train")
    val = load_split(cfg, "val")
    ckpt.mkdir(parents=True, exist_ok=True)
    logs.mkdir(parents=True, exist_ok=True)
    if stage == "mdn":
        heads, hist = pl.train_heads(cfg, train, val)
        paths = pl.save_heads(ckpt, cfg, heads)
        for name, records in hist.items():
            p = logs / f"mdn_{name}.csv"
            p.write_text(pl.format_training_log(records, provenance(cfg)))
            paths.append(p)
        return paths
    missing = pl.missing_heads(ckpt, cfg)
    if missing:
        raise CliError(
            "missing_prerequisite",
            "fusion stage needs MDN checkpoints: " + ", ".join(str(p) for p in missing),
            missing=[str(p) for p in missing],
        )
    heads = pl.load_heads(ckpt, cfg)
    net, records = pl.train_fusion_stage(cfg, heads, train, val)
    log_path = logs / "fusion.csv"
    log_path.write_text(pl.format_training_log(records, provenance(cfg)))
    return [pl.save_fusion(ckpt, cfg, net), log_path]


def cmd_eval(cfg: ExperimentConfig, methods, dump_mixtures: bool = False) -> pl.MetricsReport:
    methods = tuple(methods)
    unknown = set(methods) - set(METHODS)
    if unknown:
        raise CliError("bad_argument", f"unknown methods {sorted(unknown)}; choose from {list(METHODS)}")
    ckpt = checkpoint_dir(cfg)
    missing = pl.missing_heads(ckpt, cfg)
    if "fusion" in methods and not pl.fusion_checkpoint_path(ckpt).exists():
        missing.append(pl.fusion_checkpoint_path(ckpt))
    if missing:
        raise CliError(
            "missing_prerequisite",
            "eval needs checkpoints: " + ", ".join(str(p) for p in missing),
            missing=[str(p) for p in missing],
        )
    test = load_split(cfg, "test")
    heads = pl.load_heads(ckpt, cfg)
    net = pl.load_fusion(ckpt, cfg) if "fusion" in methods else None
    meta = {"config_hash": cfg.config_hash(), "seed": cfg.seed}
    report, info = pl.evaluate(pl.TrainedSystem(heads, net), test, methods, meta=meta)
    if "ekf_Q_diag" in info:
        report.meta["ekf_q_diag"] = " ".join(repr(q) for q in info["ekf_Q_diag"])

    out = Path(cfg.out) / "eval"
    traj_dir = out / "trajectories"
    for i, s in enumerate(test):
        d = traj_dir / f"{i:04d}_{s.condition.label}"
        d.mkdir(parents=True, exist_ok=True)
        write_trajectory(d / "ground_truth.txt", s.trajectory, provenance(cfg))
        for m, preds in info["predictions"].items():
            write_trajectory(d / f"{m}.txt", pl.predicted_trajectory(preds[i], s), provenance(cfg))
        if dump_mixtures:
            rec = mixture_records(s, heads)
            (d / "mixtures.csv").write_text(format_mixture_records(rec, s.cameras, provenance(cfg)))
    (out / "metrics.csv").write_text(report.to_csv())
    return report


def cmd_plot(trajectories, ground_truth, out) -> Path:
    """Top-down x/y overlay of trajectory files, ground truth drawn distinctly."""
    import matplotlib

    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "mcfusion"
    import matplotlib.pyplot as plt

    paths = [Path(p) for p in trajectories]
    loaded = [(p.stem, read_trajectory(p)) for p in paths]
    gt = read_trajectory(ground_truth) if ground_truth else None
    fig, ax = plt.subplots(figsize=(6, 6))
    if gt is not None:
        xy = gt.positions
        ax.plot(xy[:, 0], xy[:, 1], color="black", linestyle="--", linewidth=2.0, label="ground truth", gid="ground truth")
    for name, traj in loaded:
        xy = traj.positions
        ax.plot(xy[:, 0], xy[:, 1], linewidth=1.2, label=name, gid=name)
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_aspect("equal", adjustable="datalim")
    ax.legend(loc="best", fontsize="small")
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, format="svg", metadata={"Date": None})
    plt.close(fig)
    return out


def compare_reports(a: pl.MetricsReport, b: pl.MetricsReport) -> str:
    """Per-cell deltas (B - A) with an RMSE ordering flag."""
    if set(a.cells) != set(b.cells):
        only_a = sorted(set(a.cells) - set(b.cells))
        only_b = sorted(set(b.cells) - set(a.cells))
        raise CliError("schema_mismatch", f"cells only in A: {only_a}; only in B: {only_b}")
    lines = ["method,condition,rmse_a,rmse_b,d_rmse,d_max,d_mean,d_std,order"]
    for m in a.methods:
        for c in a.conditions:
            sa, sb = a.cells[(m, c)], b.cells[(m, c)]
            if sa is None or sb is None:
                lines.append(f"{m},{c},{'NR' if sa is None else repr(sa.rmse)},{'NR' if sb is None else repr(sb.rmse)},NR,NR,NR,NR,NR")
                continue
            d = np.subtract(sb.as_tuple(), sa.as_tuple())
            flag = "A<B" if sa.rmse < sb.rmse else ("A>B" if sa.rmse > sb.rmse else "A=B")
            lines.append(",".join([m, c, repr(sa.rmse), repr(sb.rmse), *(repr(float(v)) for v in d), flag]))
    return "\n".join(lines) + "\n"


def cmd_compare(path_a, path_b) -> str:
    reports = []
    for p in (path_a, path_b):
        try:
            reports.append(pl.MetricsReport.from_csv(Path(p).read_text()))
        except ValueError as exc:
            raise CliError("schema_mismatch", f"{p}: {exc}") from None
    return compare_reports(*reports)


# --- argument parsing ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mcfusion", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, help="YAML experiment config (defaults when omitted)")
        p.add_argument("--seed", type=int, help="override the master seed")
        p.add_argument("--out", type=Path, help="override the output directory")

    common(sub.add_parser("simulate", help="write train/val/test scenario directories"))
    p = sub.add_parser("train", help="train one stage and write its checkpoints and log")
    common(p)
    p.add_argument("--stage", choices=("mdn", "fusion"), required=True)
    p = sub.add_parser("eval", help="evaluate methods on the test split")
    common(p)
    p.add_argument("--methods", default=",".join(METHODS), help="comma-separated subset of " + ",".join(METHODS))
    p.add_argument("--mixtures", action="store_true", help="also dump per-camera mixture records")
    p = sub.add_parser("plot", help="top-down trajectory overlay as SVG")
    p.add_argument("trajectories", nargs="*", type=Path)
    p.add_argument("--ground-truth", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p = sub.add_parser("compare", help="per-cell deltas between two metrics CSVs")
    p.add_argument("report_a", type=Path)
    p.add_argument("report_b", type=Path)
    p.add_argument("--out", type=Path)
    p = sub.add_parser("default-config", help="write the default experiment config")
    p.add_argument("--out", type=Path, default=Path("default_config.yaml"))
    return parser


def run(args) -> int:
    if args.command == "default-config":
        print(write_default_config(args.out))
    elif args.command == "plot":
        if not args.trajectories and args.ground_truth is None:
            raise CliError("bad_argument", "nothing to plot")
        print(cmd_plot(args.trajectories, args.ground_truth, args.out))
    elif args.command == "compare":
        text = cmd_compare(args.report_a, args.report_b)
        if args.out:
            args.out.write_text(text)
        sys.stdout.write(text)
    else:
        cfg = resolve_config(args)
        if args.command == "simulate":
            print(f"wrote {len(cmd_simulate(cfg))} scenarios under {cfg.out}")
        elif args.command == "train":
            for p in cmd_train(cfg, args.stage):
                print(p)
        elif args.command == "eval":
            methods = [m.strip() for m in args.methods.split(",") if m.strip()]
            sys.stdout.write(cmd_eval(cfg, methods, args.mixtures).to_csv())
    return 0


def error_line(kind: str, message: str, **extra) -> str:
    return json.dumps({"error": kind, "message": message, **extra}, sort_keys=True)


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return run(args)
    except CliError as exc:
        print(error_line(exc.kind, str(exc), **exc.extra), file=sys.stderr)
    except TrajectoryParseError as exc:
        print(error_line("parse_error", exc.reason, path=str(exc.path), line=exc.line_no), file=sys.stderr)
    except CheckpointError as exc:
        print(error_line("bad_checkpoint", str(exc)), file=sys.stderr)
    except TrainingDivergedError as exc:
        print(error_line("training_diverged", str(exc)), file=sys.stderr)
    except FileNotFoundError as exc:
        print(error_line("missing_file", str(exc)), file=sys.stderr)
    except ValueError as exc:
        print(error_line("invalid_input", str(exc)), file=sys.stderr)
    return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
