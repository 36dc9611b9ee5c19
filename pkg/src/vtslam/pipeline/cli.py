"""Command line entry point: ``vtslam <verb> [options]``.

Options of the form ``--set a.b.c=value`` address ExperimentConfig paths; the
value is parsed as YAML. When ``--config`` is also given, the file wins over
the flags.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from ..evaluation.extract import EmptySurface, extract_mesh
from ..evaluation.metrics import MetricsConfig, drift_report, precision_recall
from ..field.model import NeuralField, load_params
from ..geometry.mesh import load_mesh, save_ply
from ..geometry.se3 import Pose
from ..sensors.sequence import PlaybackError, load_sequence, record_sequence
from .config import ConfigError, config_from_dict, set_path
from .report import to_csv, write_report
from .runs import RUNNERS, simulate

log = logging.getLogger("vtslam")

VERB_MODES = {"slam": "slam", "track": "track-known", "fit": "fit-static"}


def _merge(base: dict, top: dict) -> dict:
    out = dict(base)
    for k, v in top.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def build_config(args, mode: str | None = None):
    data = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        set_path(data, key, yaml.safe_load(value))
    if args.seeds is not None:
        data["seeds"] = args.seeds
    if args.duration is not None:
        data["duration"] = args.duration
    if args.no_figures:
        set_path(data, "report.figures", False)
    if mode is not None:
        data["mode"] = mode
    if args.config:
        try:
            file_data = yaml.safe_load(Path(args.config).read_text()) or {}
        except (OSError, yaml.YAMLError) as e:
            raise ConfigError(f"{args.config}: {e}") from e
        if not isinstance(file_data, dict):
            raise ConfigError(f"{args.config}: expected a mapping at the top level")
        data = _merge(data, file_data)
    return config_from_dict(data)


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="YAML experiment config (overrides the flags)")
    p.add_argument("--set", action="append", metavar="PATH=VALUE",
                   help="override one config entry, e.g. trajectory.angular_speed_deg=90")
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--duration", type=float)
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--out", default="out", help="output directory")


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vtslam", description="Visuo-tactile neural SDF SLAM.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="verb", required=True)
    p = sub.add_parser("simulate", help="render and record sequences, one per seed")
    _common(p)
    for verb, help_ in (("slam", "online SLAM with an unknown shape"),
                        ("track", "tracking against the known, baked shape"),
                        ("fit", "multi-view fit of a static object")):
        p = sub.add_parser(verb, help=help_)
        _common(p)
        if verb != "fit":
            p.add_argument("--sequence", help="play back a recorded sequence instead of simulating")
    p = sub.add_parser("ablate", help="occlusion or noise ablation")
    p.add_argument("which", choices=["occlusion", "noise"])
    _common(p)
    p = sub.add_parser("eval", help="score a trajectory and/or mesh against a recorded sequence")
    p.add_argument("--sequence", required=True)
    p.add_argument("--trajectory", help="trajectory.csv from a run")
    p.add_argument("--mesh", help="reconstructed mesh (PLY or OBJ)")
    p.add_argument("--tau", type=float, default=MetricsConfig.tau)
    p = sub.add_parser("mesh", help="extract a mesh from saved field parameters")
    p.add_argument("field", help="field.bin from a run")
    p.add_argument("--resolution", type=int, default=200)
    p.add_argument("--out", default="mesh.ply")
    return ap


def _read_trajectory(path) -> tuple[np.ndarray, list[Pose]]:
    rows = np.atleast_2d(np.loadtxt(path, delimiter=",", skiprows=1))
    return rows[:, 0], [Pose.from_tuple(r[1:8]) for r in rows]


def cmd_simulate(args) -> int:
    cfg = build_config(args)
    rows = []
    for seed in cfg.seeds:
        seq = simulate(cfg, seed)
        seq.meta = {"seed": seed}
        path = record_sequence(seq, Path(args.out) / f"seq_seed{seed}")
        rows.append([seed, str(path), len(seq), sum(len(s.frames) for s in seq.steps)])
    (Path(args.out) / "config.yaml").write_text(cfg.dump())
    sys.stdout.write(to_csv(["seed", "path", "steps", "frames"], rows))
    return 0


def cmd_run(args, mode: str) -> int:
    cfg = build_config(args, mode)
    seq = None
    if getattr(args, "sequence", None):
        if len(cfg.seeds) != 1:
            raise ConfigError("playback runs take exactly one seed")
        seq = load_sequence(args.sequence)
    results = []
    for seed in cfg.seeds:
        log.info("%s seed %d", mode, seed)
        runner = RUNNERS[mode]
        results.append(runner(cfg, seed, seq) if seq is not None else runner(cfg, seed))
    sys.stdout.write(write_report(cfg, results, args.out))
    return 0


def cmd_eval(args) -> int:
    seq = load_sequence(args.sequence)
    if seq.shape is None:
        raise ConfigError(f"{args.sequence}: the manifest carries no object shape")
    gt_mesh = seq.shape.to_mesh()
    mc = MetricsConfig(tau=args.tau)
    header, row = [], []
    if args.trajectory:
        stamps, poses = _read_trajectory(args.trajectory)
        d = drift_report(stamps, poses, seq.stamps, seq.gt_poses(), gt_mesh, mc)
        header += ["mean_adds", "failed"]
        row += [d.mean, d.failed]
    if args.mesh:
        p, r = precision_recall(gt_mesh, load_mesh(args.mesh), [mc.tau], mc.samples, mc.seed)
        f = 2 * p[0] * r[0] / (p[0] + r[0]) if p[0] + r[0] > 0 else 0.0
        header += ["precision", "recall", "fscore"]
        row += [float(p[0]), float(r[0]), float(f)]
    if not header:
        raise ConfigError("eval needs --trajectory and/or --mesh")
    sys.stdout.write(to_csv(header, [row]))
    return 0


def cmd_mesh(args) -> int:
    params = load_params(args.field)
    try:
        mesh = extract_mesh(NeuralField(params.cfg, params), args.resolution)
    except EmptySurface as e:
        log.error("%s", e)
        return 0
    save_ply(mesh, args.out)
    sys.stdout.write(to_csv(["path", "vertices", "faces"], [[args.out, len(mesh.vertices),
                                                             len(mesh.faces)]]))
    return 0


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.verb == "simulate":
            return cmd_simulate(args)
        if args.verb in VERB_MODES:
            return cmd_run(args, VERB_MODES[args.verb])
        if args.verb == "ablate":
            return cmd_run(args, f"ablate-{args.which}")
        if args.verb == "eval":
            return cmd_eval(args)
        return cmd_mesh(args)
    except (ConfigError, PlaybackError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
