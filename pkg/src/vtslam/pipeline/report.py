"""Run outputs on disk: CSV tables, PLY meshes, a config echo and PNG figures.

Everything except ``timings.json`` and the figures is a pure function of
(config, seed), so repeated runs give byte-identical files.
"""
from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np
import yaml

from ..evaluation.metrics import HALLUCINATED_LABEL, TOUCH_LABEL, VISION_LABEL
from ..field.model import save_params
from ..geometry.mesh import save_ply
from ..tracking.tracker import trajectory_csv
from .config import ExperimentConfig
from .runs import RunResult

LABEL_CODES = {VISION_LABEL: 0, TOUCH_LABEL: 1, HALLUCINATED_LABEL: 2}
ADDS_HEADER = ["stamp", "adds", "gt_qw", "gt_qx", "gt_qy", "gt_qz", "gt_tx", "gt_ty", "gt_tz"]
RECON_HEADER = ["tau", "fscore"]
SUMMARY_HEADER = ["seed", "mode", "mean_adds", "failed", "precision", "recall", "fscore",
                  "lost_steps", "steps"]


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.9g}"
    return str(v)


def to_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt(v) for v in r])
    return buf.getvalue()


def adds_csv(res: RunResult) -> str:
    rows = []
    for k, r in enumerate(res.trajectory):
        gt = res.gt_poses[k].as_tuple() if k < len(res.gt_poses) else (float("nan"),) * 7
        a = res.recon.adds[k] if k < len(res.recon.adds) else float("nan")
        rows.append([r.stamp, float(a), *gt])
    return to_csv(ADDS_HEADER, rows)


def recon_csv(res: RunResult) -> str:
    rec = res.recon
    return to_csv(RECON_HEADER, zip(rec.taus, rec.fscore_curve))


def summary_row(res: RunResult) -> list:
    rec = res.recon
    return [res.seed, res.mode, res.mean_adds, rec.failed, rec.precision, rec.recall, rec.fscore,
            res.lost_steps, len(res.trajectory)]


def _mesh_name(key) -> str:
    return "mesh_final.ply" if key == "final" else f"mesh_t{float(key):07.2f}.ply"


def write_run(res: RunResult, out_dir, figures: bool = True) -> Path:
    """One seed's files under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if res.trajectory:
        (out / "trajectory.csv").write_text(trajectory_csv(res.trajectory))
        (out / "adds.csv").write_text(adds_csv(res))
    if len(res.recon.taus):
        (out / "recon.csv").write_text(recon_csv(res))
    for name, (header, rows) in res.tables.items():
        (out / f"{name}.csv").write_text(to_csv(header, rows))
    if res.diagnostics:
        (out / "diagnostics.csv").write_text(res.diagnostics)
    for key, mesh in res.meshes.items():
        labels = None
        if key == "final" and res.recon.coverage is not None:
            labels = [LABEL_CODES[x] for x in res.recon.coverage]
        save_ply(mesh, out / _mesh_name(key), labels)
    if res.field is not None:
        save_params(res.field.params, out / "field.bin")
    (out / "timings.json").write_text(json.dumps(res.timings, indent=1, sort_keys=True))
    if figures:
        render_figures(res, out)
    return out


def write_report(cfg: ExperimentConfig, results: list[RunResult], out_dir) -> str:
    """Config echo, per-seed folders and the cross-seed summary; returns summary.csv text."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(cfg.dump())
    for res in results:
        write_run(res, out / f"seed_{res.seed}", cfg.report.figures)
    summary = to_csv(SUMMARY_HEADER, [summary_row(r) for r in results])
    (out / "summary.csv").write_text(summary)
    (out / "summary.yaml").write_text(yaml.safe_dump(aggregate(results), sort_keys=True))
    if cfg.report.figures and len(results) > 1:
        render_summary_figures(results, out)
    return summary


def aggregate(results: list[RunResult]) -> dict:
    """Mean and spread of the headline numbers across seeds."""
    def stats(vals):
        v = np.asarray([x for x in vals if np.isfinite(x)], dtype=float)
        if len(v) == 0:
            return {"mean": None, "std": None, "n": 0}
        return {"mean": float(v.mean()), "std": float(v.std()), "n": int(len(v))}

    out = {
        "mode": results[0].mode if results else None,
        "seeds": [r.seed for r in results],
        "mean_adds": stats([r.mean_adds for r in results]),
        "fscore": stats([r.recon.fscore for r in results]),
        "precision": stats([r.recon.precision for r in results]),
        "recall": stats([r.recon.recall for r in results]),
        "failures": int(sum(r.recon.failed for r in results)),
        "lost_steps": int(sum(r.lost_steps for r in results)),
    }
    for r in results:
        if r.recon.coverage is not None:
            labels, counts = np.unique(np.asarray(r.recon.coverage, dtype=str), return_counts=True)
            out.setdefault("coverage", {})[f"seed_{r.seed}"] = {
                str(k): float(c / counts.sum()) for k, c in zip(labels, counts)}
    return json.loads(json.dumps(out, default=float))


# -- figures --------------------------------------------------------------------

def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def render_figures(res: RunResult, out: Path) -> list[Path]:
    plt = _pyplot()
    paths = []

    def save(fig, name):
        p = out / name
        fig.tight_layout()
        fig.savefig(p, dpi=100)
        plt.close(fig)
        paths.append(p)

    a = res.recon.adds
    if len(a) and np.isfinite(a).any():
        fig, ax = plt.subplots(figsize=(6, 3))
        ax.plot([r.stamp for r in res.trajectory][:len(a)], np.asarray(a) * 1000)
        ax.set_xlabel("time [s]")
        ax.set_ylabel("ADD-S [mm]")
        ax.set_title(f"{res.mode}, seed {res.seed}")
        save(fig, "adds.png")
    if len(res.recon.taus):
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.plot(np.asarray(res.recon.taus) * 1000, res.recon.fscore_curve, marker="o")
        ax.set_xlabel("tau [mm]")
        ax.set_ylabel("F-score")
        ax.set_ylim(0, 1.02)
        save(fig, "fscore.png")
    if "final" in res.meshes:
        v = res.meshes["final"].vertices
        fig, ax = plt.subplots(figsize=(4, 4))
        if res.recon.coverage is not None:
            lab = np.asarray(res.recon.coverage, dtype=str)
            for name, color in ((VISION_LABEL, "tab:blue"), (TOUCH_LABEL, "tab:orange"),
                                (HALLUCINATED_LABEL, "tab:gray")):
                m = lab == name
                ax.scatter(v[m, 0], v[m, 1], s=1, c=color, label=name)
            ax.legend(markerscale=5, fontsize=7)
        else:
            ax.scatter(v[:, 0], v[:, 1], s=1)
        ax.set_aspect("equal")
        ax.set_title("final mesh, top view")
        save(fig, "mesh_top.png")
    if "occlusion" in res.tables:
        _, rows = res.tables["occlusion"]
        r = np.array([[x[4], x[7]] for x in rows], dtype=float)
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.scatter(r[:, 0], r[:, 1])
        ax.axhline(0, color="k", lw=0.5)
        ax.set_xlabel("occlusion score")
        ax.set_ylabel("improvement with touch [%]")
        save(fig, "occlusion.png")
    if "noise" in res.tables:
        _, rows = res.tables["noise"]
        r = np.array(rows, dtype=float)
        fig, ax = plt.subplots(figsize=(4, 3))
        for j, name in enumerate(("vision", "visuo-tactile", "tactile"), start=1):
            if np.isfinite(r[:, j]).any():
                ax.plot(r[:, 0], r[:, j] * 1000, marker="o", label=name)
        ax.set_xlabel("noise factor D")
        ax.set_ylabel("mean ADD-S [mm]")
        ax.legend(fontsize=7)
        save(fig, "noise.png")
    return paths


def render_summary_figures(results: list[RunResult], out: Path) -> list[Path]:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 3))
    drawn = False
    for res in results:
        a = np.asarray(res.recon.adds)
        if len(a) and np.isfinite(a).any():
            ax.plot([r.stamp for r in res.trajectory][:len(a)], a * 1000, label=f"seed {res.seed}")
            drawn = True
    if not drawn:
        plt.close(fig)
        return []
    ax.set_xlabel("time [s]")
    ax.set_ylabel("ADD-S [mm]")
    ax.legend(fontsize=7)
    fig.tight_layout()
    p = out / "adds_seeds.png"
    fig.savefig(p, dpi=100)
    plt.close(fig)
    return [p]
