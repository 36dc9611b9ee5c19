"""Fit field parameters to a known shape (the known-shape tracking prior)."""
from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..geometry.shapes import GroundTruthShape
from .model import FieldConfig, FieldParams, NeuralField, init_params, load_params, save_params
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)


class FitDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class BakeConfig:
    n_train: int = 200_000
    n_holdout: int = 10_000
    near_fraction: float = 0.5
    near_sigma: float = 0.005
    batch_size: int = 4096
    lr: float = 2e-4
    target_mae: float = 5e-4
    max_steps: int = 20_000
    check_every: int = 250
    seed: int = 0


def _sample_points(cfg: FieldConfig, shape: GroundTruthShape, n: int, bake: BakeConfig, rng):
    n_near = int(round(n * bake.near_fraction))
    mesh = shape.to_mesh()
    near = mesh.sample(n_near, seed=int(rng.integers(2**31))) + rng.normal(
        scale=bake.near_sigma, size=(n_near, 3))
    half = cfg.bound_side / 2
    uni = rng.uniform(-half, half, size=(n - n_near, 3))
    pts = np.concatenate([near, uni]) + np.asarray(cfg.bound_center)
    lo = np.asarray(cfg.bound_center) - half
    pts = np.clip(pts, lo, lo + cfg.bound_side)
    return pts, shape.sdf(pts)


def bake_field_from_shape(cfg: FieldConfig, shape: GroundTruthShape,
                          bake: BakeConfig = BakeConfig()) -> tuple[FieldParams, dict]:
    """Regress the field onto the shape's exact SDF with an L1 loss.

    Stops once the held-out mean absolute error drops below ``bake.target_mae``
    or after ``bake.max_steps``. Returns the parameters and a small report.
    """
    rng = np.random.default_rng(bake.seed)
    train_x, train_y = _sample_points(cfg, shape, bake.n_train, bake, rng)
    hold_x, hold_y = _sample_points(cfg, shape, bake.n_holdout, bake, rng)
    params = init_params(cfg, seed=bake.seed)
    field = NeuralField(cfg, params)
    state = AdamState.for_params(params, lr=bake.lr)
    mae = np.inf
    step = 0
    for step in range(1, bake.max_steps + 1):
        sel = rng.integers(0, len(train_x), size=bake.batch_size)
        y = train_y[sel]
        vals, _, grad = field.value_and_param_grad(train_x[sel],
                                                   lambda v: np.sign(v - y) / len(y))
        loss = np.abs(vals - y).mean()
        if not np.isfinite(loss):
            raise FitDiverged(f"non-finite loss at step {step}")
        adam_step(params, state, grad)
        if step % bake.check_every == 0 or step == bake.max_steps:
            mae = float(np.abs(field.eval_object(hold_x)[0] - hold_y).mean())
            log.debug("bake step %d train %.6f holdout %.6f", step, loss, mae)
            if mae < bake.target_mae:
                break
    return params, {"steps": step, "holdout_mae": mae}


def cache_dir() -> Path:
    return Path(os.environ.get("VTSLAM_CACHE", Path.home() / ".cache" / "vtslam"))


def cached_bake(cfg: FieldConfig, shape: GroundTruthShape, bake: BakeConfig = BakeConfig()):
    """bake_field_from_shape memoized on disk by (field config, shape, bake config)."""
    key = json.dumps({"field": cfg.to_dict(), "shape": shape.to_dict(), "bake": bake.__dict__},
                     sort_keys=True)
    digest = hashlib.sha1(key.encode()).hexdigest()[:16]
    path = cache_dir() / f"baked-{digest}.vtsf"
    if path.exists():
        return load_params(path)
    params, report = bake_field_from_shape(cfg, shape, bake)
    log.info("baked %s field: %s", shape.kind, report)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    save_params(params, tmp)
    tmp.replace(path)
    # reload so cached and fresh calls hand out identical (float32-rounded) parameters
    return load_params(path)
