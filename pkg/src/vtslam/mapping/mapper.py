"""Truncated-SDF shape loss and the online shape optimizer."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from ..field.model import NeuralField
from ..field.optim import AdamState, adam_step
from .keyframes import KeyframeBank, select_replay
from .sampling import RaySampleBatch, SamplingConfig, sample_rays

DIAG_HEADER = ["iteration", "L_f", "L_tr", "total", "keyframes", "rays", "samples"]


@dataclass(frozen=True)
class LossWeights:
    w_tr: float = 10.0
    w_sdf: float = 0.01
    w_reg: float = 0.01
    w_icp: float = 1.0

    def __post_init__(self):
        if min(self.w_tr, self.w_sdf, self.w_reg, self.w_icp) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class ShapeLoss:
    total: float
    l_f: float
    l_tr: float
    grad: np.ndarray | None
    per_ray: np.ndarray  # loss contribution of each ray (before the 1/|u| average)


def _per_ray_mean(ray, vals, sel, n_rays):
    cnt = np.bincount(ray[sel], minlength=n_rays)
    s = np.bincount(ray[sel], weights=vals[sel], minlength=n_rays)
    return np.divide(s, cnt, out=np.zeros(n_rays), where=cnt > 0), cnt


def shape_loss(field: NeuralField, batch: RaySampleBatch, w_tr: float = 10.0,
               with_grad: bool = True) -> ShapeLoss:
    """L_f + w_tr * L_tr over the batch, and its parameter gradient.

    Each term averages per ray first (over that ray's samples in the set), then
    over all rays of the batch. L1 subgradients are 0 at 0.
    """
    n_rays = batch.n_rays
    if n_rays == 0 or len(batch) == 0:
        raise ValueError("empty sample batch")
    d_tr = batch.truncation
    target = np.where(batch.free, d_tr, batch.dhat)
    out = {}

    def upstream(vals):
        res = vals - target
        a = np.abs(res)
        f_ray, f_cnt = _per_ray_mean(batch.ray, a, batch.free, n_rays)
        t_ray, t_cnt = _per_ray_mean(batch.ray, a, ~batch.free, n_rays)
        out["f"], out["t"] = f_ray, t_ray
        cnt = np.where(batch.free, f_cnt[batch.ray], t_cnt[batch.ray])
        w = np.where(batch.free, 1.0, w_tr)
        return w * np.sign(res) / (n_rays * np.maximum(cnt, 1))

    if with_grad:
        _, _, grad = field.value_and_param_grad(batch.pts_obj, upstream)
    else:
        vals, _ = field.eval_object(batch.pts_obj)
        upstream(vals)
        grad = None
    l_f = float(out["f"].sum() / n_rays)
    l_tr = float(out["t"].sum() / n_rays)
    return ShapeLoss(l_f + w_tr * l_tr, l_f, l_tr, grad, out["f"] + w_tr * out["t"])


@dataclass
class MapperConfig:
    init_iterations: int = 500
    lr: float = 2e-4
    weight_decay: float = 1e-6
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    w_tr: float = 10.0
    seed: int = 0


class ShapeMapper:
    """Owns the field, its optimizer state and the keyframe bank."""

    def __init__(self, field: NeuralField, bank: KeyframeBank | None = None,
                 cfg: MapperConfig | None = None):
        self.field = field
        self.bank = bank if bank is not None else KeyframeBank()
        self.cfg = cfg or MapperConfig()
        self.adam = AdamState.for_params(field.params, lr=self.cfg.lr,
                                         weight_decay=self.cfg.weight_decay)
        self.iteration = 0
        self.initialized = False
        self.diagnostics: list[list] = []

    def _one(self) -> dict:
        rng = np.random.default_rng([self.cfg.seed, self.iteration])
        replay = select_replay(self.bank, rng)
        batch = sample_rays(replay, self.field.cfg, rng, self.bank.replay_batch_per_sensor,
                            self.cfg.sampling)
        loss = shape_loss(self.field, batch, self.cfg.w_tr)
        adam_step(self.field.params, self.adam, loss.grad)
        # refresh replay weights from this iteration's per-ray losses
        for ki, kf in enumerate(replay):
            sel = batch.ray_keyframe == ki
            if sel.any():
                kf.update_loss(loss.per_ray[sel].mean())
        row = [self.iteration, loss.l_f, loss.l_tr, loss.total, len(self.bank), batch.n_rays,
               len(batch)]
        self.diagnostics.append(row)
        self.iteration += 1
        return dict(zip(DIAG_HEADER, row))

    def shape_iteration(self) -> dict:
        """One replay/sample/loss/Adam step; the first call also runs the K_0 warm-up."""
        if not self.bank.keyframes:
            raise ValueError("keyframe bank is empty")
        if not self.initialized:
            self.initialized = True
            for _ in range(self.cfg.init_iterations):
                self._one()
        return self._one()

    def diagnostics_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(DIAG_HEADER)
        for r in self.diagnostics:
            w.writerow([r[0], f"{r[1]:.9g}", f"{r[2]:.9g}", f"{r[3]:.9g}", *r[4:]])
        return buf.getvalue()


def shape_iteration(mapper: ShapeMapper) -> dict:
    return mapper.shape_iteration()
