"""Levenberg-Marquardt over the window poses."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from ..field.model import NeuralField
from ..geometry.se3 import se3_exp
from ..mapping.mapper import LossWeights
from .residuals import (ICP, SDF, PoseWindow, Residual, build_cloud, icp_residual,
                        reg_residual, sample_sdf_points, sdf_residual)

MAX_DAMPING = 1e6
REL_TOL = 1e-6
STEP_TOL = 1e-12


class SingularSystem(ArithmeticError):
    pass


def huber_scale(r: np.ndarray, delta: float) -> tuple[np.ndarray, np.ndarray]:
    """Row scales for IRLS and the per-row Huber cost (r^2/2 inside the band)."""
    a = np.abs(r)
    inside = a <= delta
    s = np.where(inside, 1.0, np.sqrt(delta / np.maximum(a, 1e-300)))
    rho = np.where(inside, 0.5 * r * r, delta * (a - 0.5 * delta))
    return s, rho


@dataclass
class LMResult:
    poses: list
    iterations: int
    costs: list                  # cost after each accepted step, starting with the initial cost
    converged: bool
    singular: bool = False
    residuals: list = field(default_factory=list)  # at the returned poses
    counts: dict = field(default_factory=dict)     # "sdf_vision", "icp_tactile", ... -> points

    @property
    def cost(self) -> float:
        return self.costs[-1]

    def rms(self, kind: str) -> float:
        for r in self.residuals:
            if r.kind == kind:
                return r.rms()
        return float("nan")


class Problem:
    """Residual assembly with SDF samples and clouds frozen for one solve.

    ICP correspondences are re-associated at every evaluation.
    """

    def __init__(self, window: PoseWindow, field: NeuralField | None, weights: LossWeights,
                 use_sdf: bool = True, use_icp: bool = True, use_reg: bool = True):
        self.window = window
        self.field = field
        self.w = weights
        self.use_sdf = use_sdf and field is not None and weights.w_sdf > 0
        self.use_icp = use_icp and weights.w_icp > 0 and len(window) > 1
        self.use_reg = use_reg and weights.w_reg > 0 and len(window) > 1
        # factor-count log: input points per factor and sensor kind
        self.counts = {}
        if self.use_sdf:
            kinds = {}
            self.points = sample_sdf_points(window, kinds)
            self.counts.update({f"{SDF}_{k}": v for k, v in kinds.items()})
        if self.use_icp:
            for e in window.entries:
                if e.cloud is None:
                    e.cloud = build_cloud(e, window.icp_points, window.seed, field)
                for k, v in e.cloud.counts.items():
                    key = f"{ICP}_{k}"
                    self.counts[key] = self.counts.get(key, 0) + v
            self.clouds = [e.cloud for e in window.entries]

    def residuals(self, poses) -> list[Residual]:
        out = []
        if self.use_sdf:
            out.append(sdf_residual(poses, self.points, self.field, self.w.w_sdf))
        if self.use_icp:
            out.append(icp_residual(poses, self.clouds, self.w.w_icp))
        if self.use_reg:
            out.append(reg_residual(poses, self.w.w_reg))
        return out

    def linearize(self, poses):
        """Weighted, robustified stack (r, J), the total cost and the raw residuals."""
        res = self.residuals(poses)
        rs, Js, cost = [], [], 0.0
        delta = self.window.huber_delta
        for r in res:
            if len(r) == 0:
                continue
            if delta is not None and r.kind in (SDF, ICP):
                s, rho = huber_scale(r.values, delta)
            else:
                s, rho = np.ones(len(r)), 0.5 * r.values**2
            sw = np.sqrt(r.weight) * s
            rs.append(sw * r.values)
            Js.append(sw[:, None] * r.jacobian)
            cost += r.weight * float(rho.sum())
        n = 6 * len(poses)
        if not rs:
            return np.zeros(0), np.zeros((0, n)), 0.0, res
        return np.concatenate(rs), np.concatenate(Js), cost, res


def _damped_solve(H, g, lam):
    d = np.diag(H).copy()
    top = d.max() if len(d) else 0.0
    if not np.isfinite(H).all() or top <= 0:
        raise SingularSystem("normal matrix is empty or non-finite")
    # Marquardt scaling with a relative floor keeps the step invariant to weight scale
    d = np.maximum(d, 1e-12 * top)
    while lam <= MAX_DAMPING:
        try:
            c = cho_factor(H + lam * np.diag(d))
            return -cho_solve(c, g), lam
        except LinAlgError:
            lam *= 10.0
    raise SingularSystem(f"not positive definite at damping {MAX_DAMPING:g}")


def lm_solve(window: PoseWindow, field: NeuralField | None, weights: LossWeights = LossWeights(),
             problem: Problem | None = None, **factor_flags) -> LMResult:
    """Damped Gauss-Newton on the window; writes the result back into the window.

    On a singular system the poses are left as they were and the result is
    flagged.
    """
    if not window.entries:
        raise ValueError("window is empty")
    prob = problem or Problem(window, field, weights, **factor_flags)
    poses = list(window.poses)
    r, J, cost, res = prob.linearize(poses)
    costs = [cost]
    lam = window.lm_damping_init
    it = 0
    converged = False
    singular = False
    while it < window.lm_iters and cost > 0:
        it += 1
        try:
            step, lam = _damped_solve(J.T @ J, J.T @ r, lam)
        except SingularSystem:
            singular = True
            poses = list(window.poses)
            res = prob.residuals(poses)
            break
        step *= window.lm_step
        cand = [p @ se3_exp(step[6 * i:6 * i + 6]) for i, p in enumerate(poses)]
        r2, J2, cost2, res2 = prob.linearize(cand)
        if cost2 < cost:
            rel = (cost - cost2) / cost
            poses, r, J, cost, res = cand, r2, J2, cost2, res2
            costs.append(cost)
            lam *= 0.5
            if rel < REL_TOL or np.linalg.norm(step) < STEP_TOL:
                converged = True
                break
        else:
            lam *= 10.0
            if lam > MAX_DAMPING:
                converged = True
                break
    if cost == 0:
        converged = True
    window.set_poses(poses)
    return LMResult(poses, it, costs, converged, singular, res, dict(prob.counts))
