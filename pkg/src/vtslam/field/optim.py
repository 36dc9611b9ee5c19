"""Adam with decoupled weight decay over the flat field parameter vector."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .model import FieldParams


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class AdamState:
    lr: float = 2e-4
    weight_decay: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray | None = field(default=None, repr=False)
    v: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def for_params(cls, params: FieldParams, **kw) -> "AdamState":
        st = cls(**kw)
        st.m = np.zeros_like(params.theta)
        st.v = np.zeros_like(params.theta)
        return st


def adam_step(params: FieldParams, state: AdamState, grads: np.ndarray) -> None:
    """In-place Adam update of ``params`` and ``state``.

    Raises NonFiniteGradient before touching anything if ``grads`` has a NaN/inf.
    """
    if grads.shape != params.theta.shape:
        raise ValueError("gradient shape does not match parameters")
    if not np.isfinite(grads).all():
        raise NonFiniteGradient("gradient contains non-finite entries")
    if state.m is None:
        state.m = np.zeros_like(params.theta)
        state.v = np.zeros_like(params.theta)
    state.step += 1
    kernels.adam_update(params.theta, grads, state.m, state.v, state.lr, state.beta1, state.beta2,
                        state.eps, state.weight_decay, state.step)
