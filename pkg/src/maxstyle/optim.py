"""Adam with bias correction, shared by network and style optimization."""

from __future__ import annotations

import numpy as np

from .errors import DimensionError
from .ndtensor import Tensor

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8


class AdamState:
    """First/second moment buffers plus step counter for a fixed parameter list."""

    def __init__(self, params: list[Tensor], beta1: float = BETA1, beta2: float = BETA2, eps: float = ADAM_EPS):
        self.params = list(params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.step_count = 0


def adam_update(params: list[Tensor], grads: list[np.ndarray | None], state: AdamState, lr: float):
    """One bias-corrected Adam descent step, in place. None grads count as zero."""
    if len(params) != len(state.params) or len(grads) != len(params):
        raise DimensionError(
            f"adam_update: {len(params)} params, {len(grads)} grads, state holds {len(state.params)}"
        )
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise DimensionError(
                f"adam_update: grad shaped {g.shape} for parameter shaped {p.data.shape}"
            )
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * (g * g)
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        p.data = (p.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(np.float32)
