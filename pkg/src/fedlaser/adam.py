"""Adam with bias-corrected moment estimates."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, Tuple

import numpy as np

from fedlaser.tensor import NumericError, ShapeError


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, shape, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls(np.zeros(shape), np.zeros(shape), 0, lr, beta1, beta2, eps)


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState) -> Tuple[np.ndarray, AdamState]:
    """One Adam update. Returns the new parameter and the advanced state.

    Neither ``param`` nor the incoming state arrays are modified.
    """
    if param.shape != grad.shape or state.m.shape != param.shape:
        raise ShapeError("adam_step", param.shape, grad.shape)
    if state.t < 0:
        raise ValueError(f"adam_step: negative step counter {state.t}")
    if not np.isfinite(grad).all():
        raise NumericError("adam_step: non-finite gradient")
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * (grad * grad)
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new = param - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new, AdamState(m, v, t, state.lr, state.beta1, state.beta2, state.eps)


@dataclass
class Adam:
    """Per-parameter Adam states for a named parameter set."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    states: Dict[str, AdamState] = field(default_factory=dict)

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
        out = {}
        for name, p in params.items():
            st = self.states.get(name)
            if st is None:
                st = AdamState.fresh(p.shape, self.lr, self.beta1, self.beta2, self.eps)
            elif st.lr != self.lr:
                # a scheduled learning rate keeps the accumulated moments
                st = replace(st, lr=self.lr)
            out[name], self.states[name] = adam_step(p, grads[name], st)
        return out
