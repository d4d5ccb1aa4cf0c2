"""Bias-corrected Adam over a dict of named parameters."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .errors import NumericError, ValidationError


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState,
              lr: float = 4e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              ) -> AdamState:
    """Apply one update in place (``param.data`` is replaced) and return the new
    moment state. A non-finite gradient aborts before any parameter changes."""
    for name, g in grads.items():
        if name not in params:
            raise ValidationError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValidationError(f"gradient shape {g.shape} != parameter {params[name].shape} for {name}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
    t = state.step + 1
    m_out, v_out = dict(state.m), dict(state.v)
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, g in grads.items():
        p = params[name]
        m = beta1 * state.m.get(name, np.zeros_like(p.data)) + (1 - beta1) * g
        v = beta2 * state.v.get(name, np.zeros_like(p.data)) + (1 - beta2) * (g * g)
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data = (p.data - update).astype(p.dtype, copy=False)
        m_out[name] = m.astype(p.dtype, copy=False)
        v_out[name] = v.astype(p.dtype, copy=False)
    return AdamState(t, m_out, v_out)
