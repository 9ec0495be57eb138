"""Adam optimizer over named parameter dicts."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor


class GradientError(ValueError):
    """Non-finite or shape-mismatched gradient for a named parameter."""


@dataclass
class AdamState:
    """First/second moment accumulators keyed like the parameter dict."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    def to_arrays(self):
        out = {"step": self.step}
        for k, a in self.m.items():
            out[f"m.{k}"] = a
        for k, a in self.v.items():
            out[f"v.{k}"] = a
        return out

    @classmethod
    def from_arrays(cls, arrays):
        st = cls(step=int(arrays["step"]))
        for key, a in arrays.items():
            if key.startswith("m."):
                st.m[key[2:]] = np.asarray(a, dtype=np.float64)
            elif key.startswith("v."):
                st.v[key[2:]] = np.asarray(a, dtype=np.float64)
        return st


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update; returns a fresh parameter dict, mutates `state`.

    Deterministic given identical inputs.  Raises GradientError naming the
    offending parameter on non-finite gradients.
    """
    state.step += 1
    t = state.step
    out = {}
    for name, p in params.items():
        g = grads[name]
        g = g.data if isinstance(g, Tensor) else np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise GradientError(f"gradient shape {g.shape} != parameter shape {p.shape} for '{name}'")
        if not np.all(np.isfinite(g)):
            raise GradientError(f"non-finite gradient for parameter '{name}'")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        mhat = m / (1.0 - beta1**t)
        vhat = v / (1.0 - beta2**t)
        out[name] = Tensor(p.data - lr * mhat / (np.sqrt(vhat) + eps), requires_grad=True)
    return out
