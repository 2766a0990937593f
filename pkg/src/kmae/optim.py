"""Adam and the warmup + cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import DimensionError

FULL_SCALE_LR_PEAK = 1e-4


@dataclass
class ScheduleConfig:
    warmup_steps: int
    total_steps: int
    lr_peak: float = FULL_SCALE_LR_PEAK

    def __post_init__(self):
        if not 0 < self.warmup_steps < self.total_steps:
            raise ValueError(
                f"need 0 < warmup_steps < total_steps, got {self.warmup_steps}, {self.total_steps}"
            )

    @classmethod
    def from_total(cls, total_steps: int, lr_peak: float = FULL_SCALE_LR_PEAK, warmup_frac: float = 0.1):
        total_steps = max(int(total_steps), 2)
        warmup = min(max(1, int(round(warmup_frac * total_steps))), total_steps - 1)
        return cls(warmup, total_steps, lr_peak)


def lr_at_step(step: int, cfg: ScheduleConfig) -> float:
    """Linear warmup to ``lr_peak`` then cosine decay to zero; 0 past the end."""
    if step < 0:
        raise ValueError("step must be non-negative")
    if step >= cfg.total_steps:
        return 0.0
    if step <= cfg.warmup_steps:
        return cfg.lr_peak * step / cfg.warmup_steps
    progress = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    return cfg.lr_peak * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimizerState:
    step: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)
    lr_peak: float = FULL_SCALE_LR_PEAK
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params: dict, **kw):
        st = cls(**kw)
        for name, p in params.items():
            arr = p.data if hasattr(p, "data") else np.asarray(p)
            st.first_moment[name] = np.zeros_like(arr)
            st.second_moment[name] = np.zeros_like(arr)
        return st


def adam_step(params: dict, grads: dict, state: OptimizerState, lr: float,
              lr_scales: dict | None = None) -> OptimizerState:
    """One bias-corrected Adam update, in place on ``params`` (name -> Tensor).

    Parameters whose gradient is ``None`` are left untouched (their moments
    do not advance).  ``lr_scales`` optionally multiplies the rate per name.
    """
    state.step += 1
    t = state.step
    b1, b2, eps = state.beta1, state.beta2, state.epsilon
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = state.first_moment[name] = np.zeros_like(p.data)
            v = state.second_moment[name] = np.zeros_like(p.data)
        if g.shape != p.data.shape or m.shape != p.data.shape:
            raise DimensionError(f"adam shape mismatch for {name}: param {p.data.shape}, grad {g.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        rate = lr if lr_scales is None else lr * lr_scales.get(name, 1.0)
        update = rate * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data -= update.astype(p.data.dtype, copy=False)
    return state
