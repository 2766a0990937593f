"""Variable-density, temporally interleaved Cartesian line masks.

This approximates VISTA-style dynamic sampling: each frame takes the central
ACS band plus lines drawn from a Gaussian density over phase-encode index.
Lines already used in earlier frames are down-weighted until every line has
been visited once, which spreads coverage across time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .kspace import ComplexSeries

REUSE_PENALTY = 0.25


class MaskConfigError(ValueError):
    pass


@dataclass
class SamplingMask:
    lines: np.ndarray  # bool [T, H]
    acceleration: float
    acs_count: int
    seed: int

    @property
    def shape(self):
        return self.lines.shape

    @property
    def budget(self) -> int:
        return line_budget(self.lines.shape[1], self.acceleration)


def line_budget(H: int, R: float) -> int:
    return int(math.ceil(H / R - 1e-12))


def default_acs(H: int, R: float) -> int:
    """H/8 central lines, reduced to an even count at most half the per-frame budget."""
    acs = max(2, (H // 8) // 2 * 2)
    budget = line_budget(H, R)
    if R > 1 and acs > budget // 2:
        acs = max(2, (budget // 2) // 2 * 2)
    return min(acs, budget)


def acs_band(H: int, acs_count: int) -> np.ndarray:
    kc = H // 2
    return np.arange(kc - acs_count // 2, kc - acs_count // 2 + acs_count)


def make_mask(H: int, T: int, R: float, acs_count: int | None = None, seed: int = 0) -> SamplingMask:
    if R < 1:
        raise MaskConfigError(f"acceleration must be >= 1, got {R}")
    if acs_count is None:
        acs_count = default_acs(H, R)
    budget = line_budget(H, R)
    if acs_count > budget:
        raise MaskConfigError(f"acs_count {acs_count} exceeds per-frame budget {budget}")
    if acs_count < 0 or acs_count % 2:
        raise MaskConfigError(f"acs_count must be a non-negative even integer, got {acs_count}")
    rng = np.random.default_rng(seed)
    kc = H // 2
    k = np.arange(H)
    density = np.exp(-((k - kc) ** 2) / (2.0 * (H / 4) ** 2))
    acs = acs_band(H, acs_count)
    density[acs] = 0.0
    candidates = H - acs_count
    n_draw = budget - acs_count
    lines = np.zeros((T, H), dtype=bool)
    used = np.zeros(H, dtype=bool)
    used[acs] = True
    for t in range(T):
        lines[t, acs] = True
        if n_draw > 0:
            w = density * np.where(used, REUSE_PENALTY, 1.0)
            p = w / w.sum()
            if n_draw >= candidates:
                picks = np.flatnonzero(density > 0)
            else:
                picks = rng.choice(H, size=n_draw, replace=False, p=p)
            lines[t, picks] = True
            used[picks] = True
        if used.all():
            used[:] = False
            used[acs] = True
    return SamplingMask(lines, float(R), int(acs_count), int(seed))


def apply_mask(k: ComplexSeries, m: SamplingMask) -> ComplexSeries:
    if k.domain != "kspace":
        raise ValueError("apply_mask expects k-space")
    if m.lines.shape != k.data.shape[:2]:
        raise ValueError(f"mask {m.lines.shape} does not match k-space {k.data.shape}")
    out = np.where(m.lines[..., None], k.data, 0).astype(k.data.dtype)
    return ComplexSeries("kspace", out, k.frame_rate, mask=m)


@dataclass
class MaskStats:
    achieved_R: float
    center_coverage: float
    union_coverage: float
    per_line_frequency: np.ndarray


def mask_stats(m: SamplingMask) -> MaskStats:
    T, H = m.lines.shape
    acs = acs_band(H, m.acs_count)
    center = float(np.mean(m.lines[:, acs].all(axis=1))) if len(acs) else 1.0
    return MaskStats(
        achieved_R=H / line_budget(H, m.acceleration),
        center_coverage=center,
        union_coverage=float(m.lines.any(axis=0).mean()),
        per_line_frequency=m.lines.mean(axis=0),
    )


def binned_frequency(freq: np.ndarray, bin_width: float | None = None) -> np.ndarray:
    """Mean sampling frequency in bins of distance |k - k_c|."""
    H = len(freq)
    if bin_width is None:
        bin_width = H / 8
    dist = np.abs(np.arange(H) - H // 2)
    bins = (dist // bin_width).astype(int)
    return np.array([freq[bins == b].mean() for b in range(bins.max() + 1)])
