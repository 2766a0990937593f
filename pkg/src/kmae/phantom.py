"""Synthetic beating-heart phantoms with analytic ground truth.

A subject is a short-axis ring: bright blood pool, dark myocardium, mid-gray
surroundings.  The cavity radius follows a raised-cosine contraction and the
myocardial wall keeps constant area, so ejection fraction and end-diastolic
area are closed-form functions of the generation parameters.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

NORMAL, DYSFUNCTION = 0, 1
CLASS_NAMES = ("normal", "dysfunction")
EF_THRESHOLD = 0.35
CLIP_MARGIN_PX = 2.0

NORMAL_EF = (0.45, 0.75)
DYSFUNCTION_EF = (0.10, 0.30)
REGRESSION_EF = (0.10, 0.75)
RADIUS_RANGE = (6.0, 8.5)


class PhantomError(ValueError):
    pass


class CohortError(ValueError):
    pass


@dataclass(frozen=True)
class PhantomParams:
    grid_size: int = 32
    frames: int = 8
    slices: int = 3
    center: tuple = (16.0, 16.0)
    base_cavity_radius: float = 8.0
    contraction: float = 0.3
    wall_area: float = 260.0
    intensity_blood: float = 0.9
    intensity_myo: float = 0.1
    intensity_background: float = 0.6
    noise_std: float = 0.02
    seed: int = 0
    slice_jitter: float = 0.75

    def max_outer_radius(self) -> float:
        return math.sqrt(self.base_cavity_radius**2 + self.wall_area / math.pi)

    def validate(self):
        if self.grid_size < 8 or self.frames < 1 or self.slices < 1:
            raise PhantomError(f"invalid grid {self.grid_size}, frames {self.frames}, slices {self.slices}")
        if not 0.0 <= self.contraction < 1.0:
            raise PhantomError(f"contraction must lie in [0, 1), got {self.contraction}")
        if self.base_cavity_radius <= 0 or self.wall_area <= 0:
            raise PhantomError("cavity radius and wall area must be positive")
        levels = (self.intensity_blood, self.intensity_myo, self.intensity_background)
        if len(set(levels)) != 3 or not all(0.0 <= v <= 1.0 for v in levels):
            raise PhantomError(f"intensities must be distinct values in [0, 1], got {levels}")
        if self.noise_std < 0:
            raise PhantomError("noise_std must be >= 0")
        half = self.grid_size / 2
        cx, cy = self.center
        offset = max(abs(cx - half), abs(cy - half)) + self.slice_jitter
        extent = self.max_outer_radius() + CLIP_MARGIN_PX + offset
        if extent >= half:
            raise PhantomError(
                f"ring extent {extent:.2f} px (outer radius + margin + offset) clips the {self.grid_size}px field of view"
            )
        return self


@dataclass
class PhantomRecord:
    params: PhantomParams
    images: np.ndarray  # float32 [S, T, H, W]
    myocardium_masks: np.ndarray  # uint8 [S, T, H, W]
    ef_analog: float
    edv_analog: float
    class_label: int

    @property
    def class_name(self) -> str:
        return CLASS_NAMES[self.class_label]


def cavity_radius(params: PhantomParams, t) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    c = params.contraction
    return params.base_cavity_radius * (1.0 - c * (1.0 - np.cos(2.0 * np.pi * t / params.frames)) / 2.0)


def outer_radius(params: PhantomParams, t) -> np.ndarray:
    r_in = cavity_radius(params, t)
    return np.sqrt(r_in**2 + params.wall_area / np.pi)


def phenotypes(params: PhantomParams) -> tuple[float, float]:
    """(ef_analog, edv_analog) from the analytic cavity area pi * r_in(t)^2.

    The extremes are taken over the continuous cycle, so ef = 1 - (1 - c)^2.
    """
    r = params.base_cavity_radius
    c = params.contraction
    a_max = math.pi * r * r
    a_min = math.pi * (r * (1.0 - c)) ** 2
    return (a_max - a_min) / a_max, a_max


def label_for(ef: float, threshold: float = EF_THRESHOLD) -> int:
    return DYSFUNCTION if ef < threshold else NORMAL


def contraction_for_ef(ef: float) -> float:
    return 1.0 - math.sqrt(1.0 - ef)


def _logistic(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def slice_centers(params: PhantomParams) -> np.ndarray:
    """Per-slice in-plane centers; slice 0 sits at ``center``, others jitter by <= slice_jitter."""
    rng = np.random.default_rng([params.seed, 7])
    jit = rng.uniform(-params.slice_jitter, params.slice_jitter, size=(params.slices, 2))
    jit[0] = 0.0
    return np.asarray(params.center, dtype=np.float64)[None, :] + jit


def synth_subject(params: PhantomParams, threshold: float = EF_THRESHOLD) -> PhantomRecord:
    params.validate()
    n, T, S = params.grid_size, params.frames, params.slices
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    r_in = cavity_radius(params, np.arange(T))[:, None, None]
    r_out = outer_radius(params, np.arange(T))[:, None, None]
    noise_rng = np.random.default_rng([params.seed, 11])
    images = np.empty((S, T, n, n), dtype=np.float32)
    masks = np.empty((S, T, n, n), dtype=np.uint8)
    for s, (cx, cy) in enumerate(slice_centers(params)):
        d = np.hypot(xx - cx, yy - cy)[None]
        inside = _logistic(r_in - d)
        within_outer = _logistic(r_out - d)
        ring = within_outer - inside
        img = (
            params.intensity_blood * inside
            + params.intensity_myo * ring
            + params.intensity_background * (1.0 - within_outer)
        )
        if params.noise_std > 0:
            img = img + noise_rng.normal(0.0, params.noise_std, size=img.shape)
        images[s] = img
        masks[s] = ring >= 0.5
    ef, edv = phenotypes(params)
    return PhantomRecord(params, images, masks, ef, edv, label_for(ef, threshold))


# Summing a logistic edge over the plane overshoots the hard disc area by
# 2*pi * integral(u * sigma(-u)) over u > 0, times two sides = pi^3 / 3.
SOFT_EDGE_BIAS = math.pi**3 / 3


def measure_areas(params: PhantomParams, slice_index: int = 0, method: str = "soft"):
    """Per-frame (cavity, annulus) areas in px^2 measured on the pixel grid.

    ``method="count"`` counts pixels whose soft indicator is >= 0.5; it carries
    lattice error of a few percent at small radii.  ``method="soft"`` sums the
    soft indicators and removes the constant logistic-edge bias.
    """
    n = params.grid_size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    cx, cy = slice_centers(params)[slice_index]
    d = np.hypot(xx - cx, yy - cy)[None]
    t = np.arange(params.frames)
    inside = _logistic(cavity_radius(params, t)[:, None, None] - d)
    outer = _logistic(outer_radius(params, t)[:, None, None] - d)
    ring = outer - inside
    if method == "count":
        return (inside >= 0.5).sum(axis=(1, 2)), (ring >= 0.5).sum(axis=(1, 2))
    if method == "soft":
        return inside.sum(axis=(1, 2)) - SOFT_EDGE_BIAS, ring.sum(axis=(1, 2))
    raise ValueError(f"unknown area method {method!r}")


@dataclass
class Cohort:
    records: list
    splits: dict = field(default_factory=dict)
    regression_mode: bool = False
    seed: int = 0
    # regression cohorts are written without myocardium labels
    has_segmentation: bool = True

    def __len__(self):
        return len(self.records)

    def labels(self) -> np.ndarray:
        return np.array([r.class_label for r in self.records], dtype=np.int64)

    def ef(self) -> np.ndarray:
        return np.array([r.ef_analog for r in self.records])

    def edv(self) -> np.ndarray:
        return np.array([r.edv_analog for r in self.records])


def split_sizes(n: int) -> tuple[int, int, int]:
    n_train = int(round(0.70 * n))
    n_val = int(round(0.15 * n))
    return n_train, n_val, n - n_train - n_val


def stratified_split(labels: np.ndarray, rng: np.random.Generator) -> dict:
    """70/15/15 split whose every prefix is class-proportional.

    Each class is shuffled, members get the key (rank + 0.5) / class_size, and
    the merged order by key is cut into train/val/test.
    """
    n = len(labels)
    keys = np.empty(n)
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        idx = idx[rng.permutation(len(idx))]
        keys[idx] = (np.arange(len(idx)) + 0.5) / len(idx) + 1e-9 * cls
    order = np.argsort(keys, kind="stable")
    n_train, n_val, _ = split_sizes(n)
    return {
        "train": sorted(order[:n_train].tolist()),
        "val": sorted(order[n_train : n_train + n_val].tolist()),
        "test": sorted(order[n_train + n_val :].tolist()),
    }


def make_cohort(n: int, class_balance: float = 0.5, regression_mode: bool = False, seed: int = 0,
                base: PhantomParams | None = None) -> Cohort:
    """Draw ``n`` subjects with labels from separated EF ranges (or uniform EF in regression mode)."""
    if n < 10:
        raise CohortError(f"need at least 10 subjects, got {n}")
    if not 0.0 <= class_balance <= 1.0:
        raise CohortError("class_balance must lie in [0, 1]")
    base = base or PhantomParams()
    rng = np.random.default_rng(seed)
    if regression_mode:
        efs = rng.uniform(*REGRESSION_EF, size=n)
    else:
        n_dys = int(round(class_balance * n))
        is_dys = np.zeros(n, dtype=bool)
        is_dys[rng.permutation(n)[:n_dys]] = True
        efs = np.where(
            is_dys,
            rng.uniform(*DYSFUNCTION_EF, size=n),
            rng.uniform(*NORMAL_EF, size=n),
        )
    radii = rng.uniform(*RADIUS_RANGE, size=n)
    half = base.grid_size / 2
    centers = half + rng.uniform(-0.25, 0.25, size=(n, 2))
    subject_seeds = rng.integers(0, 2**63 - 1, size=n)
    # scale geometry with the grid so the ring fits any power-of-two size
    scale = base.grid_size / 32.0
    records = []
    for i in range(n):
        p = replace(
            base,
            center=(float(centers[i, 0]), float(centers[i, 1])),
            base_cavity_radius=float(radii[i] * scale),
            wall_area=base.wall_area * scale * scale,
            contraction=contraction_for_ef(float(efs[i])),
            seed=int(subject_seeds[i]),
        )
        records.append(synth_subject(p))
    labels = np.array([r.class_label for r in records])
    if regression_mode:
        perm = rng.permutation(n)
        n_train, n_val, _ = split_sizes(n)
        splits = {
            "train": sorted(perm[:n_train].tolist()),
            "val": sorted(perm[n_train : n_train + n_val].tolist()),
            "test": sorted(perm[n_train + n_val :].tolist()),
        }
    else:
        splits = stratified_split(labels, rng)
        for name, idx in splits.items():
            present = set(labels[idx].tolist())
            if len(np.unique(labels)) > 1 and len(present) < len(np.unique(labels)):
                raise CohortError(f"{n} subjects too few for a stratified split: {name} misses a class")
    return Cohort(records, splits, regression_mode, seed, has_segmentation=not regression_mode)


def params_to_dict(p: PhantomParams) -> dict:
    d = asdict(p)
    d["center"] = list(p.center)
    return d


def params_from_dict(d: dict) -> PhantomParams:
    d = dict(d)
    d["center"] = tuple(d["center"])
    return PhantomParams(**d)
