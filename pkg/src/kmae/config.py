"""RunConfig: one JSON document holding every knob of a run, with defaults.

Layout::

    {"data":     {subjects, size, frames, slices, mode, seed, class_balance},
     "phantom":  {intensity_blood, intensity_myo, intensity_background, noise_std, wall_area, slice_jitter},
     "mask":     {acs_count, b0_amplitude, b0_sigma},
     "model":    ModelConfig fields,
     "pretrain": TrainConfig fields,
     "finetune": TaskSpec fields,
     "outputs":  {report, loss_csv, figures}}

Sections and keys not listed are rejected.  The config hash is the sha256 of
the canonical JSON of the fully resolved document, so two files that differ
only in omitted defaults hash the same.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import asdict, fields, replace

from .model import ModelConfig
from .nn import ConfigError
from .phantom import PhantomParams
from .train import TaskSpec, TrainConfig

_PHANTOM_KEYS = ("intensity_blood", "intensity_myo", "intensity_background", "noise_std", "wall_area", "slice_jitter")


def default_document() -> dict:
    p = PhantomParams()
    return {
        "data": {"subjects": 200, "size": 32, "frames": 8, "slices": 3, "mode": "classify", "seed": 0,
                 "class_balance": 0.5},
        "phantom": {k: getattr(p, k) for k in _PHANTOM_KEYS},
        "mask": {"acs_count": None, "b0_amplitude": math.pi / 2, "b0_sigma": None},
        "model": ModelConfig().to_dict(),
        "pretrain": TrainConfig().to_dict(),
        "finetune": asdict(TaskSpec("classify")),
        "outputs": {"report": None, "loss_csv": None, "figures": True},
    }


def _merge_strict(base: dict, update: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        path = f"{where}.{key}" if where else key
        if key not in base:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config section {path!r} must be an object")
            out[key] = _merge_strict(base[key], value, path)
        else:
            out[key] = value
    return out


def canonical_json(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_hash(doc: dict) -> str:
    return hashlib.sha256(canonical_json(doc).encode("utf-8")).hexdigest()[:16]


class RunConfig:
    def __init__(self, doc: dict | None = None):
        self.doc = _merge_strict(default_document(), doc or {})
        self._check()

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls(raw)

    def with_overrides(self, section: str, **kw) -> "RunConfig":
        kw = {k: v for k, v in kw.items() if v is not None}
        return RunConfig(_merge_strict(self.doc, {section: kw}))

    @property
    def hash(self) -> str:
        return config_hash(self.doc)

    def _check(self):
        d = self.doc["data"]
        if d["mode"] not in ("classify", "regress"):
            raise ConfigError(f"data.mode must be classify or regress, got {d['mode']!r}")
        self.model_config()
        self.train_config()
        self.task_spec()
        self.phantom_base()

    def phantom_base(self) -> PhantomParams:
        d = self.doc["data"]
        return replace(PhantomParams(grid_size=d["size"], frames=d["frames"], slices=d["slices"]),
                       **self.doc["phantom"])

    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.doc["model"])

    def train_config(self) -> TrainConfig:
        known = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in self.doc["pretrain"].items() if k in known})

    def task_spec(self, **override) -> TaskSpec:
        d = dict(self.doc["finetune"])
        d.update({k: v for k, v in override.items() if v is not None})
        return TaskSpec.from_dict(d)

    def to_json(self) -> str:
        return json.dumps(self.doc, indent=2, sort_keys=True)
