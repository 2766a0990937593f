"""Cohort and mask artifacts on disk, plus the PGM mask picture."""

from __future__ import annotations

import numpy as np

from . import container
from .phantom import Cohort, PhantomRecord, params_from_dict, params_to_dict
from .sampling import SamplingMask


class DatasetError(ValueError):
    pass


def cohort_to_arrays(cohort: Cohort) -> tuple[dict, dict]:
    arrays = {
        "images": np.stack([r.images for r in cohort.records]).astype(np.float32),
        "labels": cohort.labels().astype(np.uint8),
        "ef": cohort.ef().astype(np.float64),
        "edv": cohort.edv().astype(np.float64),
    }
    if cohort.has_segmentation:
        arrays["myocardium_masks"] = np.stack([r.myocardium_masks for r in cohort.records]).astype(np.uint8)
    meta = {
        "kind": "dataset",
        "n_subjects": len(cohort),
        "mode": "regress" if cohort.regression_mode else "classify",
        "seed": cohort.seed,
        "splits": {k: [int(i) for i in v] for k, v in cohort.splits.items()},
        "subjects": [params_to_dict(r.params) for r in cohort.records],
    }
    return arrays, meta


def cohort_from_arrays(arrays: dict, meta: dict) -> Cohort:
    if meta.get("kind") != "dataset":
        raise DatasetError("container is not a dataset")
    images = arrays["images"]
    n = images.shape[0]
    if n != meta.get("n_subjects") or len(meta.get("subjects", [])) != n:
        raise DatasetError(f"dataset manifest lists {meta.get('n_subjects')} subjects but holds {n}")
    seg = arrays.get("myocardium_masks")
    records = []
    for i in range(n):
        records.append(PhantomRecord(
            params=params_from_dict(meta["subjects"][i]),
            images=images[i],
            myocardium_masks=None if seg is None else seg[i],
            ef_analog=float(arrays["ef"][i]),
            edv_analog=float(arrays["edv"][i]),
            class_label=int(arrays["labels"][i]),
        ))
    splits = {k: list(v) for k, v in meta["splits"].items()}
    for k in ("train", "val", "test"):
        if k not in splits:
            raise DatasetError(f"dataset lacks the {k!r} split")
    return Cohort(records, splits, meta["mode"] == "regress", meta.get("seed", 0), has_segmentation=seg is not None)


def save_cohort(path, cohort: Cohort, extra_meta: dict | None = None):
    arrays, meta = cohort_to_arrays(cohort)
    meta.update(extra_meta or {})
    container.write(path, arrays, meta)


def load_cohort(path) -> tuple[Cohort, dict]:
    arrays, meta = container.read(path)
    return cohort_from_arrays(arrays, meta), meta


def save_mask(path, m: SamplingMask, extra_meta: dict | None = None):
    meta = {"kind": "mask", "acceleration": float(m.acceleration), "acs_count": int(m.acs_count), "seed": int(m.seed)}
    meta.update(extra_meta or {})
    container.write(path, {"lines": m.lines.astype(np.uint8)}, meta)


def load_mask(path) -> SamplingMask:
    arrays, meta = container.read(path)
    if meta.get("kind") != "mask":
        raise DatasetError(f"{path} is not a mask container")
    return SamplingMask(arrays["lines"].astype(bool), meta["acceleration"], meta["acs_count"], meta["seed"])


# PGM mapping: row t, column h; 255 where line h is sampled in frame t, else 0.
def mask_to_pgm(lines: np.ndarray) -> bytes:
    lines = np.asarray(lines, dtype=bool)
    rows, cols = lines.shape
    return f"P5\n{cols} {rows}\n255\n".encode("ascii") + np.where(lines, 255, 0).astype(np.uint8).tobytes()


def read_pgm(buf: bytes) -> np.ndarray:
    parts = buf.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P5":
        raise DatasetError("not a binary P5 graymap")
    cols, rows, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise DatasetError(f"unsupported maxval {maxval}")
    data = parts[4]
    if len(data) != rows * cols:
        raise DatasetError(f"graymap payload has {len(data)} bytes, expected {rows * cols}")
    return np.frombuffer(data, dtype=np.uint8).reshape(rows, cols).copy()
