import json

import numpy as np
import pytest

from kmae.config import RunConfig, config_hash, default_document
from kmae.dataset import (
    DatasetError,
    cohort_from_arrays,
    cohort_to_arrays,
    load_cohort,
    load_mask,
    mask_to_pgm,
    read_pgm,
    save_cohort,
    save_mask,
)
from kmae.nn import ConfigError
from kmae.phantom import make_cohort
from kmae.sampling import make_mask


def test_defaults_hash_stably(tmp_path):
    a, b = RunConfig(), RunConfig({})
    assert a.hash == b.hash == config_hash(default_document())
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"pretrain": {"epochs": 30}}))
    # an explicit default is the same run as an omitted one
    assert RunConfig.load(p).hash == a.hash
    assert RunConfig({"pretrain": {"epochs": 3}}).hash != a.hash


def test_unknown_keys_rejected(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig({"bogus": {}})
    with pytest.raises(ConfigError):
        RunConfig({"model": {"embed": 64}})
    with pytest.raises(ConfigError):
        RunConfig({"model": 3})
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        RunConfig.load(p)


def test_invalid_values_rejected():
    with pytest.raises(ConfigError):
        RunConfig({"model": {"embed_dim": 30, "heads": 4}})
    with pytest.raises(ConfigError):
        RunConfig({"data": {"mode": "other"}})
    with pytest.raises(ConfigError):
        RunConfig({"finetune": {"task": "translate"}})


def test_typed_views():
    cfg = RunConfig({"data": {"size": 64}, "phantom": {"noise_std": 0.0}, "finetune": {"epochs": 3}})
    assert cfg.phantom_base().grid_size == 64 and cfg.phantom_base().noise_std == 0.0
    spec = cfg.task_spec(task="segment", input_R=8.0)
    assert (spec.task, spec.input_R, spec.epochs) == ("segment", 8.0, 3)
    assert cfg.with_overrides("pretrain", epochs=None).hash == cfg.hash


def test_cohort_roundtrip(tmp_path):
    c = make_cohort(12, seed=3)
    p = tmp_path / "d.kmae"
    save_cohort(p, c, {"config_hash": "x"})
    raw = p.read_bytes()
    back, meta = load_cohort(p)
    assert meta["config_hash"] == "x"
    assert back.splits == c.splits
    for r, s in zip(back.records, c.records):
        assert r.params == s.params
        assert r.images.tobytes() == s.images.tobytes()
        assert r.myocardium_masks.tobytes() == s.myocardium_masks.tobytes()
        assert (r.ef_analog, r.edv_analog, r.class_label) == (s.ef_analog, s.edv_analog, s.class_label)
    save_cohort(p, back, {"config_hash": "x"})
    assert p.read_bytes() == raw


def test_regression_cohort_has_no_segmentation():
    c = make_cohort(12, regression_mode=True, seed=1)
    arrays, meta = cohort_to_arrays(c)
    assert "myocardium_masks" not in arrays
    back = cohort_from_arrays(arrays, meta)
    assert back.regression_mode and not back.has_segmentation
    arrays["images"] = arrays["images"][:5]
    with pytest.raises(DatasetError):
        cohort_from_arrays(arrays, meta)


def test_pgm_mapping(tmp_path):
    m = make_mask(32, 8, 4, seed=2)
    pgm = mask_to_pgm(m.lines)
    assert pgm.startswith(b"P5\n32 8\n255\n")
    pix = read_pgm(pgm)
    assert pix.shape == (8, 32)
    np.testing.assert_array_equal(pix == 255, m.lines)
    assert set(np.unique(pix)) <= {0, 255}
    assert (read_pgm(mask_to_pgm(make_mask(32, 8, 1).lines)) == 255).all()
    save_mask(tmp_path / "m.kmae", m)
    back = load_mask(tmp_path / "m.kmae")
    np.testing.assert_array_equal(back.lines, m.lines)
    assert (back.acceleration, back.acs_count, back.seed) == (m.acceleration, m.acs_count, m.seed)
