import json

import pytest

from vod.config import RunConfig, apply_overrides, read_lock, resolve_config, write_lock
from vod.errors import ConfigTypeError, ConflictingFlags, UnknownKey


def test_defaults():
    cfg = resolve_config()
    assert cfg.sampling.c_sl == 17 and cfg.sampling.c_step == 4 and cfg.sampling.c_in == 1
    assert cfg.train.base_lr == 1e-2 and cfg.train.epochs == 50 and cfg.train.lr_step == 10
    assert cfg.mode == "cfd" and cfg.sampling.out_size == 224


def test_precedence(tmp_path):
    f = tmp_path / "c.json"
    f.write_text(json.dumps({"seed": 3, "train": {"epochs": 7, "batch_size": 8}}))
    cfg = resolve_config({"train.epochs": 2, "train.batch_size": None}, f)
    assert cfg.train.epochs == 2 and cfg.train.batch_size == 8
    assert cfg.seed == 3 and cfg.train.seed == 3 and cfg.eval.seed == 3
    assert resolve_config({"seed": 1, "train.seed": 9}).train.seed == 9


def test_lock_roundtrip(tmp_path):
    cfg = resolve_config({"mode": "ssff", "sampling.c_sl": 9, "robust.kinds": ["gaussian_blur"]})
    write_lock(cfg, tmp_path)
    assert read_lock(tmp_path) == cfg
    assert "paths" not in cfg.experiment()


def test_errors(tmp_path):
    with pytest.raises(UnknownKey):
        resolve_config({"train.nope": 1})
    with pytest.raises(UnknownKey):
        resolve_config({"bogus": 1})
    with pytest.raises(ConfigTypeError):
        resolve_config({"train.epochs": "five"})
    with pytest.raises(ConfigTypeError):
        resolve_config({"train.epochs": True})
    with pytest.raises(ConflictingFlags):
        resolve_config(config_file=tmp_path / "a.json", lock={})
    f = tmp_path / "bad.json"
    f.write_text(json.dumps({"sampling": {"margin": "wide"}}))
    with pytest.raises(ConfigTypeError):
        resolve_config(config_file=f)


def test_overrides():
    cfg = apply_overrides(RunConfig(), {"c_sl": 9, "mode": "raw"})
    assert cfg.sampling.c_sl == 9 and cfg.mode == "raw"
