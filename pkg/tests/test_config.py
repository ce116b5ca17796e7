import json

import pytest

from diadesk.config import ExperimentConfig, config_from_dict, dump_config, load_config
from diadesk.errors import ConfigError


def test_empty_config_uses_defaults():
    cfg = config_from_dict({})
    assert cfg == ExperimentConfig()
    assert cfg.effective_train == cfg.train


def test_round_trip_through_json(tmp_path):
    raw = {
        "method": "finetune",
        "dataset": {"num_classes": 6, "seed": 2},
        "split": {"num_tasks": 3},
        "train": {"epochs": 3, "lam": 0.5},
        "ablation": {"no_pdl": True, "beta": 0.5},
        "backbone": {"checkpoint": None, "config": {"dim": 16, "heads": 2}},
    }
    (tmp_path / "c.json").write_text(json.dumps(raw))
    cfg = load_config(tmp_path / "c.json")
    assert cfg.dataset.num_classes == 6 and cfg.num_tasks == 3 and cfg.backbone.config.dim == 16
    eff = cfg.effective_train
    assert not eff.use_pdl and eff.beta == 0.5 and eff.lam == 0.5 and eff.epochs == 3
    (tmp_path / "d.json").write_text(dump_config(cfg))
    assert load_config(tmp_path / "d.json") == cfg


@pytest.mark.parametrize(
    "raw,key",
    [
        ({"bogus": 1}, "bogus"),
        ({"train": {"lr2": 0.1}}, "train.lr2"),
        ({"train": {"epochs": "ten"}}, "train.epochs"),
        ({"train": {"epochs": 2.5}}, "train.epochs"),
        ({"train": {"beta": 2.0}}, "train.beta"),
        ({"train": {"use_pdl": 1}}, "train.use_pdl"),
        ({"dataset": {"noise": None}}, "dataset.noise"),
        ({"split": {"num_tasks": 0}}, "split.num_tasks"),
        ({"split": {"num_tasks": 11}}, "split.num_tasks"),
        ({"split": {"order": 1}}, "split.order"),
        ({"ablation": {"pdl_variant": "l2"}}, "ablation.pdl_variant"),
        ({"ablation": {"lam": -1.0}}, "ablation.lam"),
        ({"backbone": {"config": {"width": 3}}}, "backbone.config.width"),
        ({"method": "replay"}, "method"),
        ({"train": []}, "train"),
    ],
)
def test_schema_errors_name_the_key(raw, key):
    with pytest.raises(ConfigError) as info:
        config_from_dict(raw)
    assert info.value.key == key
    assert key in str(info.value)


def test_invalid_json(tmp_path):
    (tmp_path / "c.json").write_text("{nope")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(tmp_path / "c.json")
