import json
from pathlib import Path

import pytest

from scorefuse.config import (
    RunConfig, config_hash, config_to_dict, get_data_dir, load_run_config, run_config_from_dict, save_run_config,
)
from scorefuse.errors import ConfigError


def test_defaults_are_valid():
    cfg = load_run_config()
    assert cfg.seed == 0
    assert cfg.fusion.num_experts == 2
    assert cfg.fusion.margin == 3.0
    assert cfg.quality.delta == 3.0
    assert [m.modality_id for m in cfg.synth.modalities] == ["face", "body"]


def test_nested_sections_and_unknown_keys(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({
        "fusion": {"num_experts": 3, "hidden": [8], "not_a_field": 1},
        "evaluation": {"far_targets": [0.05]},
        "synth": {"test_subjects": 7, "modalities": [{"modality_id": "gait", "metric_kind": "euclidean"},
                                                      {"modality_id": "face"}]},
        "comment": "ignored",
    }))
    cfg = load_run_config(path)
    assert cfg.fusion.num_experts == 3
    assert cfg.fusion.hidden == (8,)
    assert cfg.evaluation.far_targets == (0.05,)
    assert cfg.synth.test_subjects == 7
    assert cfg.synth.modalities[0].metric_kind.value == "euclidean"


def test_seed_reaches_every_stage(tmp_path):
    cfg = run_config_from_dict({"seed": 9})
    assert cfg.synth.seed == cfg.quality.seed == cfg.fusion.seed == cfg.weighted_sum.seed == cfg.open_set.seed == 9
    assert load_run_config(None, seed=4).fusion.seed == 4


@pytest.mark.parametrize("data", [
    {"seed": -1},
    {"fusion": {"loss": "hinge"}},
    {"fusion": {"gating": "random"}},
    {"fusion": {"num_experts": 0}},
    {"quality": {"delta": 1.0}},
    {"evaluation": {"far_targets": [1.5]}},
    {"modalities": ["face"]},
    {"synth": {"frames_per_query": 0}},
    {"fusion": {"bogus": 1, "epochs": 0}},
    {"open_set": {"fraction": 0.0}},
    {"fusion": "not an object"},
    {"synth": {"modalities": [{"feature_dim": 4}]}},
    {"synth": {"modalities": "face"}},
])
def test_invalid_values_raise_config_error(data):
    with pytest.raises(ConfigError):
        run_config_from_dict(data)


def test_unreadable_config(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    with pytest.raises(ConfigError):
        load_run_config(path)


def test_hash_ignores_output_dir_only():
    a = RunConfig(output_dir="/tmp/a")
    b = RunConfig(output_dir="/tmp/b")
    assert config_hash(a) == config_hash(b)
    assert len(config_hash(a)) == 16
    assert config_hash(a) != config_hash(a.with_seed(1))


def test_saved_config_reloads_to_same_hash(tmp_path):
    cfg = run_config_from_dict({"seed": 3, "fusion": {"epochs": 5}})
    save_run_config(cfg, tmp_path / "config.json")
    again = load_run_config(tmp_path / "config.json")
    assert config_hash(again) == config_hash(cfg)
    assert config_to_dict(again) == config_to_dict(cfg)


def test_default_paths(monkeypatch, tmp_path):
    monkeypatch.setenv("XDG_DATA_HOME", str(tmp_path))
    cfg = RunConfig()
    assert get_data_dir() == tmp_path / "scorefuse"
    assert cfg.out_path == tmp_path / "scorefuse" / "runs" / config_hash(cfg)
    assert cfg.data_path == cfg.out_path / "data"
    assert RunConfig(data_dir="/data/x").data_path == Path("/data/x")


def test_saved_modalities_reload(tmp_path):
    cfg = run_config_from_dict({"synth": {"modalities": [
        {"modality_id": "gait", "metric_kind": "euclidean", "quality_range": [0.5, 0.9]},
        {"modality_id": "face", "feature_dim": 8},
    ]}})
    save_run_config(cfg, tmp_path / "config.json")
    again = load_run_config(tmp_path / "config.json")
    assert again.synth.modalities == cfg.synth.modalities
    assert again.synth.modalities[0].quality_range == (0.5, 0.9)
    assert config_hash(again) == config_hash(cfg)
