import json

import pytest

from pcdlib.config import TrainConfig, load_config, parse_config, parse_config_dict, preset_config
from pcdlib.exceptions import ConfigurationError


def write(tmp_path, data):
    path = tmp_path / "config.json"
    path.write_text(data if isinstance(data, str) else json.dumps(data))
    return str(path)


class TestParse:
    def test_canonical_round_trip(self):
        config = TrainConfig()
        assert parse_config_dict(config.to_dict()) == config

    def test_full_preset_round_trip(self, tmp_path):
        config = preset_config("full")
        assert parse_config(write(tmp_path, config.to_json())) == config
        assert config.optim.peak_lr == pytest.approx(4.0)
        assert config.loss.queue_capacity == 65536

    def test_defaults_fill_missing_sections(self):
        config = parse_config_dict({"defaults": True, "loss": {"tau": 0.1}})
        assert config.loss.tau == 0.1
        assert config.loss.level == "pixel"
        assert config.optim == TrainConfig().optim

    def test_missing_section_without_defaults(self):
        data = TrainConfig().to_dict()
        data["defaults"] = False
        del data["erf"]
        with pytest.raises(ConfigurationError) as e:
            parse_config_dict(data)
        assert e.value.key == "erf"

    def test_unknown_key(self):
        with pytest.raises(ConfigurationError) as e:
            parse_config_dict({"defaults": True, "loss": {"temperature": 0.1}})
        assert e.value.key == "loss.temperature"
        assert str(e.value).startswith("loss.temperature: ")

    def test_wrong_type(self):
        with pytest.raises(ConfigurationError) as e:
            parse_config_dict({"defaults": True, "optim": {"batch_size": "64"}})
        assert e.value.key == "optim.batch_size"

    def test_bool_is_not_an_integer(self):
        with pytest.raises(ConfigurationError):
            parse_config_dict({"defaults": True, "seed": True})

    def test_integer_accepted_as_number(self):
        assert parse_config_dict({"defaults": True, "loss": {"tau": 1}}).loss.tau == 1.0

    def test_constraint_names_key(self):
        with pytest.raises(ConfigurationError) as e:
            parse_config_dict({"defaults": True, "loss": {"tau": -1.0}})
        assert e.value.key == "loss.tau"

    def test_nested_constraint(self):
        with pytest.raises(ConfigurationError) as e:
            parse_config_dict({"defaults": True, "augment": {"view_a": {"flip_prob": 2.0}}})
        assert e.value.key == "augment.view_a.flip_prob"

    def test_warmup_must_be_shorter(self):
        with pytest.raises(ConfigurationError) as e:
            parse_config_dict({"defaults": True, "optim": {"epochs": 1.0, "warmup_epochs": 1.0}})
        assert e.value.key == "optim.warmup_epochs"

    def test_backbone_stages(self):
        config = parse_config_dict(
            {"defaults": True, "model": {"student_backbone": {"stem_channels": 8, "stages": [[1, 8, 2]]}}}
        )
        assert config.model.student_backbone.stages == [[1, 8, 2]]
        with pytest.raises(ConfigurationError):
            parse_config_dict({"defaults": True, "model": {"student_backbone": {"stages": "deep"}}})

    def test_not_an_object(self):
        with pytest.raises(ConfigurationError):
            parse_config_dict([1, 2])


class TestFiles:
    def test_invalid_json(self, tmp_path):
        with pytest.raises(ConfigurationError, match="invalid JSON"):
            parse_config(write(tmp_path, "{not json"))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigurationError, match="cannot read"):
            parse_config(str(tmp_path / "absent.json"))

    def test_unknown_preset(self):
        with pytest.raises(ConfigurationError):
            preset_config("cluster")


class TestLoad:
    def test_default_is_desk(self, monkeypatch):
        monkeypatch.delenv("PCDLIB_CONFIG", raising=False)
        monkeypatch.delenv("PCDLIB_SEED", raising=False)
        assert load_config() == TrainConfig()

    def test_environment(self, tmp_path, monkeypatch):
        monkeypatch.setenv("PCDLIB_CONFIG", write(tmp_path, {"defaults": True, "seed": 3}))
        monkeypatch.delenv("PCDLIB_SEED", raising=False)
        assert load_config().seed == 3
        monkeypatch.setenv("PCDLIB_SEED", "11")
        assert load_config().seed == 11
        assert load_config(seed=5).seed == 5

    def test_bad_seed_variable(self, monkeypatch):
        monkeypatch.delenv("PCDLIB_CONFIG", raising=False)
        monkeypatch.setenv("PCDLIB_SEED", "abc")
        with pytest.raises(ConfigurationError) as e:
            load_config()
        assert e.value.key == "PCDLIB_SEED"
