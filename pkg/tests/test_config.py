"""Tests for config module."""

from pathlib import Path

import pytest
import yaml

from miaaudit.attack import FeatureConfig
from miaaudit.config import (
    ConfigError,
    ExperimentConfig,
    LabelModeSetting,
    Settings,
)
from miaaudit.models import LabelMode


def _write(tmp_path, data, name="config.yaml"):
    path = tmp_path / name
    path.write_text(yaml.dump(data) if not isinstance(data, str) else data)
    return path


class TestSettings:
    def test_defaults(self, monkeypatch):
        monkeypatch.delenv("MIAAUDIT_OUT", raising=False)
        monkeypatch.delenv("MIAAUDIT_LOG_LEVEL", raising=False)
        settings = Settings()
        assert settings.out is None
        assert settings.log_level == "INFO"

    def test_from_env(self, monkeypatch, tmp_path):
        monkeypatch.setenv("MIAAUDIT_OUT", str(tmp_path))
        monkeypatch.setenv("MIAAUDIT_LOG_LEVEL", "DEBUG")
        settings = Settings()
        assert settings.out == tmp_path
        assert settings.log_level == "DEBUG"


class TestExperimentConfig:
    def test_load_yaml_file(self, experiment_file, experiment_dict):
        config = ExperimentConfig.from_yaml_file(experiment_file)
        assert config.seeds.attack == 3
        assert config.target.epochs == 5
        assert config.cohort.recordings_per_participant == {1: 0.5, 2: 0.5}
        assert config.attack.feature_config is FeatureConfig.PLUS_3GRAD_LOSS_LABEL
        assert config.out_dir == Path(experiment_dict["out_dir"])

    def test_label_modes(self, experiment_dict):
        config = ExperimentConfig.model_validate(experiment_dict)
        assert config.label_modes() == [LabelMode.INSTANCE, LabelMode.PERSON]
        person = config.model_copy(update={"label_mode": LabelModeSetting.PERSON})
        assert person.label_modes() == [LabelMode.PERSON]

    def test_seeds_required(self, tmp_path, experiment_dict):
        del experiment_dict["seeds"]
        with pytest.raises(ConfigError, match="seeds"):
            ExperimentConfig.from_yaml_file(_write(tmp_path, experiment_dict))

    def test_unknown_field_named(self, tmp_path, experiment_dict):
        """Validation errors name the offending field path."""
        experiment_dict["target"]["epoch"] = 4
        with pytest.raises(ConfigError, match=r"target\.epoch"):
            ExperimentConfig.from_yaml_file(_write(tmp_path, experiment_dict))

    def test_invalid_value_named(self, tmp_path, experiment_dict):
        experiment_dict["attack"]["feature_config"] = "PLUS_9GRAD"
        with pytest.raises(ConfigError, match=r"attack\.feature_config"):
            ExperimentConfig.from_yaml_file(_write(tmp_path, experiment_dict))

    def test_architecture_must_fit_cohort(self, tmp_path, experiment_dict):
        experiment_dict["cohort"]["eye_dim"] = 5
        with pytest.raises(ConfigError, match="eyes"):
            ExperimentConfig.from_yaml_file(_write(tmp_path, experiment_dict))

    def test_yaml_syntax_error_has_line(self, tmp_path):
        path = _write(tmp_path, "seeds:\n  cohort: 1\n  target: [2\n")
        with pytest.raises(ConfigError, match=r"config\.yaml:\d+"):
            ExperimentConfig.from_yaml_file(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_yaml_file(tmp_path / "absent.yaml")

    def test_echo_excludes_out_dir(self, experiment_dict):
        echo = ExperimentConfig.model_validate(experiment_dict).echo()
        assert "out_dir" not in echo
        assert echo["seeds"] == {"cohort": 1, "target": 2, "attack": 3, "svm": 4}


class TestWithOverride:
    def test_sets_and_revalidates(self, experiment_dict):
        config = ExperimentConfig.model_validate(experiment_dict)
        updated = config.with_override("target.epochs", "12")
        assert updated.target.epochs == 12
        assert config.target.epochs == 5

    def test_nested_cohort_field(self, experiment_dict):
        config = ExperimentConfig.model_validate(experiment_dict)
        updated = config.with_override("cohort.identity_signal_strength", "0.25")
        assert updated.cohort.identity_signal_strength == 0.25

    @pytest.mark.parametrize("path", ["target.epoch", "nope.epochs", "seeds.cohort.x"])
    def test_unknown_path(self, experiment_dict, path):
        config = ExperimentConfig.model_validate(experiment_dict)
        with pytest.raises(ConfigError):
            config.with_override(path, "1")

    def test_invalid_value(self, experiment_dict):
        config = ExperimentConfig.model_validate(experiment_dict)
        with pytest.raises(ConfigError, match="target.epochs=-3"):
            config.with_override("target.epochs", "-3")
