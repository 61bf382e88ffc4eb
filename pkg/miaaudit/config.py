"""Application settings and experiment configuration."""

from enum import StrEnum
from pathlib import Path
from typing import Any, Self

import yaml
from pydantic import (
    BaseModel,
    ConfigDict,
    NonNegativeInt,
    ValidationError,
    model_validator,
)
from pydantic_settings import BaseSettings, SettingsConfigDict

from .attack import AttackHyperparams, FeatureConfig
from .cohort import CohortConfig
from .inference import SvmConfig
from .models import LabelMode
from .target import TargetConfig


class ConfigError(Exception):
    """Raised when an experiment config cannot be read or validated."""


class Settings(BaseSettings):
    """Application settings loaded from environment variables

    e.g. MIAAUDIT_OUT -> out
    """

    out: Path | None = None
    """
    Overrides the output directory of every run, and is the directory the
    report service reads from
    """

    log_level: str = "INFO"

    model_config = SettingsConfigDict(
        env_prefix="MIAAUDIT_", use_attribute_docstrings=True
    )


class LabelModeSetting(StrEnum):
    INSTANCE = "instance"
    PERSON = "person"
    BOTH = "both"


class Seeds(BaseModel):
    """Every random draw of a run flows from these four seeds."""

    cohort: NonNegativeInt
    """
    Cohort generation, target-train marking and attack split
    """

    target: NonNegativeInt
    attack: NonNegativeInt
    svm: NonNegativeInt

    model_config = ConfigDict(extra="forbid", use_attribute_docstrings=True)


class AttackConfig(BaseModel):
    feature_config: FeatureConfig = FeatureConfig.PLUS_3GRAD_LOSS_LABEL
    hyperparams: AttackHyperparams = AttackHyperparams()
    compare_feature_configs: bool = False
    """
    Also train one frame classifier per feature config and report each
    config's best validation BCE
    """

    model_config = ConfigDict(extra="forbid", use_attribute_docstrings=True)


class SweepConfig(BaseModel):
    param: str = "target.epochs"
    """
    Dotted path of the config field the sweep dial sets
    """

    model_config = ConfigDict(extra="forbid", use_attribute_docstrings=True)


class ExperimentConfig(BaseModel):
    """One `miaaudit run`, loaded from YAML."""

    seeds: Seeds
    cohort: CohortConfig = CohortConfig()
    target: TargetConfig = TargetConfig()
    attack: AttackConfig = AttackConfig()
    svm: SvmConfig = SvmConfig()
    label_mode: LabelModeSetting = LabelModeSetting.BOTH
    """
    "both" trains an instance and a person attack on one cohort and target
    """

    out_dir: Path = Path("miaaudit-out")
    sweep: SweepConfig = SweepConfig()

    model_config = ConfigDict(extra="forbid", use_attribute_docstrings=True)

    @model_validator(mode="after")
    def check_target_inputs(self) -> Self:
        architecture = self.target.architecture
        expected = {
            "eyes": 2 * self.cohort.eye_dim,
            "face": self.cohort.face_dim,
            "face_grid": self.cohort.grid_dim,
        }
        for name, width in expected.items():
            if getattr(architecture, name)[0] != width:
                raise ValueError(
                    f"target.architecture.{name} starts at "
                    f"{getattr(architecture, name)[0]}, cohort features give {width}"
                )
        return self

    def label_modes(self) -> list[LabelMode]:
        if self.label_mode is LabelModeSetting.BOTH:
            return [LabelMode.INSTANCE, LabelMode.PERSON]
        return [LabelMode(self.label_mode.value)]

    def echo(self) -> dict[str, Any]:
        """Config as recorded in reports (output location excluded)."""
        return self.model_dump(mode="json", exclude={"out_dir"})

    def with_override(self, path: str, value: Any) -> "ExperimentConfig":
        """Copy with the field at dotted `path` set to `value` (revalidated)."""
        data = self.model_dump(mode="json")
        *parents, leaf = path.split(".")
        node = data
        for key in parents:
            if not isinstance(node.get(key), dict):
                raise ConfigError(f"Unknown config field '{path}'")
            node = node[key]
        if leaf not in node:
            raise ConfigError(f"Unknown config field '{path}'")
        node[leaf] = value
        return _validate(data, f"{path}={value}")

    @classmethod
    def from_yaml_file(cls, path: Path | str) -> "ExperimentConfig":
        """Load and validate an experiment config from YAML."""
        try:
            with open(path) as f:
                data = yaml.safe_load(f)
        except yaml.MarkedYAMLError as e:
            line = e.problem_mark.line + 1 if e.problem_mark else "?"
            raise ConfigError(f"{path}:{line}: {e.problem}") from e
        except (OSError, yaml.YAMLError) as e:
            raise ConfigError(f"{path}: {e}") from e
        return _validate(data, str(path))


def _location(loc: tuple[int | str, ...]) -> str:
    return ".".join(str(part) for part in loc) or "<root>"


def _validate(data: Any, source: str) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        problems = "; ".join(
            f"{_location(error['loc'])}: {error['msg']}" for error in e.errors()
        )
        raise ConfigError(f"{source}: {problems}") from e
