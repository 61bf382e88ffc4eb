"""Pytest configuration and shared fixtures."""

import pytest
import yaml

from miaaudit.cohort import CohortConfig, assign_target_train, generate_cohort
from miaaudit.target import TargetArchitecture


@pytest.fixture
def tiny_cohort_config():
    """Small cohort: 12 participants, some with two recordings, 4-6 frames each."""
    return CohortConfig(
        n_participants=12,
        recordings_per_participant={1: 0.5, 2: 0.5},
        frames_per_recording=(4, 6),
        eye_dim=3,
        face_dim=4,
        face_grid_size=2,
    )


@pytest.fixture
def tiny_architecture():
    """Target architecture matching `tiny_cohort_config` features."""
    return TargetArchitecture(
        eyes=[6, 5, 3],
        face=[4, 5, 3],
        face_grid=[4, 4, 2],
        combiner=[8, 6, 5, 4, 2],
    )


@pytest.fixture
def tiny_cohort(tiny_cohort_config):
    recordings = generate_cohort(tiny_cohort_config, seed=7)
    return assign_target_train(recordings, 0.5, seed=7)


@pytest.fixture
def experiment_dict(tmp_path):
    """Minimal end-to-end config (tiny cohort, 5 target epochs)."""
    return {
        "seeds": {"cohort": 1, "target": 2, "attack": 3, "svm": 4},
        "cohort": {
            "n_participants": 24,
            "recordings_per_participant": {1: 0.5, 2: 0.5},
            "frames_per_recording": [4, 6],
            "eye_dim": 3,
            "face_dim": 4,
            "face_grid_size": 2,
        },
        "target": {
            "architecture": {
                "eyes": [6, 5, 3],
                "face": [4, 5, 3],
                "face_grid": [4, 4, 2],
                "combiner": [8, 6, 5, 4, 2],
            },
            "epochs": 5,
            "batch_size": 8,
        },
        "attack": {
            "hyperparams": {
                "encoder_hidden": 8,
                "code_dim": 4,
                "classifier_hidden": [8, 6, 4],
                "epochs": 3,
                "batch_size": 16,
            }
        },
        "svm": {"epochs": 50},
        "out_dir": str(tmp_path / "out"),
    }


@pytest.fixture
def experiment_file(tmp_path, experiment_dict):
    config_path = tmp_path / "experiment.yaml"
    with open(config_path, "w") as f:
        yaml.dump(experiment_dict, f)
    return config_path
