"""Tests for cohort module."""

from collections import Counter

import numpy as np
import pytest
from pydantic import ValidationError

from miaaudit.cohort import (
    CohortConfig,
    CohortError,
    assign_target_train,
    data_distribution,
    generate_cohort,
    label_instance,
    label_person,
    read_cohort,
    split_for_attack,
    write_cohort,
)
from miaaudit.models import AttackSet


def _participants(recordings):
    groups = {}
    for recording in recordings:
        groups.setdefault(recording.participant_id, []).append(recording)
    return groups


class TestCohortConfig:
    def test_defaults(self):
        config = CohortConfig()
        assert config.grid_dim == 25
        assert sum(config.split_ratios) == pytest.approx(1.0)

    def test_empty_frame_range(self):
        with pytest.raises(ValidationError):
            CohortConfig(frames_per_recording=(10, 5))

    def test_ratios_must_sum_to_one(self):
        with pytest.raises(ValidationError):
            CohortConfig(split_ratios=(0.5, 0.5, 0.5))

    def test_unknown_field(self):
        with pytest.raises(ValidationError):
            CohortConfig(n_subjects=3)


class TestGenerateCohort:
    def test_deterministic(self, tiny_cohort_config):
        """Same config and seed give identical frames."""
        a = generate_cohort(tiny_cohort_config, seed=3)
        b = generate_cohort(tiny_cohort_config, seed=3)
        assert [r.recording_id for r in a] == [r.recording_id for r in b]
        for ra, rb in zip(a, b, strict=True):
            for fa, fb in zip(ra.frames, rb.frames, strict=True):
                assert np.array_equal(fa.left_eye, fb.left_eye)
                assert np.array_equal(fa.face_grid, fb.face_grid)
                assert np.array_equal(fa.gaze_label, fb.gaze_label)

    def test_different_seed_differs(self, tiny_cohort_config):
        a = generate_cohort(tiny_cohort_config, seed=3)[0].frames[0]
        b = generate_cohort(tiny_cohort_config, seed=4)[0].frames[0]
        assert not np.array_equal(a.face, b.face)

    def test_shapes_and_ids(self, tiny_cohort_config):
        recordings = generate_cohort(tiny_cohort_config, seed=1)
        assert len(_participants(recordings)) == 12
        for recording in recordings:
            assert recording.recording_id.startswith(recording.participant_id + "-R")
            assert 4 <= len(recording.frames) <= 6
            for index, frame in enumerate(recording.frames):
                assert frame.frame_index == index
                assert frame.left_eye.shape == frame.right_eye.shape == (3,)
                assert frame.face.shape == (4,)
                assert frame.face_grid.shape == (4,)
                assert set(np.unique(frame.face_grid)) <= {0.0, 1.0}
                assert frame.gaze_label.shape == (2,)

    def test_recording_counts_follow_distribution(self, tiny_cohort_config):
        config = tiny_cohort_config.model_copy(
            update={"recordings_per_participant": {2: 1.0}}
        )
        counts = Counter(r.participant_id for r in generate_cohort(config, seed=0))
        assert set(counts.values()) == {2}

    def test_identity_signal_clusters_participants(self, tiny_cohort_config):
        """Frames of one participant sit closer together than frames of two."""
        config = tiny_cohort_config.model_copy(update={"noise_scale": 0.1})
        groups = _participants(generate_cohort(config, seed=2))
        faces = {
            pid: np.array([f.face for r in recs for f in r.frames])
            for pid, recs in groups.items()
        }
        within = np.mean([np.var(x, axis=0).sum() for x in faces.values()])
        centers = np.array([x.mean(axis=0) for x in faces.values()])
        assert within < np.var(centers, axis=0).sum()

    def test_no_identity_signal_indistinguishable(self, tiny_cohort_config):
        """At strength 0 two participants' features share one distribution."""
        config = tiny_cohort_config.model_copy(
            update={
                "n_participants": 2,
                "recordings_per_participant": {1: 1.0},
                "frames_per_recording": (1000, 1000),
                "identity_signal_strength": 0.0,
            }
        )
        first, second = generate_cohort(config, seed=3)
        for branch in ("left_eye", "face"):
            a = np.array([getattr(f, branch).mean() for f in first.frames])
            b = np.array([getattr(f, branch).mean() for f in second.frames])
            sigma = np.sqrt(a.var(ddof=1) / a.size + b.var(ddof=1) / b.size)
            assert abs(a.mean() - b.mean()) <= 3 * sigma, branch


class TestAssignTargetTrain:
    def test_forced_pairs_split_participants(self, tiny_cohort_config):
        """Every multi-recording participant gets one recording in, one out."""
        recordings = assign_target_train(
            generate_cohort(tiny_cohort_config, seed=5), 0.5, seed=5
        )
        for recs in _participants(recordings).values():
            if len(recs) == 2:
                assert sorted(r.in_target_train for r in recs) == [False, True]

    def test_exact_count(self, tiny_cohort_config):
        config = tiny_cohort_config.model_copy(
            update={"recordings_per_participant": {1: 1.0}}
        )
        recordings = assign_target_train(generate_cohort(config, seed=0), 0.25, 9)
        assert sum(r.in_target_train for r in recordings) == 3

    def test_forced_pairs_zero(self, tiny_cohort_config):
        recordings = generate_cohort(tiny_cohort_config, seed=5)
        marked = assign_target_train(recordings, 0.5, seed=5, forced_pairs=0)
        # half rounds up
        assert sum(r.in_target_train for r in marked) == (len(marked) + 1) // 2

    def test_does_not_modify_input(self, tiny_cohort_config):
        recordings = generate_cohort(tiny_cohort_config, seed=5)
        assign_target_train(recordings, 0.5, seed=5)
        assert not any(r.in_target_train for r in recordings)

    def test_deterministic(self, tiny_cohort_config):
        recordings = generate_cohort(tiny_cohort_config, seed=5)
        a = assign_target_train(recordings, 0.5, seed=8, exact_count=False)
        b = assign_target_train(recordings, 0.5, seed=8, exact_count=False)
        assert [r.in_target_train for r in a] == [r.in_target_train for r in b]

    @pytest.mark.parametrize("fraction", [0.0, 1.0, 1.5])
    def test_fraction_out_of_range(self, tiny_cohort, fraction):
        with pytest.raises(CohortError):
            assign_target_train(tiny_cohort, fraction, seed=0)

    def test_needs_two_recordings(self, tiny_cohort):
        with pytest.raises(CohortError):
            assign_target_train(tiny_cohort[:1], 0.5, seed=0)


class TestLabels:
    def test_person_label_covers_siblings(self, tiny_cohort):
        """A held-out recording is a person-level member if a sibling was trained."""
        for recs in _participants(tiny_cohort).values():
            for recording in recs:
                assert label_instance(recording) == int(recording.in_target_train)
                expected = int(any(r.in_target_train for r in recs))
                assert label_person(recording, recs) == expected
                assert label_person(recording, recs) >= label_instance(recording)


class TestSplitForAttack:
    @pytest.fixture
    def split(self, tiny_cohort):
        return split_for_attack(tiny_cohort, (0.4, 0.28, 0.32), seed=1)

    def test_every_recording_assigned(self, tiny_cohort, split):
        assert set(split.assignment) == {r.recording_id for r in tiny_cohort}
        assert all(split.recording_ids(s) for s in AttackSet)

    def test_trained_multi_recordings_in_train(self, tiny_cohort, split):
        for recs in _participants(tiny_cohort).values():
            if len(recs) > 1:
                for recording in recs:
                    if recording.in_target_train:
                        assert split.assignment[recording.recording_id] is (
                            AttackSet.TRAIN
                        )

    def test_multi_recording_population(self, split):
        for attack_set in AttackSet:
            for rid in split.multi_recording_population(attack_set):
                assert split.y_person[rid] == 1
                assert split.y_instance[rid] == 0
                assert split.assignment[rid] is attack_set

    def test_deterministic(self, tiny_cohort, split):
        again = split_for_attack(tiny_cohort, (0.4, 0.28, 0.32), seed=1)
        assert again.assignment == split.assignment

    def test_invalid_ratios(self, tiny_cohort):
        with pytest.raises(CohortError):
            split_for_attack(tiny_cohort, (0.5, 0.5), seed=1)

    def test_too_small_to_fill_sets(self, tiny_cohort):
        with pytest.raises(CohortError):
            split_for_attack(tiny_cohort[:2], (0.4, 0.28, 0.32), seed=1)

    def test_distribution_totals(self, tiny_cohort, split):
        table = data_distribution(tiny_cohort, split)
        assert sum(c.recordings for c in table.values()) == len(tiny_cohort)
        assert sum(c.frames for c in table.values()) == sum(
            len(r.frames) for r in tiny_cohort
        )
        for counts in table.values():
            assert counts.recordings_instance <= counts.recordings_person
            assert counts.frames_instance <= counts.frames_person <= counts.frames


class TestSerialization:
    def test_write_and_read(self, tiny_cohort, tmp_path):
        split = split_for_attack(tiny_cohort, (0.4, 0.28, 0.32), seed=1)
        write_cohort(tiny_cohort, split, tmp_path / "cohort", seed=7)
        assert (tmp_path / "cohort" / "frames.csv").is_file()

        recordings, loaded = read_cohort(tmp_path / "cohort")
        assert loaded.assignment == split.assignment
        assert loaded.y_person == split.y_person
        assert [r.in_target_train for r in recordings] == [
            r.in_target_train for r in tiny_cohort
        ]
        original = tiny_cohort[0].frames[-1]
        restored = recordings[0].frames[-1]
        assert np.array_equal(original.right_eye, restored.right_eye)
        assert np.array_equal(original.face_grid, restored.face_grid)
        assert np.array_equal(original.gaze_label, restored.gaze_label)
