"""Tests for target module."""

from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from pydantic import ValidationError

from miaaudit import nnet
from miaaudit.cohort import assign_target_train, generate_cohort
from miaaudit.config import ExperimentConfig
from miaaudit.target import (
    TargetArchitecture,
    TargetConfig,
    TargetDivergedError,
    TargetError,
    build_target,
    composite_gradients,
    dumps_target,
    frame_inputs,
    load_target,
    loads_target,
    mse,
    predict,
    probe,
    probe_recording,
    save_target,
    train_target,
)

CONFIGS = Path(__file__).parent.parent / "configs"


@pytest.fixture
def model(tiny_architecture):
    return build_target(tiny_architecture, seed=4)


@pytest.fixture
def trained(model, tiny_cohort):
    return train_target(
        model,
        tiny_cohort,
        epochs=3,
        learning_rate=0.05,
        seed=4,
        batch_size=8,
        heldout=[r for r in tiny_cohort if not r.in_target_train],
    )


class TestArchitecture:
    def test_defaults_are_consistent(self):
        """Default branch outputs add up to the default combiner input."""
        model = build_target(TargetArchitecture(), seed=0)
        assert model.combiner.in_dim == 8 + 8 + 8
        assert model.combiner.out_dim == 2
        assert model.combiner.depth >= 3

    def test_combiner_input_mismatch(self, tiny_architecture):
        architecture = tiny_architecture.model_copy(
            update={"combiner": [9, 6, 5, 4, 2]}
        )
        with pytest.raises(TargetError):
            build_target(architecture, seed=0)

    def test_shallow_combiner(self, tiny_architecture):
        architecture = tiny_architecture.model_copy(update={"combiner": [8, 4, 2]})
        with pytest.raises(TargetError):
            build_target(architecture, seed=0)

    def test_combiner_must_output_gaze(self, tiny_architecture):
        architecture = tiny_architecture.model_copy(update={"combiner": [8, 6, 5, 3]})
        with pytest.raises(TargetError):
            build_target(architecture, seed=0)

    def test_rejects_unknown_fields(self):
        with pytest.raises(ValidationError):
            TargetConfig(epoch=3)

    def test_build_deterministic(self, tiny_architecture):
        a = build_target(tiny_architecture, seed=1)
        b = build_target(tiny_architecture, seed=1)
        assert all(
            a.nets()[name].identical_to(b.nets()[name]) for name in a.nets()
        )
        # sections get distinct seeds
        assert a.eyes.seed != a.face.seed


class TestForward:
    def test_predict_shape(self, model, tiny_cohort):
        frames = tiny_cohort[0].frames
        assert predict(model, frames).shape == (len(frames), 2)

    def test_frame_inputs_concatenate_eyes(self, tiny_cohort):
        frame = tiny_cohort[0].frames[0]
        inputs = frame_inputs([frame])
        assert np.array_equal(
            inputs["eyes"][0], np.concatenate([frame.left_eye, frame.right_eye])
        )

    def test_composite_gradients_match_finite_differences(self, model, tiny_cohort):
        """Branch gradients routed through the combiner are exact."""
        frames = tiny_cohort[0].frames
        inputs = frame_inputs(frames)
        grads = composite_gradients(model, inputs)
        eps = 1e-6
        weight = model.face.layers[0].weight
        for index in [(0, 0), (2, 1), (4, 3)]:
            losses = []
            for sign in (1.0, -1.0):
                bumped = weight.copy()
                bumped[index] += sign * eps
                layer = nnet.Layer(
                    weight=bumped,
                    bias=model.face.layers[0].bias,
                    activation=model.face.layers[0].activation,
                )
                face = nnet.DenseNet(layers=(layer, *model.face.layers[1:]))
                losses.append(mse(model.with_nets({"face": face}), frames))
            numeric = (losses[0] - losses[1]) / (2 * eps)
            assert grads["face"].weights[0][index] == pytest.approx(
                numeric, rel=1e-4, abs=1e-9
            )


class TestTrainTarget:
    def test_reduces_training_mse(self, trained):
        log = trained.training_log
        assert log.epochs == 3
        assert len(log.train_mse) == 4
        assert log.final_train_mse < log.train_mse[0]
        assert log.heldout_mse is not None

    def test_deterministic(self, model, tiny_cohort, trained):
        again = train_target(
            model,
            tiny_cohort,
            epochs=3,
            learning_rate=0.05,
            seed=4,
            batch_size=8,
        )
        assert all(
            trained.nets()[name].identical_to(again.nets()[name])
            for name in trained.nets()
        )

    def test_zero_epochs_is_identity(self, model, tiny_cohort):
        unchanged = train_target(model, tiny_cohort, 0, 0.05, seed=4)
        assert unchanged.combiner.identical_to(model.combiner)

    def test_needs_marked_recordings(self, model, tiny_cohort_config):
        with pytest.raises(TargetError):
            train_target(model, generate_cohort(tiny_cohort_config, 1), 1, 0.05, 1)

    def test_divergence_reports_epoch(self, model, tiny_cohort):
        with pytest.raises(TargetDivergedError) as exc_info:
            train_target(model, tiny_cohort, 5, 1e200, seed=4)
        assert exc_info.value.epoch == 1


class TestProbe:
    def test_trace_layout(self, model, tiny_architecture, tiny_cohort):
        frame = tiny_cohort[0].frames[0]
        trace = probe(model, frame)
        combiner = tiny_architecture.combiner
        assert trace.final_output.shape == (2,)
        assert trace.penultimate_output.shape == (combiner[-2],)
        assert [g.size for g in trace.grads_last3] == [
            combiner[-1] * combiner[-2],
            combiner[-2] * combiner[-3],
            combiner[-3] * combiner[-4],
        ]
        assert [g.size for g in trace.grads_branch_last] == [5 * 3, 5 * 3, 4 * 2]
        assert np.array_equal(trace.label, frame.gaze_label)

    def test_face_grid_gradient_is_last_layer(self, model, tiny_cohort):
        """Branch gradients come from each branch's final weight matrix."""
        frame = tiny_cohort[0].frames[0]
        trace = probe(model, frame)
        face_grid = trace.grads_branch_last[2]
        last = model.face_grid.layers[-1]
        assert face_grid.size == last.weight.size
        assert face_grid.size != model.face_grid.layers[0].weight.size
        eps = 1e-6
        for flat in range(last.weight.size):
            index = np.unravel_index(flat, last.weight.shape)
            losses = []
            for sign in (1.0, -1.0):
                bumped = last.weight.copy()
                bumped[index] += sign * eps
                face_grid_net = nnet.DenseNet(
                    layers=(*model.face_grid.layers[:-1], replace(last, weight=bumped))
                )
                bumped_model = model.with_nets({"face_grid": face_grid_net})
                losses.append(mse(bumped_model, [frame]))
            numeric = (losses[0] - losses[1]) / (2 * eps)
            assert face_grid[flat] == pytest.approx(numeric, rel=1e-4, abs=1e-9)

    def test_loss_matches_prediction(self, model, tiny_cohort):
        frame = tiny_cohort[0].frames[0]
        trace = probe(model, frame)
        assert np.allclose(trace.final_output, predict(model, [frame])[0])
        assert trace.loss == pytest.approx(
            np.mean((trace.final_output - frame.gaze_label) ** 2)
        )

    def test_does_not_modify_model(self, model, tiny_cohort):
        before = loads_target(dumps_target(model))
        probe_recording(model, tiny_cohort[0])
        assert all(model.nets()[n].identical_to(before.nets()[n]) for n in model.nets())

    def test_one_trace_per_frame(self, model, tiny_cohort):
        assert len(probe_recording(model, tiny_cohort[1])) == len(
            tiny_cohort[1].frames
        )


class TestCheckpoint:
    def test_round_trip(self, trained, tmp_path):
        path = tmp_path / "target.ckpt"
        save_target(trained, path)
        loaded = load_target(path)
        assert all(
            loaded.nets()[name].identical_to(trained.nets()[name])
            for name in trained.nets()
        )
        assert path.read_text().startswith(
            "MIAAUDIT-TARGET v1 sections=eyes,face,face_grid,combiner\n"
        )

    def test_missing_manifest(self, model):
        text = dumps_target(model).split("\n", 1)[1]
        with pytest.raises(nnet.CheckpointError):
            loads_target(text)

    def test_missing_section(self, model):
        text = dumps_target(model)
        cut = text.rindex(nnet.CHECKPOINT_HEADER)
        with pytest.raises(nnet.CheckpointError):
            loads_target(text[:cut])

    def test_save_load_save_is_byte_identical(self, trained, tmp_path):
        save_target(trained, tmp_path / "a.ckpt")
        save_target(load_target(tmp_path / "a.ckpt"), tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_probe_on_loaded_model_is_exact(self, trained, tiny_cohort):
        loaded = loads_target(dumps_target(trained))
        frame = tiny_cohort[2].frames[1]
        original, restored = probe(trained, frame), probe(loaded, frame)
        assert np.array_equal(original.final_output, restored.final_output)
        assert original.loss == restored.loss
        for a, b in zip(original.grads_last3, restored.grads_last3, strict=True):
            assert np.array_equal(a, b)


@pytest.mark.slow
class TestOverfitRegime:
    def test_members_have_lower_loss(self):
        """A target trained far past generalization fits its own recordings best."""
        config = ExperimentConfig.from_yaml_file(CONFIGS / "desk.yaml")
        recordings = assign_target_train(
            generate_cohort(config.cohort, config.seeds.cohort),
            config.cohort.target_train_fraction,
            seed=config.seeds.cohort,
        )
        target = train_target(
            build_target(config.target.architecture, config.seeds.target),
            recordings,
            epochs=config.target.epochs,
            learning_rate=config.target.learning_rate,
            seed=config.seeds.target,
            batch_size=config.target.batch_size,
        )
        members = [f for r in recordings if r.in_target_train for f in r.frames]
        others = [f for r in recordings if not r.in_target_train for f in r.frames]
        member_loss = np.mean([probe(target, f).loss for f in members])
        other_loss = np.mean([probe(target, f).loss for f in others])
        assert member_loss < other_loss
