import numpy as np
import pytest

from tsinsight.engine import Tape, grad_check
from tsinsight.models import (
    AutoEncoderSpec,
    CheckpointError,
    ClassifierSpec,
    Model,
    ModelBundle,
    SpecError,
    build_model,
    load_checkpoint,
    model_logits,
    reconstruct,
    save_checkpoint,
    stacked_forward,
)
from tsinsight.training import TrainConfig, finetune_palacio, make_stacked_objective


class TestSpecs:
    def test_class_count_validated(self):
        with pytest.raises(SpecError, match="class_count"):
            build_model(ClassifierSpec(3, 50, 1), seed=0)

    def test_variant_validated(self):
        with pytest.raises(SpecError, match="variant"):
            build_model(ClassifierSpec(3, 50, 2, variant="transformer"), seed=0)

    def test_kernel_width_validated(self):
        with pytest.raises(SpecError, match="kernel_width"):
            build_model(ClassifierSpec(3, 50, 2, kernel_width=4), seed=0)

    def test_too_short_sequence_rejected(self):
        with pytest.raises(SpecError, match="too short"):
            build_model(ClassifierSpec(3, 2, 2), seed=0).spec.pooled_length()


class TestBuildAndForward:
    def test_cnn_logit_shape_and_finiteness(self):
        model = build_model(ClassifierSpec(3, 50, 2), seed=0)
        logits = model_logits(model, np.zeros((1, 3, 50)))
        assert logits.shape == (1, 2) and np.isfinite(logits).all()

    def test_autoencoder_output_matches_input_shape(self):
        model = build_model(AutoEncoderSpec(3, 50), seed=0)
        out = reconstruct(model, np.zeros((2, 3, 50)))
        assert out.shape == (2, 3, 50)

    @pytest.mark.parametrize("channels", [1, 3, 10])
    def test_autoencoder_shape_across_channel_counts(self, channels, rng):
        model = build_model(AutoEncoderSpec(channels, 26), seed=1)
        x = rng.normal(size=(3, channels, 26))
        assert reconstruct(model, x).shape == x.shape

    def test_same_seed_bit_identical(self):
        a = build_model(ClassifierSpec(3, 50, 2), seed=9)
        b = build_model(ClassifierSpec(3, 50, 2), seed=9)
        for name in a.params:
            assert np.array_equal(a.params[name], b.params[name])

    def test_different_seed_differs(self):
        a = build_model(ClassifierSpec(3, 50, 2), seed=9)
        b = build_model(ClassifierSpec(3, 50, 2), seed=10)
        assert any(not np.array_equal(a.params[n], b.params[n]) for n in a.params)

    def test_cnn_conv_last_capturable(self, rng):
        spec = ClassifierSpec(3, 20, 2)
        model = build_model(spec, seed=0)
        tape = Tape()
        model.trace(tape, tape.leaf(rng.normal(size=(2, 3, 20))), trainable=False)
        cap = tape.capture("conv_last")
        assert cap.activation.shape == (2, spec.conv_channels[-1], 20 // 4)

    def test_lstm_gradients_flow_through_full_unroll(self, rng):
        spec = ClassifierSpec(2, 8, 2, variant="lstm", lstm_hidden=4)
        model = build_model(spec, seed=3)
        x = rng.normal(size=(3, 2, 8))
        y = rng.integers(0, 2, size=3)

        def f(params):
            trial = Model(model.kind, model.spec, dict(params))
            tape = Tape()
            logits = trial.trace(tape, tape.leaf(x))
            loss = tape.cross_entropy(logits, y)
            grads = tape.parameter_grads(tape.backward(loss))
            return float(tape.value(loss)), grads

        report = grad_check(f, model.params, 1e-5)
        assert report.max_relative_error < 1e-4
        # the input-to-gate weights receive signal from every unrolled step
        _, grads = f(model.params)
        assert np.abs(grads["lstm.wx"]).max() > 0

    def test_lstm_forget_bias_initialised_open(self):
        model = build_model(ClassifierSpec(2, 8, 2, variant="lstm", lstm_hidden=4), seed=0)
        bias = model.params["lstm.b"]
        np.testing.assert_array_equal(bias[4:8], np.ones(4))
        np.testing.assert_array_equal(bias[:4], np.zeros(4))


class TestStacked:
    def test_identity_autoencoder_preserves_logits(self, rng):
        clf = build_model(ClassifierSpec(3, 20, 2), seed=0)
        identity = build_model(AutoEncoderSpec(3, 20, encoder_channels=[]), seed=0)
        bundle = ModelBundle(clf, identity)
        x = rng.normal(size=(4, 3, 20))
        result = stacked_forward(bundle, x)
        np.testing.assert_array_equal(result.reconstruction, x)
        np.testing.assert_array_equal(result.logits, model_logits(clf, x))

    def test_frozen_classifier_gets_zero_gradient(self, tiny_bundle, rng):
        x = rng.normal(size=(4, 2, 8))
        result = stacked_forward(tiny_bundle, x)
        tape = result.tape
        loss = tape.cross_entropy(result.logits_nid, rng.integers(0, 3, size=4))
        grads = tape.parameter_grads(tape.backward(loss))
        for name, grad in grads.items():
            if name.startswith("clf/"):
                assert not grad.any(), name

    def test_encoder_gradient_nonzero(self, tiny_bundle, rng):
        x = rng.normal(size=(4, 2, 8))
        y = rng.integers(0, 3, size=4)
        f = make_stacked_objective(tiny_bundle, x, y, weight_decay=0.0)
        point = {f"ae/{k}": v for k, v in tiny_bundle.autoencoder.params.items()}
        value, grads = f(point)
        assert any(np.abs(g).max() > 0 for n, g in grads.items() if n.startswith("ae/enc"))
        assert grad_check(f, point, 1e-5).max_relative_error < 1e-4

    def test_shape_mismatch_rejected(self):
        clf = build_model(ClassifierSpec(3, 20, 2), seed=0)
        ae = build_model(AutoEncoderSpec(3, 24), seed=0)
        with pytest.raises(SpecError, match="does not match"):
            ModelBundle(clf, ae)

    def test_frozen_parameters_bit_identical_after_finetuning(self, tiny_synth):
        clf = build_model(ClassifierSpec(3, 24, 2), seed=0)
        ae = build_model(AutoEncoderSpec(3, 24), seed=1)
        bundle = ModelBundle(clf, ae)
        before = {k: v.copy() for k, v in clf.params.items()}
        finetune_palacio(bundle, tiny_synth, TrainConfig(epochs=2, seed=0))
        for name in before:
            assert np.array_equal(before[name], clf.params[name])


class TestCheckpoints:
    def test_round_trip_is_bit_exact_after_first_quantisation(self, tmp_path, rng):
        model = build_model(ClassifierSpec(3, 20, 2), seed=4)
        save_checkpoint(model, tmp_path / "m")
        loaded = load_checkpoint(tmp_path / "m")
        save_checkpoint(loaded, tmp_path / "m2")
        again = load_checkpoint(tmp_path / "m2")
        x = rng.normal(size=(2, 3, 20))
        np.testing.assert_array_equal(model_logits(loaded, x), model_logits(again, x))
        for name in loaded.params:
            assert np.array_equal(loaded.params[name], again.params[name])
        assert (tmp_path / "m.json").exists() and (tmp_path / "m.bin").exists()

    def test_spec_survives_round_trip(self, tmp_path):
        spec = ClassifierSpec(2, 16, 4, conv_channels=[4, 8], kernel_width=3)
        save_checkpoint(build_model(spec, seed=0), tmp_path / "m")
        assert load_checkpoint(tmp_path / "m").spec == spec

    def test_truncated_blob_detected(self, tmp_path):
        model = build_model(ClassifierSpec(3, 20, 2), seed=4)
        save_checkpoint(model, tmp_path / "m")
        blob = (tmp_path / "m.bin").read_bytes()
        (tmp_path / "m.bin").write_bytes(blob[:-8])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(tmp_path / "m")

    def test_version_mismatch_detected(self, tmp_path):
        model = build_model(ClassifierSpec(3, 20, 2), seed=4)
        save_checkpoint(model, tmp_path / "m")
        manifest = (tmp_path / "m.json").read_text().replace('"format_version": 1', '"format_version": 2')
        (tmp_path / "m.json").write_text(manifest)
        with pytest.raises(CheckpointError, match="version mismatch"):
            load_checkpoint(tmp_path / "m")

    def test_shape_manifest_disagreement_detected(self, tmp_path):
        import json

        model = build_model(ClassifierSpec(3, 20, 2), seed=4)
        save_checkpoint(model, tmp_path / "m")
        manifest = json.loads((tmp_path / "m.json").read_text())
        manifest["tensors"][0]["shape"][0] += 1
        total = sum(t["byte_length"] for t in manifest["tensors"])
        (tmp_path / "m.json").write_text(json.dumps(manifest))
        pad = (tmp_path / "m.bin").read_bytes()
        (tmp_path / "m.bin").write_bytes(pad.ljust(total, b"\0"))
        with pytest.raises(CheckpointError, match="disagreement"):
            load_checkpoint(tmp_path / "m")

    def test_wrong_kind_detected(self, tmp_path):
        save_checkpoint(build_model(ClassifierSpec(3, 20, 2), seed=4), tmp_path / "clf")
        with pytest.raises(CheckpointError, match="expected a autoencoder"):
            load_checkpoint(tmp_path / "clf", expect="autoencoder")

    def test_forward_bit_identical_after_save_load(self, tmp_path, rng):
        # quantise once, then saved and reloaded forwards agree bit-for-bit
        model = load_checkpoint_roundtrip(tmp_path, build_model(AutoEncoderSpec(2, 12), seed=5))
        x = rng.normal(size=(3, 2, 12))
        first = reconstruct(model, x)
        second = reconstruct(load_checkpoint_roundtrip(tmp_path, model, stem="b"), x)
        np.testing.assert_array_equal(first, second)


def load_checkpoint_roundtrip(tmp_path, model, stem="a"):
    save_checkpoint(model, tmp_path / stem)
    return load_checkpoint(tmp_path / stem)
