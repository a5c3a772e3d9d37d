import numpy as np
import pytest

from sensireg import nn
from sensireg.nn import (CheckpointError, Conv2D, Dense, Flatten, Model, Relu,
                         forward, init_parameters, load_model, predict_labels,
                         save_model)
from sensireg.tensor import Tensor, backward

from helpers import mlp_model


def small_mlp(seed=0, dtype=np.float32):
    rng = np.random.default_rng(seed)
    specs = [Dense(4, 8, "dense0"), Relu("relu0"), Dense(8, 3, "dense1")]
    return init_parameters(specs, input_shape=(4,), num_classes=3, rng=rng, dtype=dtype)


def small_cnn(seed=0):
    rng = np.random.default_rng(seed)
    specs = [Conv2D(1, 2, 2, 2, "conv0"), Relu("relu0"), Flatten("flat"),
             Dense(2 * 3 * 3, 2, "dense0")]
    return init_parameters(specs, input_shape=(1, 4, 4), num_classes=2, rng=rng)


class TestModelValidation:
    def test_duplicate_layer_ids_rejected(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError, match="unique"):
            specs = [Dense(2, 2, "a"), Relu("a")]
            init_parameters(specs, (2,), 2, rng)

    def test_reserved_logits_id_rejected(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError, match="reserved"):
            init_parameters([Dense(2, 2, "logits")], (2,), 2, rng)

    def test_non_composable_shapes_rejected(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError, match="expected input"):
            init_parameters([Dense(2, 3, "a"), Dense(4, 2, "b")], (2,), 2, rng)

    def test_final_width_must_match_num_classes(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError, match="logits"):
            init_parameters([Dense(2, 3, "a")], (2,), 2, rng)


class TestForwardRecording:
    def test_empty_record_has_only_logits(self):
        model = small_mlp()
        logits, rec = forward(model, np.zeros((2, 4), dtype=np.float32))
        assert rec.layer_ids() == [nn.LOGITS_ID]
        assert logits.shape == (2, 3)

    def test_single_dense_matches_matmul(self):
        rng = np.random.default_rng(1)
        model = init_parameters([Dense(3, 3, "only")], (3,), 3, rng)
        x = rng.normal(size=(5, 3)).astype(np.float32)
        logits, rec = forward(model, x, record={"only"})
        w = model.parameters["only.weight"].data
        b = model.parameters["only.bias"].data
        np.testing.assert_array_equal(logits.data, x @ w + b)
        np.testing.assert_array_equal(rec["only"].data, logits.data)

    def test_recording_does_not_change_logits(self):
        # paired execution oracle
        model = small_cnn()
        x = np.random.default_rng(2).uniform(0, 1, (3, 1, 4, 4)).astype(np.float32)
        plain, _ = forward(model, x)
        recorded, rec = forward(model, x, record={"conv0", "relu0", "flat"})
        np.testing.assert_array_equal(plain.data, recorded.data)
        assert set(rec.layer_ids()) == {"conv0", "relu0", "flat", nn.LOGITS_ID}

    def test_unknown_record_id_raises(self):
        model = small_mlp()
        with pytest.raises(ValueError, match="unknown layer ids"):
            forward(model, np.zeros((1, 4), dtype=np.float32), record={"nope"})

    def test_conv_activations_recorded_flat(self):
        model = small_cnn()
        x = np.zeros((5, 1, 4, 4), dtype=np.float32)
        _, rec = forward(model, x, record={"relu0"})
        assert rec["relu0"].shape == (5, 2 * 3 * 3)

    def test_recorded_tensors_are_differentiable(self):
        model = small_mlp()
        x = np.random.default_rng(3).normal(size=(2, 4)).astype(np.float32)
        _, rec = forward(model, x, record={"relu0"})
        grads = backward(rec["relu0"].sum())
        assert model.parameters["dense0.weight"] in grads

    def test_forward_is_pure(self):
        model = small_mlp()
        x = np.random.default_rng(4).normal(size=(2, 4)).astype(np.float32)
        a, _ = forward(model, x, record={"relu0"})
        b, _ = forward(model, x)
        c, _ = forward(model, x, record={"relu0"})
        np.testing.assert_array_equal(a.data, b.data)
        np.testing.assert_array_equal(a.data, c.data)

    def test_batch_shape_mismatch(self):
        model = small_mlp()
        with pytest.raises(ValueError, match="batch shape"):
            forward(model, np.zeros((2, 5), dtype=np.float32))


class TestPredictLabels:
    def test_argmax(self):
        model = small_mlp()
        logits = np.array([[0.1, 0.9]])
        assert np.argmax(logits, axis=1)[0] == 1  # sanity on the convention

        rng = np.random.default_rng(5)
        m = init_parameters([Dense(2, 2, "lin")], (2,), 2, rng)
        m.parameters["lin.weight"] = Tensor(np.eye(2, dtype=np.float32),
                                            requires_grad=True)
        m.parameters["lin.bias"] = Tensor(np.zeros(2, dtype=np.float32),
                                          requires_grad=True)
        labels = predict_labels(m, np.array([[0.1, 0.9]], dtype=np.float32))
        np.testing.assert_array_equal(labels, [1])

    def test_tie_breaks_to_lowest_index(self):
        rng = np.random.default_rng(6)
        m = init_parameters([Dense(2, 2, "lin")], (2,), 2, rng)
        m.parameters["lin.weight"] = Tensor(np.zeros((2, 2), dtype=np.float32),
                                            requires_grad=True)
        m.parameters["lin.bias"] = Tensor(np.array([0.5, 0.5], dtype=np.float32),
                                          requires_grad=True)
        labels = predict_labels(m, np.zeros((1, 2), dtype=np.float32))
        np.testing.assert_array_equal(labels, [0])

    def test_batch_of_three(self):
        model = small_mlp()
        labels = predict_labels(model, np.zeros((3, 4), dtype=np.float32))
        assert labels.shape == (3,)

    def test_argmax_invariant_under_positive_rescaling(self):
        model = small_mlp(seed=7)
        x = np.random.default_rng(8).normal(size=(16, 4)).astype(np.float32)
        before = predict_labels(model, x)
        scaled = nn.clone_model(model)
        for suffix in ("weight", "bias"):
            name = f"dense1.{suffix}"
            scaled.parameters[name] = Tensor(scaled.parameters[name].data * 7.5,
                                             requires_grad=True)
        np.testing.assert_array_equal(predict_labels(scaled, x), before)


class TestInitParameters:
    def test_biases_zero(self):
        model = small_mlp(seed=9)
        np.testing.assert_array_equal(model.parameters["dense0.bias"].data,
                                      np.zeros(8, dtype=np.float32))

    def test_same_seed_identical(self):
        a, b = small_mlp(seed=10), small_mlp(seed=10)
        for name in a.parameters:
            np.testing.assert_array_equal(a.parameters[name].data,
                                          b.parameters[name].data)

    def test_he_std_monte_carlo(self):
        # Monte Carlo oracle: empirical std within 10% of sqrt(2/fan_in)
        rng = np.random.default_rng(11)
        fan_in = 256
        model = init_parameters([Dense(fan_in, 40, "wide")], (fan_in,), 40, rng)
        draws = model.parameters["wide.weight"].data  # 10,240 draws
        assert draws.size >= 10_000
        expected = np.sqrt(2.0 / fan_in)
        assert abs(draws.std() - expected) / expected < 0.10


class TestPersistence:
    def test_round_trip_exact(self, tmp_path):
        model = small_cnn(seed=12)
        path = tmp_path / "model.sreg"
        save_model(model, path)
        loaded = load_model(path)
        assert loaded.layers == model.layers
        assert loaded.num_classes == model.num_classes
        assert loaded.input_shape == model.input_shape
        for name, t in model.parameters.items():
            np.testing.assert_array_equal(loaded.parameters[name].data, t.data)

    def test_loaded_logits_bit_identical(self, tmp_path):
        # paired execution oracle
        model = mlp_model([4, 6, 3], np.random.default_rng(13), dtype=np.float32)
        x = np.random.default_rng(14).uniform(0, 1, (5, 4)).astype(np.float32)
        before = nn.predict_logits(model, x)
        path = tmp_path / "m.sreg"
        save_model(model, path)
        after = nn.predict_logits(load_model(path), x)
        np.testing.assert_array_equal(before, after)

    def test_truncated_file(self, tmp_path):
        model = small_mlp(seed=15)
        path = tmp_path / "m.sreg"
        save_model(model, path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-10])
        with pytest.raises(CheckpointError, match="truncated"):
            load_model(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.sreg"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(CheckpointError, match="magic"):
            load_model(path)

    def test_version_mismatch(self, tmp_path):
        model = small_mlp(seed=16)
        path = tmp_path / "m.sreg"
        save_model(model, path)
        blob = bytearray(path.read_bytes())
        blob[4:8] = (99).to_bytes(4, "little")
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="version"):
            load_model(path)

    def test_trailing_garbage(self, tmp_path):
        model = small_mlp(seed=17)
        path = tmp_path / "m.sreg"
        save_model(model, path)
        path.write_bytes(path.read_bytes() + b"\x00\x00")
        with pytest.raises(CheckpointError, match="trailing"):
            load_model(path)
