import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import permute_hidden, random_model
from lwi.checkpoint import MAGIC, dump_text, dumps, load_checkpoint, load_text, loads, save_checkpoint
from lwi.errors import FormatError, InvalidInputError
from lwi.netcore import (
    LayerWeights,
    Model,
    TrainConfig,
    add_head,
    ce_loss,
    features,
    forward,
    init_model,
    kd_loss,
    log_softmax,
    loss_and_grads,
    softmax,
    train,
    train_step,
)

logit_rows = arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(2, 6)),
                    elements=st.floats(-30, 30, width=64))


def hand_model():
    l1 = LayerWeights([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [1.0, -1.0]], [0.0, 0.0, 0.0, 0.5])
    head = LayerWeights([[1.0, 1.0, 1.0, 1.0], [0.0, 2.0, 0.0, -1.0]], [0.5, 0.0])
    return Model([l1], [head])


def total_loss(model, x, y, task_id, teacher_logits, lam, temp):
    return loss_and_grads(model, x, y, task_id, teacher_logits, lam, temp)[0]["total"]


def finite_difference(model, x, y, task_id, teacher_logits, lam, temp, eps=1e-5):
    grads = []
    for i, p in enumerate(model.parameters()):
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            plus, minus = model.copy(), model.copy()
            plus.parameters()[i][idx] += eps
            minus.parameters()[i][idx] -= eps
            g[idx] = (total_loss(plus, x, y, task_id, teacher_logits, lam, temp)
                      - total_loss(minus, x, y, task_id, teacher_logits, lam, temp)) / (2 * eps)
        grads.append(g)
    return grads


class TestModel:
    def test_shapes_must_compose(self):
        with pytest.raises(InvalidInputError):
            Model([LayerWeights(np.ones((3, 2)), np.zeros(3)), LayerWeights(np.ones((2, 4)), np.zeros(2))])

    def test_head_width_must_match(self):
        with pytest.raises(InvalidInputError):
            Model([LayerWeights(np.ones((3, 2)), np.zeros(3))], [LayerWeights(np.ones((2, 4)), np.zeros(2))])

    def test_bias_length(self):
        with pytest.raises(InvalidInputError):
            LayerWeights(np.ones((3, 2)), np.zeros(2))

    def test_init_is_seeded(self):
        a = init_model(8, [16, 4], [2, 3], np.random.default_rng(7))
        b = init_model(8, [16, 4], [2, 3], np.random.default_rng(7))
        assert a.architecture() == {"widths": [8, 16, 4], "head_sizes": [2, 3]}
        for x, y in zip(a.parameters(), b.parameters()):
            np.testing.assert_array_equal(x, y)
        assert np.abs(a.feature_layers[0].weight).max() <= 1 / np.sqrt(8)

    def test_add_head_copies(self, rng):
        a = init_model(4, [5], [2], rng)
        b = add_head(a, 3, rng)
        assert a.head_sizes == [2] and b.head_sizes == [2, 3]


class TestForward:
    def test_zero_model(self):
        z = Model([LayerWeights(np.zeros((3, 2)), np.zeros(3))], [LayerWeights(np.zeros((2, 3)), np.zeros(2))])
        np.testing.assert_array_equal(forward(z, np.ones((4, 2))), np.zeros((4, 2)))

    def test_identity_head_only(self, rng):
        m = Model([], [LayerWeights(np.eye(3), np.zeros(3))])
        x = rng.normal(size=(5, 3))
        np.testing.assert_array_equal(forward(m, x), x)

    def test_hand_computed(self):
        # hidden pre-activation (1, -1, 0, 2.5) -> ReLU (1, 0, 0, 2.5)
        logits, acts = forward(hand_model(), [[1.0, -1.0]], return_activations=True)
        np.testing.assert_allclose(acts[0], [[1.0, 0.0, 0.0, 2.5]])
        np.testing.assert_allclose(logits, [[4.0, -2.5]])

    def test_head_selection_concatenates_in_order(self, rng):
        m = random_model(rng, [3, 4], head_sizes=(2, 3, 1))
        x = rng.normal(size=(6, 3))
        full = forward(m, x)
        assert full.shape == (6, 6)
        np.testing.assert_array_equal(forward(m, x, heads=1), full[:, 2:5])
        np.testing.assert_array_equal(forward(m, x, heads=[2, 0]), np.hstack([full[:, 5:], full[:, :2]]))

    def test_errors(self, rng):
        m = random_model(rng, [3, 4], head_sizes=(2,))
        with pytest.raises(InvalidInputError):
            forward(m, np.ones((2, 5)))
        with pytest.raises(InvalidInputError):
            forward(m, np.ones((2, 3)), heads=1)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_permutation_symmetry(self, seed):
        rng = np.random.default_rng(seed)
        m = random_model(rng, [4, 6, 5], head_sizes=(2, 3))
        x = rng.normal(size=(20, 4))
        for layer in (0, 1):
            p = permute_hidden(m, layer, rng.permutation(m.feature_layers[layer].shape[0]))
            np.testing.assert_allclose(forward(p, x), forward(m, x), atol=1e-6)


class TestLosses:
    def test_ce_uniform(self):
        assert ce_loss(np.zeros((3, 4)), [0, 1, 3]) == pytest.approx(np.log(4), abs=1e-12)
        assert ce_loss(np.zeros((1, 4)), [2]) == pytest.approx(1.38629, abs=1e-5)

    def test_ce_saturated(self):
        z = np.zeros((2, 3))
        z[[0, 1], [1, 2]] = 20.0
        assert ce_loss(z, [1, 2]) < 1e-8

    def test_ce_hand_value(self):
        assert ce_loss([[1.0, 0.0]], [0]) == pytest.approx(0.31326, abs=1e-5)
        assert ce_loss([[1.0, 0.0]], [0]) == pytest.approx(np.log1p(np.exp(-1.0)), abs=1e-15)

    def test_ce_label_out_of_range(self):
        with pytest.raises(InvalidInputError):
            ce_loss(np.zeros((1, 2)), [2])

    def test_kd_identity(self, rng):
        z = rng.normal(size=(5, 3))
        assert kd_loss(z, z, 2.0) == pytest.approx(0.0, abs=1e-15)

    def test_kd_hand_value(self):
        # Teacher one-hot via an extreme logit gap, student uniform.
        assert kd_loss([[0.0, 0.0]], [[800.0, 0.0]], 1.0) == pytest.approx(np.log(2), abs=1e-12)

    def test_kd_width_mismatch(self):
        with pytest.raises(InvalidInputError):
            kd_loss(np.zeros((1, 2)), np.zeros((1, 3)))

    @settings(max_examples=100, deadline=None)
    @given(logit_rows, st.floats(0.5, 5.0))
    def test_kl_is_cross_entropy_minus_entropy(self, teacher, temp):
        student = np.roll(teacher, 1, axis=1) * 0.7 + 1.0
        p = softmax(teacher, temp)
        cross = -np.sum(p * log_softmax(student, temp), axis=1).mean()
        ent = -np.sum(np.where(p > 0, p * log_softmax(teacher, temp), 0.0), axis=1).mean()
        assert kd_loss(student, teacher, temp) == pytest.approx(cross - ent, abs=1e-8)

    @settings(max_examples=100, deadline=None)
    @given(logit_rows, logit_rows)
    def test_softmax_normalised_and_kd_nonnegative(self, a, b):
        np.testing.assert_allclose(softmax(a).sum(axis=1), 1.0, atol=1e-9)
        if a.shape == b.shape:
            assert kd_loss(a, b, 2.0) >= -1e-12


class TestGradients:
    @pytest.mark.parametrize("seed", range(5))
    def test_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        model = random_model(rng, [2, 4], head_sizes=(2, 2), scale=0.8)
        x = rng.normal(size=(6, 2))
        y = rng.integers(0, 2, size=6)
        teacher = [rng.normal(size=(6, 2))]
        _, grads = loss_and_grads(model, x, y, 1, teacher, 1.0, 2.0)
        fd = finite_difference(model, x, y, 1, teacher, 1.0, 2.0)
        for g, f in zip(grads.parameters(), fd):
            np.testing.assert_allclose(g, f, rtol=1e-4, atol=1e-8)

    def test_kd_uses_only_old_heads(self, rng):
        model = random_model(rng, [3, 4], head_sizes=(2, 2, 2))
        x = rng.normal(size=(5, 3))
        y = rng.integers(0, 2, size=5)
        teacher = [rng.normal(size=(5, 2)), rng.normal(size=(5, 2))]
        losses, _ = loss_and_grads(model, x, y, 2, teacher, 0.5, 2.0)
        h = features(model, x)[-1]
        kd = np.mean([kd_loss(h @ model.heads[j].weight.T + model.heads[j].bias, teacher[j], 2.0) for j in (0, 1)])
        ce = ce_loss(h @ model.heads[2].weight.T + model.heads[2].bias, y)
        assert losses["kd"] == pytest.approx(kd, abs=1e-12)
        assert losses["total"] == pytest.approx(ce + 0.5 * kd, abs=1e-12)


class TestTraining:
    def setup_method(self):
        rng = np.random.default_rng(3)
        self.x = rng.normal(size=(40, 3))
        self.y = (self.x[:, 0] > 0).astype(int)
        self.student = random_model(rng, [3, 5], head_sizes=(2, 2), scale=0.5)
        self.teacher = random_model(rng, [3, 5], head_sizes=(2,), scale=0.5)

    def test_lambda_zero_is_plain_cross_entropy(self):
        cfg0 = TrainConfig(lambda_kd=0.0)
        ce_cfg = TrainConfig(kd_mode="none")
        a, _, la = train_step(self.student, self.x, self.y, 1, cfg0, self.teacher)
        b, _, lb = train_step(self.student, self.x, self.y, 1, ce_cfg)
        assert la["total"] == pytest.approx(lb["total"], abs=1e-12)
        for p, q in zip(a.parameters(), b.parameters()):
            np.testing.assert_allclose(p, q, atol=1e-12)

    def test_zero_lr_leaves_model_unchanged(self):
        out, _, _ = train_step(self.student, self.x, self.y, 1, TrainConfig(lr=0.0), self.teacher)
        for p, q in zip(out.parameters(), self.student.parameters()):
            assert np.array_equal(p, q)

    def test_step_does_not_mutate_input(self):
        before = self.student.copy()
        train_step(self.student, self.x, self.y, 1, TrainConfig(), self.teacher)
        for p, q in zip(before.parameters(), self.student.parameters()):
            assert np.array_equal(p, q)

    def test_momentum_update(self):
        cfg = TrainConfig(lr=0.1, momentum=0.5, kd_mode="none")
        _, grads = loss_and_grads(self.student, self.x, self.y, 1)
        m1, v1, _ = train_step(self.student, self.x, self.y, 1, cfg)
        for p, p0, g in zip(m1.parameters(), self.student.parameters(), grads.parameters()):
            np.testing.assert_allclose(p, p0 - 0.1 * g, atol=1e-15)
        _, grads2 = loss_and_grads(m1, self.x, self.y, 1)
        m2, _, _ = train_step(m1, self.x, self.y, 1, cfg, velocity=v1)
        for p, p1, g1, g2 in zip(m2.parameters(), m1.parameters(), grads.parameters(), grads2.parameters()):
            np.testing.assert_allclose(p, p1 - 0.1 * (0.5 * g1 + g2), atol=1e-15)

    def test_teacher_mismatch(self):
        bad = random_model(np.random.default_rng(0), [3, 6], head_sizes=(2,))
        with pytest.raises(InvalidInputError):
            train_step(self.student, self.x, self.y, 1, TrainConfig(), bad)

    def test_training_is_deterministic_and_learns(self):
        cfg = TrainConfig(epochs=15, batch_size=8, lr=0.1, lr_decay_epochs=(10,))
        a, ha = train(self.student, self.x, self.y, 1, cfg, np.random.default_rng(5), self.teacher)
        b, hb = train(self.student, self.x, self.y, 1, cfg, np.random.default_rng(5), self.teacher)
        assert ha == hb
        for p, q in zip(a.parameters(), b.parameters()):
            assert np.array_equal(p, q)
        assert ha[-1]["ce"] < ha[0]["ce"]

    def test_divergence_is_reported(self):
        # Logits overflow to inf, so the loss turns NaN on the first batch.
        linear = Model([], [LayerWeights(np.full((2, 3), 1e308), np.zeros(2))])
        with pytest.raises(FloatingPointError, match="diverged"):
            with np.errstate(all="ignore"):
                train(linear, self.x, self.y, 0, TrainConfig(epochs=2), np.random.default_rng(0))

    def test_lr_schedule(self):
        cfg = TrainConfig(lr=0.1, lr_decay_epochs=(80, 120), lr_decay_factor=0.1)
        assert [cfg.lr_at(e) for e in (0, 79, 80, 119, 120)] == pytest.approx([0.1, 0.1, 0.01, 0.01, 0.001])

    @pytest.mark.parametrize("kw", [{"epochs": 0}, {"batch_size": 0}, {"momentum": 1.0},
                                    {"lr_decay_factor": 0.0}, {"kd_mode": "layer"}])
    def test_config_validation(self, kw):
        with pytest.raises(InvalidInputError):
            TrainConfig(**kw)


class TestCheckpoint:
    def test_round_trip_is_bit_exact(self, tmp_path, rng):
        m = random_model(rng, [5, 7, 3], head_sizes=(2, 4))
        path = tmp_path / "m.lwi"
        save_checkpoint(m, path)
        out = load_checkpoint(path)
        assert out.head_sizes == [2, 4]
        for p, q in zip(m.parameters(), out.parameters()):
            assert np.array_equal(p, q)

    def test_header_layout(self, rng):
        m = random_model(rng, [2, 3], head_sizes=(2,))
        buf = dumps(m)
        assert buf[:4] == MAGIC
        assert struct.unpack("<III", buf[4:16]) == (1, 1, 3)
        assert len(buf) == 4 + 4 + 4 + (8 + 8 * 6 + 8 * 3) + 4 + (8 + 8 * 6 + 8 * 2)

    def test_wrong_magic(self, rng):
        buf = b"XXXX" + dumps(random_model(rng, [2, 3]))[4:]
        with pytest.raises(FormatError, match="LWI1") as err:
            loads(buf)
        assert err.value.offset == 0

    def test_wrong_version(self, rng):
        buf = bytearray(dumps(random_model(rng, [2, 3])))
        buf[4:8] = struct.pack("<I", 9)
        with pytest.raises(FormatError, match="version") as err:
            loads(bytes(buf))
        assert err.value.offset == 4

    def test_truncation_reports_offset(self, rng):
        buf = dumps(random_model(rng, [2, 3]))
        with pytest.raises(FormatError) as err:
            loads(buf[:30])
        assert err.value.offset == 20
        assert "offset 20" in str(err.value)

    def test_trailing_bytes(self, rng):
        with pytest.raises(FormatError):
            loads(dumps(random_model(rng, [2, 3])) + b"\0")

    def test_text_dump_mirrors_binary(self, rng):
        m = random_model(rng, [3, 4], head_sizes=(2, 2))
        text = dump_text(m)
        doc = json.loads(text)
        assert doc["magic"] == "LWI1" and doc["architecture"]["head_sizes"] == [2, 2]
        out = load_text(text)
        for p, q in zip(m.parameters(), out.parameters()):
            assert np.array_equal(p, q)
