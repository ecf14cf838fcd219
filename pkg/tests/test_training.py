import math
from collections import OrderedDict

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from erifusion import data, model, training
from erifusion import tensor as tc
from erifusion.errors import ConfigError, NumericalError


def single_weight_state(value=0.0):
    return training.TrainState.create(OrderedDict(w=tc.parameter([[value]])))


def textbook_adam(grads, lr, b1=0.9, b2=0.999, eps=1e-8, w0=0.0):
    w, m, v = w0, 0.0, 0.0
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    return w


class TestAdam:
    def test_zero_gradient(self):
        state = single_weight_state(0.7)
        training.adam_step(state, {"w": np.zeros((1, 1))}, training.TrainConfig(use_l2=False))
        assert state.params["w"].data[0, 0] == 0.7

    def test_first_step_is_minus_lr(self):
        state = single_weight_state()
        training.adam_step(state, {"w": np.ones((1, 1))}, training.TrainConfig(use_l2=False))
        assert state.params["w"].data[0, 0] == pytest.approx(-1e-4 / (1 + 1e-8), rel=1e-12)

    def test_matches_textbook_without_l2(self):
        rng = np.random.default_rng(0)
        grads = rng.standard_normal(25)
        state = single_weight_state(0.3)
        cfg = training.TrainConfig(lr=1e-3, use_l2=False)
        for g in grads:
            training.adam_step(state, {"w": np.array([[g]])}, cfg)
        assert abs(state.params["w"].data[0, 0] - textbook_adam(grads, 1e-3, w0=0.3)) < 1e-15

    def test_l2_adds_decay_to_gradient(self):
        cfg = training.TrainConfig(lr=1e-3, weight_decay=0.5)
        state = single_weight_state(2.0)
        training.adam_step(state, {"w": np.array([[-0.4]])}, cfg)
        # effective gradient -0.4 + 0.5*2 = 0.6 > 0, so the weight moves down
        assert state.params["w"].data[0, 0] == pytest.approx(2.0 - 1e-3 / (1 + 1e-8 / 0.6), rel=1e-12)

    def test_zero_lr_is_noop(self):
        state = single_weight_state(1.25)
        cfg = training.TrainConfig(lr=1e-4)
        object.__setattr__(cfg, "lr", 0.0)
        training.adam_step(state, {"w": np.array([[3.0]])}, cfg)
        assert state.params["w"].data[0, 0] == 1.25

    def test_non_finite_gradient(self):
        with pytest.raises(NumericalError):
            training.adam_step(single_weight_state(), {"w": np.array([[np.inf]])}, training.TrainConfig())


class TestClip:
    def test_scales_down(self):
        grads, norm, clipped = training.clip_gradients(OrderedDict(a=np.array([0.3, 0.4])), 0.1)
        np.testing.assert_allclose(grads["a"], [0.06, 0.08], atol=1e-15)
        assert norm == pytest.approx(0.5) and clipped

    def test_small_unchanged(self):
        g = OrderedDict(a=np.array([0.03, 0.04]))
        out, _, clipped = training.clip_gradients(g, 0.1)
        assert out["a"] is g["a"] and not clipped

    @settings(max_examples=100)
    @given(st.integers(0, 10_000), st.floats(1e-3, 1e3))
    def test_global_norm_bound(self, seed, spread):
        rng = np.random.default_rng(seed)
        g = OrderedDict((f"p{i}", spread * rng.standard_normal(rng.integers(1, 6, 2))) for i in range(4))
        before = {k: v.copy() for k, v in g.items()}
        out, norm, clipped = training.clip_gradients(g, 0.1)
        if clipped:
            assert training.global_norm(out) <= 0.1 + 1e-12
        else:
            assert all(np.array_equal(out[k], before[k]) for k in g)

    def test_only_l2(self):
        with pytest.raises(ConfigError):
            training.clip_gradients({}, 0.1, norm_type=1)


class TestEMA:
    def test_first_update(self):
        ema = {"w": np.zeros(1)}
        training.ema_update(ema, {"w": np.ones(1)}, 0.99)
        assert ema["w"][0] == pytest.approx(0.01, abs=1e-15)

    def test_geometric_convergence(self):
        ema, c, e0 = {"w": np.array([5.0])}, -1.5, 5.0
        for k in range(1, 101):
            training.ema_update(ema, {"w": np.array([c])}, 0.99)
            assert abs(abs(ema["w"][0] - c) - 0.99**k * abs(e0 - c)) < 1e-12

    def test_zero_decay_copies(self):
        ema = {"w": np.array([3.0, 4.0])}
        training.ema_update(ema, {"w": np.array([1.0, 2.0])}, 0.0)
        np.testing.assert_array_equal(ema["w"], [1.0, 2.0])


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(lr=0), dict(patience=0), dict(ema_decay=1.0), dict(clip_max_norm=0),
                                    dict(clip_norm_type=1), dict(beta=-1.0), dict(focal_gamma=6.0)])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            training.TrainConfig(**kw)

    def test_full_scale_values(self):
        cfg = training.TrainConfig.full_scale()
        assert (cfg.lr, cfg.batch_size, cfg.max_epochs, cfg.patience) == (1e-4, 256, 100, 15)
        assert (cfg.ema_decay, cfg.clip_max_norm, cfg.clip_norm_type) == (0.99, 0.1, 2)
        assert (cfg.alpha, cfg.beta) == (1.0, 0.01)
        assert training.TrainConfig().batch_size == 32

    def test_class_loss_toggle_zeroes_beta(self):
        assert training.TrainConfig(use_class_loss=False).loss_weights.beta == 0.0


TINY = dict(d=8, audio_in=6, visual_in=9, heads_modality=2, heads_interaction=4, T=4, proj_dim=8)


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    manifest = data.synth_generate(root, n=80, seed=5, noise=0.1, audio_dim=6, visual_dim=9,
                                   min_frames=2, max_frames=8)
    return data.load_split(manifest, "train", 4), data.load_split(manifest, "val", 4)


class TestBatchLoss:
    def test_class_loss_off_equals_alpha_reg(self, tiny_data):
        train_set, _ = tiny_data
        cfg = model.ModelConfig(**TINY)
        params = model.init_params(cfg)
        out = model.forward(train_set.audio, train_set.visual, params, cfg)
        tcfg = training.TrainConfig(alpha=0.7, use_class_loss=False)
        total, parts = training.batch_loss(out, train_set, cfg, tcfg)
        assert total.item() == 0.7 * parts["reg"]
        total.backward()
        # the class head only feeds the class term, so it receives no gradient
        assert np.all(params["head_cls.w"].grad == 0.0)
        assert np.any(params["head_reg.w"].grad != 0.0)


class TestTrainLoop:
    def test_patience_one_never_improving(self, tiny_data, monkeypatch):
        calls = []

        def flat_metric(*args, **kwargs):
            calls.append(1)
            return {"mode": "eri", "n": 1, "metric": 0.0, "mean_pearson": 0.0}

        monkeypatch.setattr(training, "evaluate", flat_metric)
        train_set, val_set = tiny_data
        result = training.train(train_set, val_set, model.ModelConfig(**TINY),
                                training.TrainConfig(patience=1, max_epochs=50))
        assert len(calls) == 2 and len(result.history) == 2 and result.best_epoch == 1

    def test_deterministic(self, tiny_data):
        train_set, val_set = tiny_data
        cfg, tcfg = model.ModelConfig(**TINY), training.TrainConfig(max_epochs=3, seed=11)
        a = training.train(train_set, val_set, cfg, tcfg)
        b = training.train(train_set, val_set, cfg, tcfg)
        assert a.history == b.history
        assert model.checkpoint_bytes(a.checkpoint) == model.checkpoint_bytes(b.checkpoint)

    def test_best_checkpoint_reproduces_metric(self, tiny_data):
        train_set, val_set = tiny_data
        cfg = model.ModelConfig(**TINY)
        result = training.train(train_set, val_set, cfg, training.TrainConfig(max_epochs=6, lr=1e-3))
        again = training.evaluate(val_set, result.checkpoint.eval_arrays(), cfg)["metric"]
        assert abs(again - result.best_metric) < 1e-12
        assert result.best_epoch <= len(result.history)

    def test_history_records(self, tiny_data):
        train_set, val_set = tiny_data
        result = training.train(train_set, val_set, model.ModelConfig(**TINY), training.TrainConfig(max_epochs=2))
        rec = result.history[0]
        assert set(rec["train_loss"]) == {"reg", "class", "total"}
        assert len(rec["val"]["per_class_pearson"]) == 7
        assert rec["clip_events"] >= 0

    def test_empty_split(self, tiny_data):
        train_set, val_set = tiny_data
        with pytest.raises(ConfigError):
            training.train(train_set.subset([]), val_set, model.ModelConfig(**TINY), training.TrainConfig())

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_loss_reports_coordinates(self, tiny_data):
        train_set, val_set = tiny_data
        bad = train_set.subset(np.arange(len(train_set)))
        bad.audio[0, 0, 0] = np.inf
        with pytest.raises(NumericalError, match="epoch 1, batch"):
            training.train(bad, val_set, model.ModelConfig(**TINY), training.TrainConfig(max_epochs=1))

    def test_expr_mode(self, tmp_path):
        manifest = data.synth_generate(tmp_path, n=60, seed=2, visual_dim=8, mode="expr",
                                       min_frames=2, max_frames=6)
        cfg = model.ModelConfig(**{**TINY, "visual_in": 8, "head_mode": "expr", "modality": "visual"})
        result = training.train(data.load_split(manifest, "train", 4), data.load_split(manifest, "val", 4),
                                cfg, training.TrainConfig(max_epochs=3, lr=1e-3))
        assert "focal" in result.history[0]["train_loss"]
        assert 0.0 <= result.best_metric <= 1.0
        assert len(result.history[0]["val"]["per_class_f1"]) == 8
