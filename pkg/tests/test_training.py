import math

import numpy as np
import pytest

from bidisum.checkpoint import load_checkpoint
from bidisum.data import Example, collate, gen_synthetic
from bidisum.model import ModelConfig, init_params
from bidisum.numerics import NumericalError, Tape, Tensor
from bidisum.training import (
    LOG_HEADER,
    AdagradState,
    TrainConfig,
    TrainingDiverged,
    adagrad_step,
    batch_loss,
    evaluate_loss,
    token_accuracy,
    train,
)

CFG = ModelConfig(vocab_size=12, embedding_dim=6, hidden_dim=7, max_source_len=10, max_target_len=10)


def toy_batch(seed=0, n=4):
    return collate(gen_synthetic("copy", n, (2, 6), CFG.vocab_size, seed))


def zero_params():
    p = init_params(CFG)
    for _, t in p.named_tensors():
        t.data = np.zeros_like(t.data)
    return p


class TestTrainConfig:
    def test_defaults(self):
        tc = TrainConfig()
        assert (tc.gamma, tc.learning_rate, tc.initial_accumulator) == (0.7, 0.15, 0.1)
        assert (tc.max_grad_norm, tc.batch_size) == (2.0, 32)

    @pytest.mark.parametrize("bad", [dict(gamma=1.5), dict(gamma=-0.1), dict(learning_rate=0),
                                     dict(initial_accumulator=0), dict(batch_size=0)])
    def test_rejects_invalid(self, bad):
        with pytest.raises(ValueError):
            TrainConfig(**bad)

    def test_from_string_dict(self):
        tc = TrainConfig.from_dict({"gamma": "0.5", "batch_size": "8", "max_epochs": "None"})
        assert (tc.gamma, tc.batch_size, tc.max_epochs) == (0.5, 8, None)


class TestBatchLoss:
    @pytest.mark.parametrize("gamma", [0.0, 0.3, 0.5, 0.7, 1.0])
    def test_identity(self, gamma):
        loss, lf, lb = batch_loss(toy_batch(), init_params(CFG, seed=1, scale=0.5), CFG, gamma)
        assert loss.item() == gamma * lf.item() + (1.0 - gamma) * lb.item()

    def test_extremes_are_pure_directions(self):
        params = init_params(CFG, seed=2, scale=0.5)
        batch = toy_batch(1)
        loss, lf, _ = batch_loss(batch, params, CFG, 1.0)
        assert loss.item() == lf.item()
        loss, _, lb = batch_loss(batch, params, CFG, 0.0)
        assert loss.item() == lb.item()

    def test_uniform_model(self):
        batch = collate([Example([4, 5, 6], [7, 8, 9, 10])])
        _, lf, lb = batch_loss(batch, zero_params(), CFG, 0.7)
        assert lf.item() == pytest.approx(math.log(12), rel=1e-14)
        assert lb.item() == pytest.approx(math.log(12), rel=1e-14)

    def test_padding_does_not_change_loss(self):
        params = init_params(CFG, seed=3, scale=0.5)
        short, long_ = Example([4, 5], [6, 7]), Example([4, 5, 6, 7, 8], [9, 10, 11, 4, 5])
        alone = batch_loss(collate([short]), params, CFG, 0.7)[0].item()
        both = batch_loss(collate([short, long_]), params, CFG, 0.7)[0].item()
        other = batch_loss(collate([long_]), params, CFG, 0.7)[0].item()
        assert both == pytest.approx((alone + other) / 2, rel=1e-12)

    def test_gamma_one_gives_backward_decoder_zero_gradient(self):
        params = init_params(CFG, seed=4, scale=0.5)
        with Tape() as tape:
            loss, _, _ = batch_loss(toy_batch(), params, CFG, 1.0)
        tape.backward(loss)
        for name, t in params.named_tensors():
            if name.startswith(("dec_bwd", "attn_bwd", "out_bwd")):
                assert not np.any(t.grad), name


class TestAdagrad:
    def test_closed_form_scalar(self):
        theta = {"w": Tensor(np.array([0.0]))}
        state = AdagradState({"w": np.array([0.1])})
        adagrad_step(theta, {"w": np.array([1.0])}, state, 0.15)
        assert state.accumulators["w"][0] == pytest.approx(1.1)
        assert theta["w"].data[0] == pytest.approx(-0.15 / math.sqrt(1.1), rel=1e-15)
        assert theta["w"].data[0] == pytest.approx(-0.143019, abs=1e-6)

    def test_zero_gradient_changes_nothing(self):
        params = init_params(CFG, seed=5)
        before = {n: t.data.copy() for n, t in params.named_tensors()}
        state = AdagradState.create(params, 0.1)
        adagrad_step(params, {n: np.zeros_like(t.data) for n, t in params.named_tensors()}, state, 0.15)
        for n, t in params.named_tensors():
            np.testing.assert_array_equal(t.data, before[n])
            np.testing.assert_array_equal(state.accumulators[n], np.full(t.shape, 0.1))

    def test_repeated_gradient_shrinks_step(self):
        theta = {"w": Tensor(np.array([1.0, -2.0]))}
        state = AdagradState({"w": np.full(2, 0.1)})
        g = np.array([0.5, -0.3])
        steps = []
        for _ in range(2):
            before = theta["w"].data.copy()
            adagrad_step(theta, {"w": g}, state, 0.15)
            steps.append(np.abs(theta["w"].data - before))
        assert np.all(steps[1] < steps[0])

    def test_non_finite_update_names_parameter_and_leaves_state(self):
        theta = {"good": Tensor(np.ones(2)), "bad": Tensor(np.ones(2))}
        state = AdagradState({"good": np.full(2, 0.1), "bad": np.full(2, 0.1)})
        with pytest.raises(NumericalError, match="bad"):
            adagrad_step(theta, {"good": np.ones(2), "bad": np.array([np.nan, 1.0])}, state, 0.15)
        np.testing.assert_array_equal(theta["good"].data, np.ones(2))
        np.testing.assert_array_equal(state.accumulators["good"], np.full(2, 0.1))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            adagrad_step({"w": Tensor(np.ones(2))}, {"w": np.ones(3)}, AdagradState({"w": np.ones(2)}), 0.1)


def small_run(tmp_path=None, **overrides):
    train_data = gen_synthetic("copy", 40, (2, 5), CFG.vocab_size, seed=1)
    val_data = gen_synthetic("copy", 10, (2, 5), CFG.vocab_size, seed=2)
    kwargs = dict(batch_size=8, eval_every_steps=5, patience_evals=3, max_steps=30, seed=0)
    kwargs.update(overrides)
    return train(CFG, TrainConfig(**kwargs), train_data, val_data, tmp_path)


class TestTrain:
    def test_log_and_checkpoint(self, tmp_path):
        result = small_run(tmp_path)
        lines = (tmp_path / "train.log").read_text().splitlines()
        assert lines[0] + "\n" == LOG_HEADER
        assert len(lines) - 1 == len(result.log)
        params, config = load_checkpoint(tmp_path / "best.ckpt")
        assert config == CFG
        for (_, a), (_, b) in zip(params.named_tensors(), result.params.named_tensors()):
            np.testing.assert_array_equal(a.data, b.data)

    def test_clipped_norm_bound(self):
        result = small_run(max_grad_norm=0.05)
        for rec in result.log:
            if rec.split == "train":
                assert rec.clipped_norm <= 0.05 + 1e-12

    def test_accumulators_nondecreasing(self, monkeypatch):
        import bidisum.training as tr

        snapshots = []
        real = tr.adagrad_step

        def spy(params, grads, state, lr):
            real(params, grads, state, lr)
            snapshots.append({k: v.copy() for k, v in state.accumulators.items()})

        monkeypatch.setattr(tr, "adagrad_step", spy)
        small_run(max_steps=10)
        for prev, cur in zip(snapshots, snapshots[1:]):
            for k in cur:
                assert np.all(cur[k] >= prev[k])
        assert all(np.all(v >= 0.1) for v in snapshots[-1].values())

    @pytest.mark.parametrize("patience, evals_run", [(0, 3), (1, 4), (2, 8)])
    def test_patience(self, monkeypatch, patience, evals_run):
        import bidisum.training as tr

        losses = iter([3.0, 2.0, 2.5, 2.2, 1.9, 2.1, 2.0, 2.0, 2.0, 2.0])
        monkeypatch.setattr(tr, "evaluate_loss", lambda *a, **k: (next(losses),) * 3)
        result = small_run(patience_evals=patience, eval_every_steps=1, max_steps=50)
        assert result.stop_reason == "early_stopping"
        assert len(result.evals) == evals_run

    def test_seeded_runs_are_identical(self, tmp_path):
        small_run(tmp_path / "a")
        small_run(tmp_path / "b")
        for name in ("best.ckpt", "train.log"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_gamma_one_ignores_backward_decoder(self):
        train_data = gen_synthetic("copy", 24, (2, 5), CFG.vocab_size, seed=3)
        val_data = gen_synthetic("copy", 6, (2, 5), CFG.vocab_size, seed=4)
        tc = TrainConfig(gamma=1.0, batch_size=8, eval_every_steps=3, max_steps=6)
        a = init_params(CFG, seed=0)
        b = a.clone()
        b.dec_bwd.input_weights.data = b.dec_bwd.input_weights.data * 3.0
        b.out_bwd.bias.data = b.out_bwd.bias.data + 1.0
        ra = train(CFG, tc, train_data, val_data, params=a)
        rb = train(CFG, tc, train_data, val_data, params=b)
        assert [r.l_fwd for r in ra.log] == [r.l_fwd for r in rb.log]
        for (name, x), (_, y) in zip(a.named_tensors(), b.named_tensors()):
            if not name.startswith(("dec_bwd", "attn_bwd", "out_bwd")):
                np.testing.assert_array_equal(x.data, y.data)

    def test_divergence_is_reported(self, tmp_path):
        params = init_params(CFG, seed=0)
        params.out_fwd.bias.data[:] = np.inf
        with pytest.raises(TrainingDiverged) as info:
            train(CFG, TrainConfig(batch_size=8, max_steps=3), gen_synthetic("copy", 8, (2, 4), 12, 0),
                  gen_synthetic("copy", 4, (2, 4), 12, 1), tmp_path, params=params)
        assert info.value.result.best_step == 0

    def test_empty_data_rejected(self):
        with pytest.raises(ValueError):
            train(CFG, TrainConfig(), [], gen_synthetic("copy", 2, (2, 3), 12, 0))


class TestMetrics:
    def test_evaluate_loss_is_example_weighted(self):
        params = init_params(CFG, seed=6, scale=0.5)
        data = gen_synthetic("copy", 5, (2, 6), CFG.vocab_size, seed=7)
        loss, lf, lb = evaluate_loss(data, params, CFG, 0.7, batch_size=2)
        singles = [batch_loss(collate([e]), params, CFG, 0.7)[0].item() for e in data]
        assert loss == pytest.approx(sum(singles) / 5, rel=1e-12)

    def test_token_accuracy_uniform_model_picks_lowest_id(self):
        data = [Example([5, 6], [0, 7])]
        assert token_accuracy(data, zero_params(), CFG) == 0.5
