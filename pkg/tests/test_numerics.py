import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bidisum.numerics import (
    NumericalError,
    Tape,
    Tensor,
    add,
    backward,
    clip_global_norm,
    concat,
    gather_rows,
    global_norm,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    reshape,
    row_stable,
    sigmoid,
    slice_,
    softmax,
    sub,
    sum_,
    tanh,
    transpose,
)


def leaf(data):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    out = np.zeros_like(x)
    flat, g = x.reshape(-1), out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        g[i] = (up - down) / (2 * h)
    return out


def rel_err(a, n):
    return np.abs(a - n).max() / max(np.abs(a).max(), np.abs(n).max(), 1e-300)


class TestMatmul:
    def test_identity(self):
        out = matmul(Tensor(np.eye(2)), Tensor([[1.0, 2.0], [3.0, 4.0]]))
        np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])

    def test_hand_product(self):
        out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0], [6.0]]))
        np.testing.assert_array_equal(out.data, [[17], [39]])

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="dimension mismatch"):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))

    def test_batched_left_operand(self):
        a = np.arange(24.0).reshape(2, 3, 4)
        b = np.arange(8.0).reshape(4, 2)
        np.testing.assert_array_equal(matmul(Tensor(a), Tensor(b)).data, a @ b)


class TestRowStable:
    def test_rows_independent_of_batch(self):
        rng = np.random.default_rng(0)
        w, x = Tensor(rng.normal(size=(64, 200))), Tensor(rng.normal(size=(8, 64)))
        with row_stable():
            full = matmul(x, w).data
            for i in range(8):
                np.testing.assert_array_equal(matmul(Tensor(x.data[i:i + 1]), w).data[0], full[i])
        np.testing.assert_allclose(full, x.data @ w.data, rtol=1e-12)

    def test_mode_is_scoped(self):
        from bidisum.numerics import _ROW_STABLE

        with row_stable():
            assert _ROW_STABLE.get()
        assert not _ROW_STABLE.get()

    def test_gradients_unchanged(self):
        a, b = leaf([[1.0, 2.0]]), leaf([[3.0], [4.0]])
        with Tape() as tape, row_stable():
            loss = sum_(matmul(a, b))
        tape.backward(loss)
        np.testing.assert_array_equal(a.grad, [[3.0, 4.0]])
        np.testing.assert_array_equal(b.grad, [[1.0], [2.0]])


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, rtol=0, atol=1e-15)

    def test_closed_form(self):
        np.testing.assert_allclose(softmax(Tensor([0.0, math.log(3.0)])).data, [0.25, 0.75], atol=1e-15)

    def test_large_inputs_stay_finite(self):
        out = log_softmax(Tensor([1000.0, 0.0, -1000.0]))
        assert np.all(np.isfinite(out.data))
        assert out.data[0] == pytest.approx(0.0, abs=1e-12)

    def test_rejects_non_finite(self):
        with pytest.raises(NumericalError):
            softmax(Tensor([0.0, np.nan]))

    @settings(max_examples=1000, deadline=None)
    @given(
        arrays(np.float64, st.integers(1, 64), elements=st.floats(-50, 50)),
        st.floats(-100, 100),
    )
    def test_sums_to_one_and_shift_invariant(self, v, c):
        p = softmax(Tensor(v)).data
        assert abs(math.fsum(p.tolist()) - 1.0) <= 1e-12
        assert np.all(p >= 0)
        np.testing.assert_allclose(softmax(Tensor(v + c)).data, p, rtol=1e-9, atol=1e-15)

    @settings(max_examples=200, deadline=None)
    @given(arrays(np.float64, st.integers(1, 32), elements=st.floats(-30, 30)))
    def test_log_softmax_matches_log_of_softmax(self, v):
        np.testing.assert_allclose(log_softmax(Tensor(v)).data, np.log(softmax(Tensor(v)).data),
                                   rtol=1e-12, atol=1e-12)


class TestBackward:
    def test_sum_gives_ones(self):
        x = leaf(np.random.default_rng(0).normal(size=(3, 4)))
        with Tape() as tape:
            loss = sum_(x)
        backward(tape, loss)
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_dot_product(self):
        x, y = leaf([1.0, 2.0]), leaf([3.0, 4.0])
        with Tape() as tape:
            loss = sum_(mul(x, y))
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, [3.0, 4.0])
        np.testing.assert_array_equal(y.grad, [1.0, 2.0])

    def test_two_layer_tanh_net(self):
        rng = np.random.default_rng(1)
        w1, w2 = leaf(rng.normal(size=(4, 5))), leaf(rng.normal(size=(5, 1)))
        x = Tensor(rng.normal(size=(3, 4)))

        def forward():
            return sum_(matmul(tanh(matmul(x, w1)), w2))

        with Tape() as tape:
            loss = forward()
        tape.backward(loss)
        for w in (w1, w2):
            num = numeric_grad(lambda: forward().item(), w.data)
            assert rel_err(w.grad, num) < 1e-6

    def test_composite_of_every_primitive(self):
        rng = np.random.default_rng(2)
        table = leaf(rng.normal(size=(6, 3)))
        w = leaf(rng.normal(size=(3, 4)))
        b = leaf(rng.normal(size=(4,)))
        ids = np.array([[1, 4], [0, 5]])

        def forward():
            e = gather_rows(table, ids)  # [2, 2, 3]
            h = add(matmul(e, w), b)  # [2, 2, 4]
            z = concat([tanh(h), sigmoid(h)], axis=-1)
            first = slice_(z, (slice(None), 0))
            flat = reshape(transpose(first), (16,))
            p = softmax(flat)
            lp = log_softmax(sub(flat, 0.5))
            return add(mean(mul(lp, p)), sum_(log(add(p, 1.0))))

        with Tape() as tape:
            loss = forward()
        tape.backward(loss)
        for t in (table, w, b):
            num = numeric_grad(lambda: forward().item(), t.data)
            assert rel_err(t.grad, num) < 1e-6

    def test_replay_is_bit_identical(self):
        rng = np.random.default_rng(3)
        w = leaf(rng.normal(size=(4, 4)))
        x = Tensor(rng.normal(size=(2, 4)))
        with Tape() as tape:
            loss = sum_(tanh(matmul(x, w)))
        tape.backward(loss)
        first = w.grad.copy()
        tape.backward(loss)
        np.testing.assert_array_equal(first, w.grad)

    def test_broadcast_gradient_is_reduced(self):
        b = leaf([1.0, 2.0, 3.0])
        x = Tensor(np.ones((4, 3)))
        with Tape() as tape:
            loss = sum_(add(x, b))
        tape.backward(loss)
        np.testing.assert_array_equal(b.grad, [4.0, 4.0, 4.0])

    def test_unused_leaf_gets_zero_grad(self):
        used, unused = leaf([1.0]), leaf([2.0, 3.0])
        with Tape() as tape:
            loss = sum_(mul(used, 2.0))
            mul(unused, 1.0)
        tape.backward(loss)
        np.testing.assert_array_equal(unused.grad, [0.0, 0.0])

    def test_non_scalar_loss_rejected(self):
        x = leaf([1.0, 2.0])
        with Tape() as tape:
            y = mul(x, 2.0)
        with pytest.raises(ValueError):
            tape.backward(y)

    def test_records_are_topological(self):
        x = leaf([0.5, -0.5])
        with Tape() as tape:
            loss = sum_(tanh(mul(x, x)))
        produced = set()
        for rec in tape.records:
            for inp in rec.inputs:
                assert id(inp) in produced or inp in tape.leaves()
            produced.add(id(rec.out))
        assert len(tape) == 3
        tape.backward(loss)

    def test_constants_are_not_recorded(self):
        with Tape() as tape:
            mul(Tensor([1.0]), 3.0)
        assert len(tape) == 0


class TestLog:
    def test_rejects_non_positive(self):
        with pytest.raises(NumericalError):
            log(Tensor([1.0, 0.0]))


class TestGather:
    def test_out_of_range_id(self):
        with pytest.raises(IndexError, match="out of range"):
            gather_rows(Tensor(np.zeros((3, 2))), [0, 3])

    def test_repeated_ids_accumulate(self):
        table = leaf(np.zeros((3, 2)))
        with Tape() as tape:
            loss = sum_(gather_rows(table, [1, 1, 2]))
        tape.backward(loss)
        np.testing.assert_array_equal(table.grad, [[0, 0], [2, 2], [1, 1]])


class TestClipGlobalNorm:
    def test_below_threshold_unchanged(self):
        g = [np.array([0.6, 0.8])]
        out, norm = clip_global_norm(g, 2.0)
        assert norm == pytest.approx(1.0)
        np.testing.assert_array_equal(out[0], g[0])

    def test_scaled_to_max(self):
        out, norm = clip_global_norm([np.array([3.0, 4.0])], 2.0)
        assert norm == 5.0
        np.testing.assert_allclose(out[0], [1.2, 1.6], rtol=1e-15)

    def test_zero_grads(self):
        out, norm = clip_global_norm({"a": np.zeros(3)}, 2.0)
        assert norm == 0.0
        np.testing.assert_array_equal(out["a"], np.zeros(3))

    def test_non_finite_names_parameter(self):
        with pytest.raises(NumericalError, match="dec_w"):
            clip_global_norm({"ok": np.ones(2), "dec_w": np.array([np.inf])}, 2.0)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(arrays(np.float64, st.integers(1, 5), elements=st.floats(-1e3, 1e3)),
                    min_size=1, max_size=4),
           st.floats(0.01, 10.0))
    def test_norm_bound_and_direction(self, grads, max_norm):
        out, norm = clip_global_norm(grads, max_norm)
        assert global_norm(out) <= max_norm + 1e-12
        assert norm == pytest.approx(global_norm(grads))
        scale = min(1.0, max_norm / norm) if norm > 0 else 1.0
        for g, c in zip(grads, out):
            np.testing.assert_allclose(c, g * scale, rtol=1e-12, atol=0)
