import math

import numpy as np
import pytest

from retseg.errors import NonFiniteValue, OddSpatialDim, ShapeMismatch, SpatialMismatch
from retseg.tensor_nn import (
    AdamState,
    adam_step,
    concat_backward,
    concat_channels,
    conv2d,
    conv2d_backward,
    maxpool2,
    maxpool2_backward,
    relu,
    relu_backward,
    sigmoid,
    sigmoid_backward,
    soft_dice_loss,
    upconv2,
    upconv2_backward,
)


def conv_oracle(x, w, b):
    """Seven nested loops, zero padding k//2."""
    n, ci, h, wd = x.shape
    co, _, k, _ = w.shape
    p = k // 2
    out = np.zeros((n, co, h, wd))
    for ni in range(n):
        for oi in range(co):
            for y in range(h):
                for xx in range(wd):
                    s = float(b[oi])
                    for c in range(ci):
                        for i in range(k):
                            for j in range(k):
                                yy, xj = y + i - p, xx + j - p
                                if 0 <= yy < h and 0 <= xj < wd:
                                    s += float(x[ni, c, yy, xj]) * float(w[oi, c, i, j])
                    out[ni, oi, y, xx] = s
    return out


def upconv_oracle(x, w, b):
    """Direct stamp accumulation: each input pixel adds its weighted 2x2 patch."""
    n, ci, h, wd = x.shape
    co = w.shape[1]
    out = np.zeros((n, co, 2 * h, 2 * wd))
    for ni in range(n):
        for c in range(ci):
            for y in range(h):
                for xx in range(wd):
                    for o in range(co):
                        for a in range(2):
                            for bb in range(2):
                                out[ni, o, 2 * y + a, 2 * xx + bb] += (
                                    float(x[ni, c, y, xx]) * float(w[c, o, a, bb])
                                )
    return out + b[None, :, None, None]


class TestConv2d:
    def test_zero_kernel_gives_bias(self):
        x = np.random.default_rng(0).random((1, 1, 3, 3)).astype(np.float32)
        w = np.zeros((1, 1, 3, 3), dtype=np.float32)
        b = np.array([0.7], dtype=np.float32)
        np.testing.assert_allclose(conv2d(x, w, b), 0.7, atol=1e-7)

    def test_identity_kernel(self, rng):
        x = rng.random((2, 3, 4, 4)).astype(np.float32)
        w = np.zeros((3, 3, 3, 3), dtype=np.float32)
        for c in range(3):
            w[c, c, 1, 1] = 1.0
        np.testing.assert_allclose(conv2d(x, w, np.zeros(3, dtype=np.float32)), x, atol=1e-6)

    def test_matches_seven_loop_oracle(self, rng):
        x = rng.normal(size=(2, 3, 5, 5)).astype(np.float32)
        w = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
        b = rng.normal(size=4).astype(np.float32)
        np.testing.assert_allclose(conv2d(x, w, b), conv_oracle(x, w, b), atol=1e-5)

    def test_one_by_one_head(self, rng):
        x = rng.normal(size=(1, 4, 6, 6)).astype(np.float32)
        w = rng.normal(size=(1, 4, 1, 1)).astype(np.float32)
        b = rng.normal(size=1).astype(np.float32)
        expected = np.einsum("nchw,oc->nohw", x, w[:, :, 0, 0]) + b[0]
        np.testing.assert_allclose(conv2d(x, w, b), expected, atol=1e-5)

    def test_channel_mismatch(self, rng):
        with pytest.raises(ShapeMismatch):
            conv2d(
                rng.random((1, 2, 4, 4)).astype(np.float32),
                rng.random((1, 3, 3, 3)).astype(np.float32),
                np.zeros(1, dtype=np.float32),
            )

    def test_nonfinite_rejected(self):
        x = np.full((1, 1, 4, 4), np.float32(3e38))
        w = np.full((1, 1, 3, 3), np.float32(3e38))
        with pytest.raises(NonFiniteValue):
            conv2d(x, w, np.zeros(1, dtype=np.float32))


class TestMaxpool:
    def test_window_max_and_index(self):
        x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]], dtype=np.float32)
        y, idx = maxpool2(x)
        assert y[0, 0, 0, 0] == 4.0
        assert idx[0, 0, 0, 0] == 3

    def test_tie_breaks_to_first_index(self):
        x = np.full((1, 1, 2, 2), 0.5, dtype=np.float32)
        y, idx = maxpool2(x)
        assert y[0, 0, 0, 0] == 0.5
        assert idx[0, 0, 0, 0] == 0

    def test_odd_dims_rejected(self, rng):
        with pytest.raises(OddSpatialDim):
            maxpool2(rng.random((1, 1, 3, 4)).astype(np.float32))

    def test_backward_routes_to_argmax_slots(self, rng):
        x = rng.normal(size=(1, 1, 6, 6)).astype(np.float32)
        y, idx = maxpool2(x)
        dy = rng.normal(size=y.shape).astype(np.float32)
        dx = maxpool2_backward(dy, idx)
        assert dx.shape == x.shape
        # gradient mass is conserved and lands on exactly one slot per window
        assert np.isclose(dx.sum(), dy.sum(), atol=1e-5)
        per_window = (dx.reshape(1, 1, 3, 2, 3, 2).transpose(0, 1, 2, 4, 3, 5) != 0).sum(
            axis=(-1, -2)
        )
        assert (per_window <= 1).all()


class TestUpconv:
    def test_single_pixel_stamp(self):
        x = np.array([[[[2.0]]]], dtype=np.float32)
        w = np.array([[[[1.0, 2.0], [3.0, 4.0]]]], dtype=np.float32)
        y = upconv2(x, w, np.zeros(1, dtype=np.float32))
        np.testing.assert_allclose(y[0, 0], [[2.0, 4.0], [6.0, 8.0]], atol=1e-6)

    def test_zero_input_gives_bias(self, rng):
        x = np.zeros((1, 2, 3, 3), dtype=np.float32)
        w = rng.normal(size=(2, 3, 2, 2)).astype(np.float32)
        b = rng.normal(size=3).astype(np.float32)
        y = upconv2(x, w, b)
        np.testing.assert_allclose(y, np.broadcast_to(b[None, :, None, None], y.shape), atol=1e-6)

    def test_matches_stamp_oracle(self, rng):
        x = rng.normal(size=(1, 2, 3, 3)).astype(np.float32)
        w = rng.normal(size=(2, 3, 2, 2)).astype(np.float32)
        b = rng.normal(size=3).astype(np.float32)
        np.testing.assert_allclose(upconv2(x, w, b), upconv_oracle(x, w, b), atol=1e-5)

    def test_output_shape_doubles(self, rng):
        x = rng.random((2, 3, 4, 5)).astype(np.float32)
        w = rng.normal(size=(3, 2, 2, 2)).astype(np.float32)
        y = upconv2(x, w, np.zeros(2, dtype=np.float32))
        assert y.shape == (2, 2, 8, 10)


class TestActivations:
    def test_relu_values(self):
        x = np.array([-2.0, 0.0, 3.0], dtype=np.float32).reshape(1, 1, 1, 3)
        np.testing.assert_array_equal(relu(x).ravel(), [0.0, 0.0, 3.0])

    def test_relu_backward_masks_strictly_positive(self):
        x = np.array([-1.0, 0.0, 2.0], dtype=np.float32).reshape(1, 1, 1, 3)
        dy = np.ones_like(x)
        np.testing.assert_array_equal(relu_backward(x, dy).ravel(), [0.0, 0.0, 1.0])

    def test_sigmoid_at_zero(self):
        assert sigmoid(np.zeros((1, 1, 1, 1), dtype=np.float32))[0, 0, 0, 0] == 0.5

    def test_sigmoid_extreme_inputs_stable(self):
        x = np.array([-500.0, 500.0], dtype=np.float32).reshape(1, 1, 1, 2)
        with np.errstate(over="raise"):
            y = sigmoid(x)
        assert 0.0 <= y[0, 0, 0, 0] < 1e-6
        assert 1.0 - 1e-6 < y[0, 0, 0, 1] <= 1.0

    def test_sigmoid_gradient_at_zero(self):
        x = np.zeros((1, 1, 1, 1), dtype=np.float32)
        y = sigmoid(x)
        assert sigmoid_backward(y, np.ones_like(y))[0, 0, 0, 0] == pytest.approx(0.25, abs=1e-7)


class TestConcat:
    def test_stacking_order(self, rng):
        a = rng.random((2, 2, 3, 3)).astype(np.float32)
        b = rng.random((2, 3, 3, 3)).astype(np.float32)
        y = concat_channels(a, b)
        assert y.shape == (2, 5, 3, 3)
        np.testing.assert_array_equal(y[:, :2], a)
        np.testing.assert_array_equal(y[:, 2:], b)

    def test_concat_split_identity(self, rng):
        a = rng.random((1, 2, 2, 2)).astype(np.float32)
        b = rng.random((1, 4, 2, 2)).astype(np.float32)
        da, db = concat_backward(concat_channels(a, b), 2)
        np.testing.assert_array_equal(da, a)
        np.testing.assert_array_equal(db, b)

    def test_gradient_of_sum_is_ones(self, rng):
        a = rng.random((1, 2, 2, 2)).astype(np.float32)
        b = rng.random((1, 1, 2, 2)).astype(np.float32)
        dy = np.ones((1, 3, 2, 2), dtype=np.float32)
        da, db = concat_backward(dy, 2)
        np.testing.assert_array_equal(da, np.ones_like(a))
        np.testing.assert_array_equal(db, np.ones_like(b))

    def test_spatial_mismatch(self, rng):
        with pytest.raises(SpatialMismatch):
            concat_channels(
                rng.random((1, 1, 2, 2)).astype(np.float32),
                rng.random((1, 1, 3, 3)).astype(np.float32),
            )


class TestSoftDiceLoss:
    def test_perfect_match_exactly_zero(self, rng):
        t = (rng.random((1, 1, 5, 5)) > 0.5).astype(np.float32)
        loss, _ = soft_dice_loss(t.copy(), t)
        assert loss == 0.0

    def test_total_miss_closed_form(self):
        n = 16
        probs = np.zeros((1, 1, 4, 4), dtype=np.float32)
        target = np.ones((1, 1, 4, 4), dtype=np.float32)
        loss, _ = soft_dice_loss(probs, target)
        assert loss == pytest.approx(1.0 - 1.0 / (n + 1.0), abs=1e-9)

    def test_loss_in_unit_interval(self, rng):
        probs = rng.random((2, 1, 6, 6)).astype(np.float32)
        target = (rng.random((2, 1, 6, 6)) > 0.5).astype(np.float32)
        loss, _ = soft_dice_loss(probs, target)
        assert 0.0 <= loss < 1.0

    def test_gradient_matches_finite_differences(self, rng):
        probs = (0.2 + 0.6 * rng.random((1, 1, 4, 4))).astype(np.float32)
        target = (rng.random((1, 1, 4, 4)) > 0.5).astype(np.float32)
        _, dprobs = soft_dice_loss(probs, target)
        fd = np.zeros_like(dprobs, dtype=np.float64)
        flat = probs.reshape(-1)
        for i in range(flat.size):
            orig = flat[i].item()
            h = 1e-3
            flat[i] = orig + h
            lp, _ = soft_dice_loss(probs, target)
            flat[i] = orig - h
            lm, _ = soft_dice_loss(probs, target)
            flat[i] = orig
            fd.reshape(-1)[i] = (lp - lm) / (2 * h)
        rel = np.abs(fd - dprobs) / np.maximum(np.abs(fd), 1e-4)
        assert rel.max() <= 1e-3

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeMismatch):
            soft_dice_loss(
                rng.random((1, 1, 2, 2)).astype(np.float32),
                rng.random((1, 1, 3, 3)).astype(np.float32),
            )

    def test_descends_on_fixed_batch(self, rng):
        # ten plain gradient steps on the probabilities shrink the loss
        probs = (0.2 + 0.6 * rng.random((1, 1, 8, 8))).astype(np.float32)
        target = (rng.random((1, 1, 8, 8)) > 0.5).astype(np.float32)
        losses = []
        for _ in range(10):
            loss, dprobs = soft_dice_loss(probs, target)
            losses.append(loss)
            probs = np.clip(probs - 0.5 * dprobs, 0.0, 1.0)
        assert losses[-1] < losses[0]
        assert all(b <= a + 1e-9 for a, b in zip(losses, losses[1:]))


def adam_scalar_sim(p0, g, lr, b1, b2, eps, steps):
    m = v = 0.0
    p = p0
    for t in range(1, steps + 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    return p


class TestAdam:
    def test_zero_gradient_zero_state_is_noop(self, rng):
        p = rng.normal(size=(3, 3)).astype(np.float32)
        state = AdamState(lr=0.1)
        out = adam_step({"w": p.copy()}, {"w": np.zeros_like(p)}, state)
        np.testing.assert_array_equal(out["w"], p)

    def test_first_step_magnitude_is_lr(self, rng):
        g = rng.normal(size=(4, 4)).astype(np.float32)
        g[np.abs(g) < 1e-2] = 1e-2  # keep eps negligible vs |g|
        p = rng.normal(size=(4, 4)).astype(np.float32)
        state = AdamState(lr=1e-3)
        out = adam_step({"w": p.copy()}, {"w": g}, state)
        delta = out["w"].astype(np.float64) - p.astype(np.float64)
        np.testing.assert_allclose(delta, -1e-3 * np.sign(g), rtol=1e-4, atol=1e-9)

    def test_two_steps_match_scalar_simulation(self, rng):
        p0 = rng.uniform(-1, 1, size=(5,)).astype(np.float32)
        g = rng.uniform(-2, 2, size=(5,)).astype(np.float32)
        state = AdamState(lr=0.01)
        params = {"w": p0.copy()}
        for _ in range(2):
            params = adam_step(params, {"w": g}, state)
        expected = np.array(
            [adam_scalar_sim(float(p0[i]), float(g[i]), 0.01, 0.9, 0.999, 1e-8, 2) for i in range(5)]
        )
        np.testing.assert_allclose(params["w"], expected, atol=1e-7)

    def test_deterministic_bitwise(self, rng):
        p = rng.normal(size=(3, 3)).astype(np.float32)
        g = rng.normal(size=(3, 3)).astype(np.float32)
        outs = []
        for _ in range(2):
            state = AdamState(lr=0.05)
            params = {"w": p.copy()}
            for _ in range(3):
                params = adam_step(params, {"w": g}, state)
            outs.append(params["w"])
        np.testing.assert_array_equal(outs[0], outs[1])

    def test_key_mismatch_rejected(self, rng):
        p = rng.normal(size=(2,)).astype(np.float32)
        with pytest.raises(ShapeMismatch):
            adam_step({"w": p}, {"other": p}, AdamState())
