import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from deeptrack import nn
from deeptrack.nn import ConvLayer

from oracles import naive_conv, numeric_grad, rel_err


def random_layer(rng, k, c_in, c_out, dtype=np.float64):
    return ConvLayer(rng.normal(size=(k, k, c_in, c_out)).astype(dtype),
                     rng.normal(size=c_out).astype(dtype))


class TestConvForward:
    def test_identity_kernel(self, rng):
        x = rng.normal(size=(5, 4, 3))
        layer = ConvLayer(np.eye(3).reshape(1, 1, 3, 3), np.zeros(3))
        np.testing.assert_array_equal(nn.conv2d_same_forward(x, layer), x)

    def test_zero_input_gives_bias(self, rng):
        layer = random_layer(rng, 3, 2, 4)
        out = nn.conv2d_same_forward(np.zeros((6, 7, 2)), layer)
        np.testing.assert_allclose(out, np.broadcast_to(layer.bias, (6, 7, 4)))

    @pytest.mark.parametrize("k,c_in,c_out", [(3, 3, 2), (5, 24, 4), (7, 16, 1), (7, 2, 8)])
    def test_matches_naive(self, rng, k, c_in, c_out):
        # covers both the im2col and the shift-accumulate code paths
        x = rng.normal(size=(6, 6, c_in))
        layer = random_layer(rng, k, c_in, c_out)
        np.testing.assert_allclose(nn.conv2d_same_forward(x, layer), naive_conv(x, layer.kernel, layer.bias),
                                   atol=1e-9)

    def test_linearity(self, rng):
        layer = ConvLayer(rng.normal(size=(3, 3, 2, 3)), np.zeros(3))
        x, z = rng.normal(size=(2, 5, 5, 2))
        a, b = 0.7, -1.3
        lhs = nn.conv2d_same_forward(a * x + b * z, layer)
        rhs = a * nn.conv2d_same_forward(x, layer) + b * nn.conv2d_same_forward(z, layer)
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ValueError):
            nn.conv2d_same_forward(np.zeros((4, 4, 3)), random_layer(rng, 3, 2, 1))

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError):
            ConvLayer(np.zeros((2, 3, 1, 1)), np.zeros(1))


class TestConvBackward:
    def test_zero_grad_out(self, rng):
        x = rng.normal(size=(4, 4, 2))
        layer = random_layer(rng, 3, 2, 3)
        gi, gk, gb = nn.conv2d_same_backward(x, layer, np.zeros((4, 4, 3)))
        assert not gi.any() and not gk.any() and not gb.any()

    def test_identity_kernel_passes_gradient(self, rng):
        x = rng.normal(size=(4, 5, 2))
        g = rng.normal(size=(4, 5, 2))
        layer = ConvLayer(np.eye(2).reshape(1, 1, 2, 2), np.zeros(2))
        gi, _, gb = nn.conv2d_same_backward(x, layer, g)
        np.testing.assert_array_equal(gi, g)
        np.testing.assert_allclose(gb, g.sum(axis=(0, 1)))

    @pytest.mark.parametrize("k,c_in,c_out", [(3, 2, 3), (5, 6, 2), (7, 1, 2), (5, 24, 16)])
    def test_finite_differences(self, rng, k, c_in, c_out):
        x = rng.normal(size=(5, 6, c_in))
        layer = random_layer(rng, k, c_in, c_out)
        w = rng.normal(size=(5, 6, c_out))

        def f():
            return float(np.sum(w * nn.conv2d_same_forward(x, layer)))

        gi, gk, gb = nn.conv2d_same_backward(x, layer, w)
        if c_in * c_out > 100:
            # spot-check a slice of the kernel to keep the test fast
            sub = layer.kernel[:, :, :2, :2]
            ref = numeric_grad(f, sub)
            assert rel_err(gk[:, :, :2, :2], ref) <= 1e-4
        else:
            assert rel_err(gk, numeric_grad(f, layer.kernel)) <= 1e-4
        assert rel_err(gi, numeric_grad(f, x)) <= 1e-4
        assert rel_err(gb, numeric_grad(f, layer.bias)) <= 1e-4


class TestSigmoid:
    def test_midpoint(self):
        assert nn.sigmoid(np.array(0.0)) == 0.5

    def test_saturation(self):
        with np.errstate(all="raise"):
            y = nn.sigmoid(np.array([40.0, -40.0, 800.0, -800.0]))
            g = nn.sigmoid_backward(y, np.ones(4))
        assert abs(y[0] - 1.0) < 1e-15
        assert np.all(np.isfinite(g)) and np.all(np.abs(g) < 1e-15)

    def test_backward_matches_finite_differences(self, rng):
        z = rng.normal(size=20) * 3
        w = rng.normal(size=20)
        g = nn.sigmoid_backward(nn.sigmoid(z), w)
        ref = numeric_grad(lambda: float(np.sum(w * nn.sigmoid(z))), z)
        assert rel_err(g, ref) <= 1e-6

    @given(arrays(np.float64, 8, elements=st.floats(-1e6, 1e6)))
    def test_total_on_finite_input(self, z):
        y = nn.sigmoid(z)
        assert np.all((y >= 0) & (y <= 1))
        assert np.all(np.isfinite(nn.sigmoid_backward(y, np.ones_like(y))))


class TestMaskedBCE:
    def test_perfect_prediction(self, rng):
        y = (rng.random((6, 6)) < 0.4).astype(float)
        loss, _ = nn.masked_bce(y.copy(), y, np.ones_like(y))
        assert loss < 1e-6

    def test_half_is_ln2(self, rng):
        y = (rng.random((6, 6)) < 0.4).astype(float)
        loss, _ = nn.masked_bce(np.full((6, 6), 0.5), y, np.ones_like(y))
        assert loss == pytest.approx(np.log(2), abs=1e-12)

    def test_empty_mask(self, rng):
        p = rng.random((4, 4))
        loss, g = nn.masked_bce(p, np.ones((4, 4)), np.zeros((4, 4)))
        assert loss == 0.0 and not g.any()

    def test_gradient_matches_finite_differences(self, rng):
        p = rng.uniform(0.05, 0.95, size=(5, 5))
        y = (rng.random((5, 5)) < 0.5).astype(float)
        m = (rng.random((5, 5)) < 0.6).astype(float)
        for normalize in (True, False):
            _, g = nn.masked_bce(p, y, m, normalize)
            ref = numeric_grad(lambda: nn.masked_bce(p, y, m, normalize)[0], p)
            assert rel_err(g, ref) <= 1e-6

    def test_clamp_keeps_loss_finite(self):
        loss, g = nn.masked_bce(np.array([0.0, 1.0]), np.array([1.0, 0.0]), np.ones(2))
        assert np.isfinite(loss) and np.all(np.isfinite(g))
        assert loss == pytest.approx(-np.log(1e-7), rel=1e-6)

    @settings(max_examples=50)
    @given(st.integers(0, 10_000))
    def test_permutation_invariant(self, seed):
        r = np.random.default_rng(seed)
        p = r.uniform(0.01, 0.99, 30)
        y = (r.random(30) < 0.5).astype(float)
        m = (r.random(30) < 0.5).astype(float)
        perm = r.permutation(30)
        assert nn.masked_bce(p, y, m)[0] == pytest.approx(nn.masked_bce(p[perm], y[perm], m[perm])[0])

    @settings(max_examples=50)
    @given(st.floats(0.01, 0.98), st.floats(0.001, 0.01), st.booleans())
    def test_moving_toward_target_lowers_loss(self, p0, step, positive):
        y = np.array([1.0 if positive else 0.0])
        closer = p0 + step if positive else p0 - step
        if not 0 < closer < 1:
            return
        before = nn.masked_bce(np.array([p0]), y, np.ones(1))[0]
        after = nn.masked_bce(np.array([closer]), y, np.ones(1))[0]
        assert after < before


class TestMaskedBCELogits:
    def test_agrees_with_probability_form(self, rng):
        z = rng.normal(size=(6, 6)) * 3
        y = (rng.random((6, 6)) < 0.4).astype(float)
        m = (rng.random((6, 6)) < 0.6).astype(float)
        for normalize in (True, False):
            a, ga = nn.masked_bce_logits(z, y, m, normalize)
            p = nn.sigmoid(z)
            b, gp = nn.masked_bce(p, y, m, normalize)
            assert a == pytest.approx(b, rel=1e-10)
            np.testing.assert_allclose(ga, nn.sigmoid_backward(p, gp), atol=1e-12)

    def test_gradient_matches_finite_differences(self, rng):
        z = rng.normal(size=(5, 5)) * 4
        y = (rng.random((5, 5)) < 0.5).astype(float)
        m = (rng.random((5, 5)) < 0.6).astype(float)
        _, g = nn.masked_bce_logits(z, y, m)
        ref = numeric_grad(lambda: nn.masked_bce_logits(z, y, m)[0], z)
        assert rel_err(g, ref) <= 1e-6

    def test_no_dead_zone(self):
        # a confidently wrong cell keeps a unit-size gradient
        loss, g = nn.masked_bce_logits(np.array([-60.0]), np.array([1.0]), np.ones(1))
        assert loss == pytest.approx(60.0)
        assert g[0] == pytest.approx(-1.0)

    def test_float32_preserved(self):
        z = np.zeros(3, np.float32)
        _, g = nn.masked_bce_logits(z, np.ones(3, np.float32), np.ones(3, np.float32))
        assert g.dtype == np.float32


class TestSGD:
    def test_zero_lr(self, rng):
        params = {"w": rng.normal(size=3)}
        out = nn.sgd_step(params, {"w": rng.normal(size=3)}, 0.0)
        np.testing.assert_array_equal(out["w"], params["w"])

    def test_arithmetic(self):
        out = nn.sgd_step({"w": np.array([1.0])}, {"w": np.array([0.5])}, 0.9)
        assert out["w"][0] == pytest.approx(0.55)

    def test_step_then_reverse(self, rng):
        params = {"w": rng.normal(size=5)}
        grads = {"w": rng.normal(size=5)}
        back = nn.sgd_step(nn.sgd_step(params, grads, 0.9), grads, -0.9)
        np.testing.assert_allclose(back["w"], params["w"], atol=1e-15)

    def test_non_finite_gradient(self):
        with pytest.raises(FloatingPointError, match="'w'"):
            nn.sgd_step({"w": np.zeros(2)}, {"w": np.array([0.0, np.nan])}, 0.9)

    def test_does_not_mutate(self, rng):
        params = {"w": np.ones(3)}
        nn.sgd_step(params, {"w": np.ones(3)}, 0.5)
        np.testing.assert_array_equal(params["w"], 1.0)


class TestRMSProp:
    def test_first_step_is_lr_times_sign(self, rng):
        # bias correction makes the first RMS estimate exactly |g|
        g = rng.normal(size=6)
        out = nn.RMSProp(0.01).step({"w": np.zeros(6)}, {"w": g})
        np.testing.assert_allclose(out["w"], -0.01 * np.sign(g), rtol=1e-6)

    def test_second_step_by_hand(self):
        opt = nn.RMSProp(0.1, decay=0.5, eps=0.0)
        p = opt.step({"w": np.array([0.0])}, {"w": np.array([2.0])})
        p = opt.step(p, {"w": np.array([1.0])})
        # ms = 0.5*0.5*4 + 0.5*1 = 1.5, corrected by 1 - 0.25
        assert p["w"][0] == pytest.approx(-0.1 - 0.1 / np.sqrt(1.5 / 0.75))

    def test_scale_invariant(self, rng):
        g = rng.normal(size=4)
        a = nn.RMSProp(0.01).step({"w": np.zeros(4)}, {"w": g})
        b = nn.RMSProp(0.01).step({"w": np.zeros(4)}, {"w": 1e4 * g})
        np.testing.assert_allclose(a["w"], b["w"], rtol=1e-6)

    def test_keeps_dtype_and_rejects_nan(self):
        opt = nn.RMSProp(0.01)
        out = opt.step({"w": np.zeros(2, np.float32)}, {"w": np.ones(2, np.float32)})
        assert out["w"].dtype == np.float32
        with pytest.raises(FloatingPointError):
            opt.step(out, {"w": np.array([np.nan, 0.0], np.float32)})

    def test_bad_settings(self):
        with pytest.raises(ValueError):
            nn.RMSProp(0.0)
        with pytest.raises(ValueError):
            nn.RMSProp(0.01, decay=1.0)


class TestGradCheck:
    def test_quadratic(self):
        report = nn.grad_check(lambda th: float(th[0] ** 2), np.array([3.0]), np.array([6.0]))
        assert report.passed
        assert report.max_rel_error < 1e-8

    def test_corrupted_gradient_fails(self, rng):
        a = rng.normal(size=4)
        report = nn.grad_check(lambda th: float(np.sum(a * th ** 2)), np.ones(4), 2 * (2 * a))
        assert not report.passed

    def test_sampling(self, rng):
        a = rng.normal(size=50)
        report = nn.grad_check(lambda th: float(a @ th), np.zeros(50), a, n_samples=7)
        assert report.n_checked == 7 and report.passed


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path, rng):
        params = {"encoder.kernel": rng.normal(size=(7, 7, 2, 8)).astype(np.float32),
                  "encoder.bias": rng.normal(size=8).astype(np.float32),
                  "scalar_like": np.array([np.float32(np.pi)]),
                  "b0_seed": np.zeros(16, np.float32)}
        path = tmp_path / "m.dtpk"
        nn.save_checkpoint(path, params)
        back = nn.load_checkpoint(path)
        assert list(back) == list(params)
        for k in params:
            assert back[k].tobytes() == params[k].tobytes()

    def test_layout(self, tmp_path):
        path = tmp_path / "m.dtpk"
        nn.save_checkpoint(path, {"ab": np.array([[1.0, 2.0]], np.float32)})
        raw = path.read_bytes()
        expected = (b"DTPK" + (1).to_bytes(4, "little") + (2).to_bytes(2, "little") + b"ab"
                    + bytes([2]) + (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
                    + np.array([1.0, 2.0], "<f4").tobytes())
        assert raw == expected

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.dtpk"
        path.write_bytes(b"NOPE" + bytes(8))
        with pytest.raises(nn.CheckpointFormatError, match="offset 0"):
            nn.load_checkpoint(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "m.dtpk"
        nn.save_checkpoint(path, {"w": np.ones(10, np.float32)})
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(nn.CheckpointFormatError, match="truncated"):
            nn.load_checkpoint(path)
