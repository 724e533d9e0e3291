import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rawspk import autodiff as ad
from rawspk import gradcheck


def leaf(data):
    return ad.Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


class TestForward:
    def test_conv1d_hand_example(self):
        out = ad.conv1d(ad.Tensor([1.0, 2.0, 3.0, 4.0]), ad.Tensor([1.0, 1.0]))
        np.testing.assert_array_equal(out.data, [3.0, 5.0, 7.0])

    def test_conv1d_matches_loop(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((2, 3, 20))
        w = rng.standard_normal((4, 3, 3))
        out = ad.conv1d(x, w, stride=2, dilation=3).data
        t_out = ad.conv_out_len(20, 3, 2, 3)
        ref = np.zeros((2, 4, t_out))
        for b in range(2):
            for o in range(4):
                for t in range(t_out):
                    for k in range(3):
                        ref[b, o, t] += w[o, :, k] @ x[b, :, 2 * t + 3 * k]
        np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_depthwise_matches_loop(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((1, 3, 10))
        w = rng.standard_normal((3, 4))
        out = ad.depthwise_conv1d(x, w).data
        ref = np.stack([np.correlate(x[0, c], w[c], mode="valid") for c in range(3)])
        np.testing.assert_allclose(out[0], ref, atol=1e-12)

    @pytest.mark.parametrize("k", [2, 5, 10])
    def test_cross_entropy_uniform_logits(self, k):
        loss = ad.softmax_cross_entropy(np.zeros((3, k)), [0, 1, k - 1])
        assert loss.item() == pytest.approx(np.log(k), rel=1e-12)

    def test_cross_entropy_large_logits_finite(self):
        loss = ad.softmax_cross_entropy(np.array([[1000.0, 0.0]]), [1])
        assert loss.item() == pytest.approx(1000.0)

    def test_reduce_std_population(self):
        x = np.random.default_rng(2).standard_normal((2, 7))
        np.testing.assert_allclose(ad.reduce_std(x, axis=-1, eps=0.0).data, x.std(axis=-1))

    def test_hilbert_matches_dsp(self):
        t = np.arange(32)
        out = ad.hilbert(np.cos(2 * np.pi * 4 * t / 32)).data
        np.testing.assert_allclose(out, np.sin(2 * np.pi * 4 * t / 32), atol=1e-12)


class TestShapeErrors:
    @pytest.mark.parametrize("op", [ad.add, ad.sub, ad.mul, ad.div])
    def test_elementwise_names_both_shapes(self, op):
        with pytest.raises(ValueError, match=r"\(2, 3\).*\(4,\)"):
            op(np.ones((2, 3)), np.ones(4))

    def test_matmul(self):
        with pytest.raises(ValueError, match=r"\(2, 3\).*\(4, 5\)"):
            ad.matmul(np.ones((2, 3)), np.ones((4, 5)))

    def test_conv1d_channels(self):
        with pytest.raises(ValueError, match=r"\(1, 2, 8\).*\(3, 4, 2\)"):
            ad.conv1d(np.ones((1, 2, 8)), np.ones((3, 4, 2)))

    def test_conv1d_too_short(self):
        with pytest.raises(ValueError, match="shorter"):
            ad.conv1d(np.ones((1, 1, 2)), np.ones((1, 1, 3)))

    def test_depthwise(self):
        with pytest.raises(ValueError, match=r"\(1, 2, 8\).*\(3, 2\)"):
            ad.depthwise_conv1d(np.ones((1, 2, 8)), np.ones((3, 2)))

    def test_concat(self):
        with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 4\)"):
            ad.concat([np.ones((2, 3)), np.ones((2, 4))], axis=0)

    def test_reshape(self):
        with pytest.raises(ValueError, match=r"\(2, 3\)"):
            ad.reshape(np.ones((2, 3)), (4,))

    def test_cross_entropy_labels(self):
        with pytest.raises(ValueError, match=r"\(2, 3\).*\(3,\)"):
            ad.softmax_cross_entropy(np.ones((2, 3)), [0, 1, 2])


class TestBackward:
    def test_sum_gives_ones(self):
        w = leaf(np.arange(5.0))
        ad.backward(ad.reduce_sum(w))
        np.testing.assert_array_equal(w.grad, np.ones(5))

    def test_sum_of_squares(self):
        w = leaf([1.0, 2.0, 3.0])
        ad.backward(ad.reduce_sum(ad.square(w)))
        np.testing.assert_array_equal(w.grad, [2.0, 4.0, 6.0])

    def test_non_scalar_rejected(self):
        w = leaf(np.ones(3))
        with pytest.raises(ValueError, match="scalar"):
            ad.backward(ad.square(w))

    def test_repeated_calls_accumulate(self):
        w = leaf([1.0, -2.0])
        loss = ad.reduce_sum(ad.square(w))
        ad.backward(loss)
        ad.backward(loss)
        np.testing.assert_array_equal(w.grad, [4.0, -8.0])

    def test_shared_subexpression(self):
        # w feeds the loss through two paths; both must be summed
        w = leaf([3.0])
        y = ad.mul(w, w)
        ad.backward(ad.reduce_sum(ad.add(y, y)))
        np.testing.assert_array_equal(w.grad, [12.0])

    def test_broadcast_gradient_reduced(self):
        a = leaf(np.ones((3, 4)))
        b = leaf(np.ones(4))
        ad.backward(ad.reduce_sum(ad.mul(a, b)))
        np.testing.assert_array_equal(b.grad, np.full(4, 3.0))

    def test_constants_get_no_grad(self):
        w = leaf([1.0])
        c = ad.Tensor([2.0])
        ad.backward(ad.reduce_sum(ad.mul(w, c)))
        assert c.grad is None

    def test_deep_chain_does_not_recurse(self):
        w = leaf([1.0])
        y = w
        for _ in range(5000):
            y = ad.add(y, 0.0)
        ad.backward(ad.reduce_sum(y))
        np.testing.assert_array_equal(w.grad, [1.0])

    @settings(max_examples=30, deadline=None)
    @given(st.floats(-5, 5), st.floats(-5, 5), st.integers(0, 2**31))
    def test_linearity(self, a, b, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((3, 4))
        w = leaf(rng.standard_normal((4, 2)))

        def l1():
            return ad.reduce_sum(ad.square(ad.matmul(x, w)))

        def l2():
            return ad.reduce_mean(ad.sigmoid(ad.matmul(x, w)))

        grads = []
        for fn in (l1, l2, lambda: a * l1() + b * l2()):
            w.grad = None
            ad.backward(fn())
            grads.append(w.grad.copy())
        np.testing.assert_allclose(grads[2], a * grads[0] + b * grads[1], rtol=0, atol=1e-10)


class TestGradientChecks:
    @pytest.mark.parametrize("name", sorted(gradcheck.OP_CHECKS))
    @pytest.mark.parametrize("seed", [0, 1])
    def test_op(self, name, seed):
        rng = np.random.default_rng(seed)
        for shape in gradcheck.SHAPES:
            assert gradcheck.OP_CHECKS[name](rng, shape) < gradcheck.TOLERANCE

    @pytest.mark.parametrize("name", sorted(gradcheck.COMPOSITE_CHECKS))
    def test_composite(self, name):
        assert gradcheck.COMPOSITE_CHECKS[name](np.random.default_rng(3)) < gradcheck.TOLERANCE

    def test_checker_detects_wrong_gradient(self):
        x = leaf([0.5, 1.5])

        def wrong_backward(g):
            return (2.0 * g,)  # true derivative of x^2 is 2x

        def fn():
            return ad.reduce_sum(ad.custom(x.data ** 2, [x], wrong_backward, "bad_square"))

        assert ad.check_gradients(fn, [x]) > 0.1

    def test_error_floor(self):
        assert ad.gradient_error([1e-9], [2e-9]) < 1e-6
        assert ad.gradient_error([1.0], [1.001]) == pytest.approx(1e-3, rel=1e-3)


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        p = [np.array([1.0, -2.0, 3.0])]
        new, _ = ad.adam_step(p, [np.zeros(3)], {}, lr=0.1)
        np.testing.assert_array_equal(new[0], p[0])

    def test_first_step_is_lr_times_sign(self):
        p = [np.zeros(4)]
        g = [np.array([3.0, -0.01, 100.0, -7.0])]
        new, state = ad.adam_step(p, g, {}, lr=1e-3)
        np.testing.assert_allclose(new[0], -1e-3 * np.sign(g[0]), rtol=1e-4)
        assert state["t"] == 1

    def test_quadratic_bowl(self):
        w = np.random.default_rng(4).standard_normal(5)
        w /= np.linalg.norm(w)
        params, state = [w], {}
        for _ in range(200):
            params, state = ad.adam_step(params, [2 * params[0]], state, lr=0.1)
        assert np.linalg.norm(params[0]) < 1e-2

    def test_matches_reference_recurrence(self):
        rng = np.random.default_rng(5)
        p = rng.standard_normal(3)
        params, state = [p.copy()], {}
        m = v = np.zeros(3)
        for t in range(1, 6):
            g = rng.standard_normal(3)
            params, state = ad.adam_step(params, [g], state, lr=0.01)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            p = p - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        np.testing.assert_allclose(params[0], p, rtol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match=r"\(3,\).*\(2,\)"):
            ad.adam_step([np.zeros(3)], [np.zeros(2)], {})

    def test_optimizer_lr_scale(self):
        a, b = leaf([0.0]), leaf([0.0])
        opt = ad.Adam({"a": a, "b": b}, lr=1e-2, lr_scale={"b": 10.0})
        ad.backward(ad.reduce_sum(a + b))
        opt.step()
        np.testing.assert_allclose([a.data[0], b.data[0]], [-1e-2, -1e-1], rtol=1e-5)


class TestDeterminism:
    def test_identical_losses(self):
        def run():
            rng = np.random.default_rng(11)
            x = rng.standard_normal((4, 1, 30))
            w = ad.Tensor(rng.standard_normal((3, 1, 5)), requires_grad=True)
            opt = ad.Adam({"w": w}, lr=1e-2)
            losses = []
            for _ in range(5):
                opt.zero_grad()
                h = ad.reduce_mean(ad.relu(ad.conv1d(x, w)), axis=-1)
                loss = ad.softmax_cross_entropy(h, [0, 1, 2, 0])
                ad.backward(loss)
                opt.step()
                losses.append(loss.item())
            return losses

        assert run() == run()
