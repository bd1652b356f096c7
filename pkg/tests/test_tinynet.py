import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from carlab.tinynet import (
    AdamState,
    Interval,
    MlpNet,
    adam_step,
    dueling_matrix,
    gaussian_entropy,
    gaussian_kl,
    gaussian_log_prob,
    ibp_bounds,
    load_weights,
    save_weights,
)

from conftest import numeric_grads, rel_error


def linear_net(w, b):
    net = MlpNet(w.shape[0], [], w.shape[1])
    net.set_params([w, b])
    return net


def smooth_input(net, rng, n=4):
    """Inputs whose hidden pre-activations stay away from the ReLU kink."""
    while True:
        x = rng.normal(size=(n, net.in_dim))
        _, cache = net.forward(x, return_cache=True)
        if all(np.min(np.abs(z)) > 1e-4 for z in cache.pre):
            return x


class TestForward:
    def test_zero_weights(self):
        net = MlpNet(3, [4], 2)
        net.set_params([np.zeros_like(p) for p in net.params()])
        np.testing.assert_array_equal(net.forward(np.ones(3)), np.zeros(2))

    def test_identity_linear(self):
        net = linear_net(np.eye(3), np.zeros(3))
        x = np.array([0.5, -2.0, 7.0])
        np.testing.assert_array_equal(net.forward(x), x)

    def test_hand_unrolled_2_3_2(self):
        net = MlpNet(2, [3], 2)
        w0 = np.array([[0.1, -0.2, 0.3], [0.4, 0.5, -0.6]])
        b0 = np.array([0.01, 0.02, -0.03])
        w1 = np.array([[0.7, -0.8], [0.9, 0.1], [-0.2, 0.3]])
        b1 = np.array([0.05, -0.05])
        net.set_params([w0, b0, w1, b1])
        x = [1.0, 2.0]
        h = [max(0.0, x[0] * w0[0, j] + x[1] * w0[1, j] + b0[j]) for j in range(3)]
        y = [sum(h[j] * w1[j, k] for j in range(3)) + b1[k] for k in range(2)]
        np.testing.assert_allclose(net.forward(np.array(x)), y, rtol=0, atol=1e-15)

    def test_dueling_identity(self, rng):
        net = MlpNet(3, [8], 4, head="dueling", seed=1)
        x = rng.normal(size=(5, 3))
        _, cache = net.forward(x, return_cache=True)
        v, adv = cache.raw[:, :1], cache.raw[:, 1:]
        np.testing.assert_allclose(net.forward(x), v + adv - adv.mean(axis=1, keepdims=True), atol=1e-14)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="dimension"):
            MlpNet(3, [4], 2).forward(np.ones(4))

    def test_seeded_init_is_reproducible(self):
        a, b = MlpNet(3, [16, 16], 2, seed=7), MlpNet(3, [16, 16], 2, seed=7)
        for p, q in zip(a.params(), b.params()):
            assert np.array_equal(p, q)

    def test_log_std_clamped(self):
        net = MlpNet(2, [4], 2, head="gaussian", log_std_init=5.0)
        net.set_params(net.params())
        assert np.all(net.log_std == 2.0)


class TestBackward:
    def test_linear_squared_loss(self, rng):
        w = rng.normal(size=(3, 1))
        net = linear_net(w, np.zeros(1))
        x, y = rng.normal(size=3), 0.3
        out, cache = net.forward(x, return_cache=True)
        gw, gb = net.backward(cache, 2 * (out - y))
        np.testing.assert_allclose(gw[:, 0], 2 * (out[0] - y) * x, atol=1e-14)
        np.testing.assert_allclose(gb, 2 * (out - y), atol=1e-14)

    def test_zero_output_grad(self, rng):
        net = MlpNet(3, [5, 5], 2, seed=2)
        _, cache = net.forward(rng.normal(size=(4, 3)), return_cache=True)
        for g in net.backward(cache, np.zeros((4, 2))):
            assert not np.any(g)

    def test_stale_cache_rejected(self, rng):
        net = MlpNet(3, [5], 2)
        _, cache = net.forward(rng.normal(size=3), return_cache=True)
        net.set_params(net.params())
        with pytest.raises(ValueError, match="stale"):
            net.backward(cache, np.ones(2))

    @pytest.mark.parametrize("head", ["plain", "dueling", "gaussian"])
    def test_finite_differences(self, rng, head):
        for trial in range(20):
            net = MlpNet(3, [6, 5], 3, head=head, seed=trial)
            for p in net.params():
                p += rng.normal(scale=0.1, size=p.shape)
            x = smooth_input(net, rng)
            c = rng.normal(size=(4, 3))

            def loss():
                return float(np.sum(c * net.forward(x)))

            _, cache = net.forward(x, return_cache=True)
            grads = net.backward(cache, c)
            weights = [p for p in net.params() if p is not net.log_std]
            num = numeric_grads(loss, weights)
            assert rel_error(grads[:len(weights)], num) < 1e-5


class TestInputGradient:
    def test_linear(self, rng):
        w = rng.normal(size=(3, 2))
        net = linear_net(w, rng.normal(size=2))
        c = np.array([1.0, -2.0])
        np.testing.assert_allclose(net.input_gradient(rng.normal(size=3), c), w @ c, atol=1e-14)

    def test_constant_objective(self, rng):
        net = MlpNet(3, [5], 2)
        assert not np.any(net.input_gradient(rng.normal(size=3), np.zeros(2)))

    def test_finite_differences(self, rng):
        for trial in range(20):
            net = MlpNet(4, [8, 8], 3, head="dueling", seed=trial)
            x = smooth_input(net, rng, 1)[0]
            c = rng.normal(size=3)
            num = numeric_grads(lambda: float(c @ net.forward(x)), [x])[0]
            assert rel_error(net.input_gradient(x, c), num) < 1e-5

    def test_callable_objective(self, rng):
        net = MlpNet(2, [4], 2, seed=3)
        x = rng.normal(size=2)
        g1 = net.input_gradient(x, lambda out: 2 * out)
        g2 = net.input_gradient(x, 2 * net.forward(x))
        np.testing.assert_array_equal(g1, g2)


class TestIbp:
    def test_zero_radius_degenerate(self, rng):
        net = MlpNet(3, [6, 6], 2, head="dueling", seed=4)
        x = rng.normal(size=3)
        box = ibp_bounds(net, x, 0.0)
        np.testing.assert_allclose(box.lower, net.forward(x), atol=1e-12)
        np.testing.assert_allclose(box.upper, net.forward(x), atol=1e-12)

    def test_affine_interval(self):
        net = linear_net(np.array([[2.0]]), np.array([1.0]))
        box = ibp_bounds(net, np.array([0.5]), 0.5)
        np.testing.assert_allclose([box.lower[0], box.upper[0]], [1.0, 3.0])

    @pytest.mark.parametrize("head", ["plain", "dueling"])
    def test_monte_carlo_soundness(self, rng, head):
        for trial in range(5):
            net = MlpNet(3, [16, 16], 4, head=head, seed=trial)
            x = rng.normal(size=3)
            eps = 0.2
            box = ibp_bounds(net, x, eps)
            ys = net.forward(x + rng.uniform(-eps, eps, size=(1000, 3)))
            assert box.contains(ys)

    def test_domain_clipping(self, rng):
        net = MlpNet(2, [8], 2, seed=5)
        box = ibp_bounds(net, np.zeros(2), 0.5, domain=(np.zeros(2), np.ones(2)))
        ys = net.forward(rng.uniform(0.0, 0.5, size=(500, 2)))
        assert box.contains(ys)
        assert box.within(ibp_bounds(net, np.zeros(2), 0.5))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 1000), st.floats(0.0, 0.5), st.floats(0.0, 0.5))
    def test_monotone_in_radius(self, seed, e1, e2):
        net = MlpNet(3, [8, 8], 3, head="dueling", seed=seed)
        x = np.random.default_rng(seed).normal(size=3)
        lo, hi = sorted((e1, e2))
        assert ibp_bounds(net, x, lo).within(ibp_bounds(net, x, hi))

    def test_rejects_negative_radius(self):
        with pytest.raises(ValueError):
            ibp_bounds(MlpNet(2, [3], 2), np.zeros(2), -0.1)

    def test_interval_invariant(self):
        with pytest.raises(ValueError):
            Interval(np.array([1.0]), np.array([0.0]))

    @pytest.mark.parametrize("head", ["plain", "dueling"])
    def test_backward_finite_differences(self, rng, head):
        checked = 0
        for trial in range(30):
            net = MlpNet(3, [6, 6], 3, head=head, seed=trial)
            x = rng.normal(size=(2, 3))
            lo, hi = x - 0.1, x + 0.1
            box, cache = net.ibp(lo, hi, return_cache=True)
            # skip instances with a pre-activation bound near the ReLU kink
            if any(min(np.min(np.abs(a)), np.min(np.abs(b))) < 1e-4
                   for a, b in zip(cache.pre_lo, cache.pre_hi)):
                continue
            cl, cu = rng.normal(size=(2, 2, 3))

            def loss():
                b = net.ibp(lo, hi)
                return float(np.sum(cl * b.lower + cu * b.upper))

            grads = net.ibp_backward(cache, cl, cu)
            assert rel_error(grads, numeric_grads(loss, net.params())) < 1e-5
            checked += 1
        assert checked >= 20


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        net = MlpNet(2, [4], 2, seed=1)
        before = [p.copy() for p in net.params()]
        adam_step(net, net.zero_grads(), AdamState.for_net(net, lr=0.1))
        for p, q in zip(net.params(), before):
            np.testing.assert_array_equal(p, q)

    def test_first_step_is_signed_lr(self):
        net = MlpNet(2, [4], 2, seed=1)
        before = [p.copy() for p in net.params()]
        grads = [np.full_like(p, 3.0) for p in net.params()]
        adam_step(net, grads, AdamState.for_net(net, lr=0.01))
        for p, q in zip(net.params(), before):
            np.testing.assert_allclose(q - p, 0.01, rtol=1e-6)

    def test_quadratic_bowl(self, rng):
        net = linear_net(rng.normal(size=(3, 1)), np.zeros(1))
        target = np.array([[1.0], [-2.0], [0.5]])
        state = AdamState.for_net(net, lr=0.01)
        losses = []
        for _ in range(500):
            w = net.weights[0]
            losses.append(float(np.sum((w - target) ** 2)))
            adam_step(net, [2 * (w - target), np.zeros(1)], state)
        assert np.all(np.diff(losses[20:]) <= 1e-12)
        assert losses[-1] < 1e-2 * losses[0]

    def test_rejects_mismatched_grads(self):
        net = MlpNet(2, [4], 2)
        with pytest.raises(ValueError):
            adam_step(net, net.zero_grads()[:-1], AdamState())


class TestGaussian:
    def test_log_prob_at_mean(self):
        lp, _, _ = gaussian_log_prob(np.zeros(3), np.zeros(3), np.zeros(3))
        assert lp == pytest.approx(-1.5 * math.log(2 * math.pi))

    def test_entropy_unit_scale(self):
        ent, _ = gaussian_entropy(np.zeros(1))
        assert ent == pytest.approx(0.5 * (1 + math.log(2 * math.pi)))
        assert ent == pytest.approx(1.41894, abs=1e-5)

    def test_head_required(self):
        with pytest.raises(ValueError):
            MlpNet(2, [3], 2).gaussian(np.zeros(2))

    def test_log_prob_gradients(self, rng):
        for _ in range(20):
            a, mean = rng.normal(size=(2, 3))
            log_std = rng.normal(scale=0.5, size=3)
            _, d_mean, d_log_std = gaussian_log_prob(a, mean, log_std)
            num = numeric_grads(lambda: float(gaussian_log_prob(a, mean, log_std)[0]), [mean, log_std])
            assert rel_error([d_mean, d_log_std], num) < 1e-5

    def test_entropy_gradient(self, rng):
        for _ in range(20):
            log_std = rng.normal(size=2)
            _, g = gaussian_entropy(log_std)
            num = numeric_grads(lambda: gaussian_entropy(log_std)[0], [log_std])
            assert rel_error(g, num) < 1e-5

    def test_kl_zero_and_closed_form(self):
        assert gaussian_kl(np.ones(2), np.ones(2), np.zeros(2)) == 0.0
        assert gaussian_kl(np.zeros(1), np.ones(1), np.zeros(1)) == pytest.approx(0.5)


class TestWeightFile:
    @pytest.mark.parametrize("head", ["plain", "dueling", "gaussian"])
    def test_roundtrip(self, tmp_path, rng, head):
        net = MlpNet(3, [7, 5], 2, head=head, seed=9)
        path = tmp_path / "w.bin"
        save_weights(net, path)
        back = load_weights(path)
        assert back.head == head and back.sizes == net.sizes
        x = rng.normal(size=(4, 3))
        np.testing.assert_array_equal(back.forward(x), net.forward(x))
        if head == "gaussian":
            np.testing.assert_array_equal(back.log_std, net.log_std)

    def test_rejects_garbage(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"not a net")
        with pytest.raises(ValueError):
            load_weights(path)

    def test_layout_is_little_endian_float64(self, tmp_path):
        net = linear_net(np.array([[1.5]]), np.array([-0.25]))
        path = tmp_path / "w.bin"
        save_weights(net, path)
        tail = np.frombuffer(path.read_bytes()[-16:], dtype="<f8")
        np.testing.assert_array_equal(tail, [1.5, -0.25])


def test_dueling_matrix_rows():
    m = dueling_matrix(3)
    np.testing.assert_allclose(m[0], 1.0)
    np.testing.assert_allclose(m[1:].sum(axis=0), 0.0, atol=1e-15)
