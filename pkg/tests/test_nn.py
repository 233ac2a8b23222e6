import numpy as np
import pytest

from xbnn.binarize import compute_beta_map
from xbnn.kernels import conv_xnor_layer
from xbnn.binarize import binarize_weights
from xbnn.nn import (
    AvgPool2d,
    BatchNorm2d,
    BinaryActivation,
    Conv2d,
    LayerSpec,
    MaxPool2d,
    Network,
    ReLU,
    apply_mode,
    build_network,
    conv_block,
    loss_softmax_nll,
    ste_backward_sign,
    weight_gradient,
    weight_gradient_full,
)
from xbnn.tensor import ConvGeometry, ShapeError, sign


def numeric_grad(f, x, h=1e-5):
    """Central-difference gradient of scalar f with respect to array x."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        fp = f()
        x[idx] = orig - h
        fm = f()
        x[idx] = orig
        g[idx] = (fp - fm) / (2 * h)
        it.iternext()
    return g


def rel_err(a, b):
    denom = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
    return np.abs(a - b).max() / denom


class TestSTE:
    def test_pass_through_region(self):
        assert ste_backward_sign(np.array(2.0), np.array(0.5)) == pytest.approx(2.0)

    def test_clipped_region(self):
        assert ste_backward_sign(np.array(7.0), np.array(2.0)) == pytest.approx(0.0)

    def test_boundary_inclusive(self):
        got = ste_backward_sign(np.array([1.0, 1.0]), np.array([1.0, -1.0]))
        np.testing.assert_array_equal(got, [1.0, 1.0])

    def test_closed_form_elementwise(self):
        rng = np.random.default_rng(0)
        up = rng.normal(size=50)
        pre = rng.normal(size=50) * 2
        expected = up * (np.abs(pre) <= 1.0)
        np.testing.assert_array_equal(ste_backward_sign(up, pre), expected)

    def test_scaled_variant(self):
        up = np.array([2.0, 2.0])
        pre = np.array([0.5, -0.25])
        np.testing.assert_allclose(
            ste_backward_sign(up, pre, variant="scaled"), up * pre
        )


class TestWeightGradient:
    def test_hand_example(self):
        g = weight_gradient(np.array([1.0, 1.0]), np.array([0.5, -0.5]), 0.5)
        np.testing.assert_allclose(g, [1.0, 1.0])

    def test_alpha_zero_outside_window(self):
        g = weight_gradient(np.array([3.0, -6.0]), np.array([2.0, -1.5]), 0.0)
        np.testing.assert_allclose(g, [1.5, -3.0])  # upstream / n only

    def test_zero_upstream(self):
        np.testing.assert_array_equal(
            weight_gradient(np.zeros(4), np.ones(4), 1.0), np.zeros(4)
        )

    def test_closed_form_elementwise(self):
        rng = np.random.default_rng(1)
        g = rng.normal(size=24)
        W = rng.normal(size=24) * 1.5
        alpha = 0.7
        expected = g * (1.0 / 24 + (np.abs(W) <= 1.0) * alpha)
        np.testing.assert_array_equal(weight_gradient(g, W, alpha), expected)

    def test_scale_path_diagonal_matches_finite_differences(self):
        # Freeze the sign pattern, perturb one coordinate at a time, and
        # check d(alpha(W) * B_i)/dW_i == 1/n on the diagonal (no sign flips).
        rng = np.random.default_rng(2)
        W = rng.uniform(0.2, 0.9, size=12) * np.where(rng.random(12) < 0.5, 1, -1)
        B = sign(W)
        n = W.size
        for i in range(n):
            def wtilde_i():
                return float(np.abs(W).mean() * B[i])

            fd = numeric_grad(wtilde_i, W[i:i + 1])[0] * B[i] * sign(W[i:i + 1])[0]
            # d alpha/dW_i = sign(W_i)/n, so d wtilde_i/dW_i = B_i*sign(W_i)/n = 1/n
            assert fd * B[i] * sign(np.array([W[i]]))[0] == pytest.approx(1.0 / n, rel=1e-4)

    def test_full_jacobian_variant_matches_frozen_sign_fd(self):
        # With signs frozen, wtilde(W) = mean(|W|) * B is differentiable, so
        # the full-Jacobian alpha term must match finite differences exactly.
        rng = np.random.default_rng(3)
        W = rng.uniform(0.2, 0.9, size=8) * np.where(rng.random(8) < 0.5, 1, -1)
        B = sign(W)
        G = rng.normal(size=8)

        def objective():
            return float(G @ (np.abs(W).mean() * B))

        fd = numeric_grad(objective, W)
        analytic = sign(W) * (G @ B) / W.size  # alpha-path part of the full Jacobian
        np.testing.assert_allclose(fd, analytic, rtol=1e-6, atol=1e-9)
        # and weight_gradient_full with alpha=0 STE gate reduces to that term
        got = weight_gradient_full(G, W * 10, 0.0)  # |W*10| > 1 kills the STE term
        np.testing.assert_allclose(got, sign(W) * (G @ sign(W * 10)) / W.size)


class TestLoss:
    def test_uniform_logits(self):
        loss, _ = loss_softmax_nll(np.zeros((4, 10)), np.array([1, 3, 5, 7]))
        assert loss == pytest.approx(np.log(10))

    def test_confident_correct(self):
        logits = np.zeros((1, 5))
        logits[0, 2] = 50.0
        loss, _ = loss_softmax_nll(logits, np.array([2]))
        assert loss == pytest.approx(0.0, abs=1e-12)

    def test_two_class_hand_value(self):
        loss, _ = loss_softmax_nll(np.array([[1.0, 0.0]]), np.array([0]))
        assert loss == pytest.approx(np.log(1 + np.exp(-1)))

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            loss_softmax_nll(np.zeros((2, 3)), np.array([0, 3]))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        logits = rng.normal(size=(3, 5))
        labels = np.array([0, 4, 2])
        _, grad = loss_softmax_nll(logits, labels)
        fd = numeric_grad(lambda: loss_softmax_nll(logits, labels)[0], logits)
        np.testing.assert_allclose(grad, fd, rtol=1e-6, atol=1e-9)


class TestBatchNorm:
    def test_identity_on_standardized_input(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(8, 3, 4, 4))
        x -= x.mean(axis=(0, 2, 3), keepdims=True)
        x /= x.std(axis=(0, 2, 3), keepdims=True)
        bn = BatchNorm2d(3)
        out = bn.forward(x, train=True)
        np.testing.assert_allclose(out, x / np.sqrt(1 + bn.eps), rtol=1e-6)

    def test_running_stats_only_in_train(self):
        bn = BatchNorm2d(2)
        x = np.random.default_rng(6).normal(size=(4, 2, 3, 3)) + 5.0
        before = bn.running_mean.copy()
        bn.forward(x, train=False)
        np.testing.assert_array_equal(bn.running_mean, before)
        bn.forward(x, train=True)
        assert not np.array_equal(bn.running_mean, before)


class TestPooling:
    def test_maxpool_sign_semantics(self):
        rng = np.random.default_rng(7)
        x = sign(rng.normal(size=(2, 3, 8, 8)))
        out = MaxPool2d(2).forward(x, train=False)
        blocks = x.reshape(2, 3, 4, 2, 4, 2).transpose(0, 1, 2, 4, 3, 5).reshape(2, 3, 4, 4, 4)
        has_plus = (blocks == 1.0).any(axis=-1)
        np.testing.assert_array_equal(out == 1.0, has_plus)

    def test_maxpool_plus_one_concentration(self):
        # 2x2 max over iid +-1 is +1 unless all four are -1: expect 15/16.
        rng = np.random.default_rng(8)
        x = sign(rng.normal(size=(1, 1, 2000, 2000)))
        out = MaxPool2d(2).forward(x, train=False)
        frac = (out == 1.0).mean()
        assert frac == pytest.approx(15 / 16, abs=0.02)

    def test_avgpool_values(self):
        x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
        out = AvgPool2d(2).forward(x, train=False)
        np.testing.assert_allclose(out[0, 0], [[2.5, 4.5], [10.5, 12.5]])


class TestFiniteDifferenceGradients:
    """Full-network gradient checks for the non-binarized layers."""

    def _check_net(self, net: Network, x, labels, tol=1e-4):
        net.astype(np.float64)

        def run_loss():
            logits = net.logits(x, train=True)
            return loss_softmax_nll(logits, labels)[0]

        logits = net.logits(x, train=True)
        loss, grad = loss_softmax_nll(logits, labels)
        gx = net.backward(grad)

        fd_x = numeric_grad(run_loss, x)
        assert rel_err(gx, fd_x) < tol, f"input gradient off by {rel_err(gx, fd_x)}"
        for p in net.params():
            run_loss()  # refresh tapes not needed; closure reads current values
            fd = numeric_grad(run_loss, p.value)
            net.logits(x, train=True)
            assert rel_err(p.grad, fd) < tol, f"{p.name} gradient off by {rel_err(p.grad, fd)}"

    def test_single_linear_layer(self):
        rng = np.random.default_rng(9)
        specs = [LayerSpec(kind="conv", out_ch=4, k=0)]
        net = build_network(specs, (2, 3, 3), seed=1)
        x = rng.normal(size=(3, 2, 3, 3))
        labels = np.array([0, 1, 3])

        net.astype(np.float64)
        logits = net.logits(x, train=True)
        _, grad = loss_softmax_nll(logits, labels)
        net.backward(grad)
        p = net.params()[0]
        fd = numeric_grad(
            lambda: loss_softmax_nll(net.logits(x, train=True), labels)[0], p.value
        )
        assert rel_err(p.grad, fd) < 1e-4

    def test_conv_bn_relu_pool_chain(self):
        rng = np.random.default_rng(10)
        specs = [
            LayerSpec(kind="conv", out_ch=3, k=3, pad=1),
            LayerSpec(kind="batchnorm"),
            LayerSpec(kind="relu"),
            LayerSpec(kind="maxpool", k=2),
            LayerSpec(kind="conv", out_ch=4, k=0),
        ]
        net = build_network(specs, (2, 4, 4), seed=2)
        x = rng.normal(size=(4, 2, 4, 4))
        labels = np.array([0, 1, 2, 3])
        self._check_net(net, x, labels)

    def test_avgpool_strided_conv_chain(self):
        rng = np.random.default_rng(11)
        specs = [
            LayerSpec(kind="conv", out_ch=3, k=3, stride=2, pad=1),
            LayerSpec(kind="relu"),
            LayerSpec(kind="avgpool", k=2),
            LayerSpec(kind="conv", out_ch=3, k=0),
        ]
        net = build_network(specs, (1, 8, 8), seed=3)
        x = rng.normal(size=(2, 1, 8, 8))
        labels = np.array([1, 2])
        self._check_net(net, x, labels)

    def test_zero_upstream_zero_gradients(self):
        net = build_network(
            [LayerSpec(kind="conv", out_ch=3, k=2), LayerSpec(kind="conv", out_ch=2, k=0)],
            (1, 3, 3),
            seed=4,
        )
        x = np.random.default_rng(12).normal(size=(2, 1, 3, 3)).astype(np.float32)
        net.logits(x, train=True)
        net.backward(np.zeros((2, 2)))
        for p in net.params():
            np.testing.assert_array_equal(p.grad, np.zeros_like(p.grad))


class TestBinarizedConvLayer:
    def test_forward_matches_packed_kernels(self):
        rng = np.random.default_rng(13)
        layer = Conv2d(3, 4, (3, 3), pad=1, binarize_weights=True, binarize_input=True,
                       rng=np.random.default_rng(0))
        x = rng.normal(size=(2, 3, 6, 6)).astype(np.float32)
        out = layer.forward(x, train=False)
        geom = ConvGeometry(filt_hw=(3, 3), pad=1)
        filters = [binarize_weights(w) for w in layer.weight.value]
        for i in range(x.shape[0]):
            expected = conv_xnor_layer(x[i], filters, geom)
            np.testing.assert_allclose(out[i], expected, rtol=1e-4, atol=1e-5)

    def test_bwn_layer_uses_scaled_signs(self):
        rng = np.random.default_rng(14)
        layer = Conv2d(2, 3, (2, 2), binarize_weights=True, rng=np.random.default_rng(1))
        x = rng.normal(size=(1, 2, 4, 4)).astype(np.float32)
        out = layer.forward(x, train=False)
        ref_layer = Conv2d(2, 3, (2, 2), rng=np.random.default_rng(1))
        alphas = np.abs(layer.weight.value).mean(axis=(1, 2, 3))
        ref_layer.weight.value = alphas[:, None, None, None] * sign(layer.weight.value)
        np.testing.assert_allclose(out, ref_layer.forward(x, train=False), rtol=1e-6)

    def test_binarize_recomputed_each_forward(self):
        layer = Conv2d(1, 2, (2, 2), binarize_weights=True, rng=np.random.default_rng(2))
        x = np.random.default_rng(15).normal(size=(1, 1, 3, 3)).astype(np.float32)
        assert layer.binarize_count == 0
        layer.forward(x, train=True)
        layer.forward(x, train=True)
        assert layer.binarize_count == 2

    def test_k_bits_quantized_input(self):
        layer = Conv2d(1, 2, (2, 2), binarize_input=True, k_bits=2,
                       rng=np.random.default_rng(3))
        x = np.random.default_rng(16).normal(size=(1, 1, 4, 4)).astype(np.float32)
        out = layer.forward(x, train=False)
        assert np.all(np.isfinite(out))

    def test_binary_gradient_mode_backward_finite(self):
        layer = Conv2d(2, 3, (3, 3), pad=1, binarize_weights=True, binarize_input=True,
                       binary_gradient=True, rng=np.random.default_rng(4))
        x = np.random.default_rng(17).normal(size=(2, 2, 5, 5)).astype(np.float32)
        out = layer.forward(x, train=True)
        gx = layer.backward(np.ones_like(out))
        assert np.all(np.isfinite(gx))
        assert np.all(np.isfinite(layer.weight.grad))

    def test_learned_scale_alpha_gradient(self):
        layer = Conv2d(1, 2, (2, 2), binarize_weights=True, learned_scale=True,
                       rng=np.random.default_rng(5))
        x = np.random.default_rng(18).normal(size=(2, 1, 3, 3)).astype(np.float64)
        layer.weight.value = layer.weight.value.astype(np.float64)
        layer.alpha.value = layer.alpha.value.astype(np.float64)
        out = layer.forward(x, train=True)
        g = np.ones_like(out)
        layer.backward(g)
        fd = numeric_grad(lambda: layer.forward(x, train=True).sum(), layer.alpha.value)
        np.testing.assert_allclose(layer.alpha.grad, fd, rtol=1e-5, atol=1e-8)


class TestBlockOrders:
    def test_conv_block_shapes(self):
        bacp = conv_block("B-A-C-P", out_ch=8)
        assert [s.kind for s in bacp] == ["batchnorm", "binconv", "maxpool"]
        cbap = conv_block("C-B-A-P", out_ch=8)
        assert [s.kind for s in cbap] == ["binconv", "batchnorm", "binactiv", "maxpool"]

    def test_invalid_order_rejected(self):
        with pytest.raises(ValueError):
            conv_block("P-A-C-B", out_ch=4)

    def test_bacp_forward_matches_hand_chain(self):
        # compose the same computation from individual layer calls
        specs = [LayerSpec(kind="conv", out_ch=4, k=3, pad=1)]
        specs += conv_block("B-A-C-P", out_ch=6)
        specs += [LayerSpec(kind="conv", out_ch=3, k=0)]
        specs = apply_mode(specs, "xnor")
        net = build_network(specs, (2, 8, 8), seed=7)
        rng = np.random.default_rng(19)
        x = rng.normal(size=(2, 2, 8, 8)).astype(np.float32)
        expected = x
        for layer in net.layers:
            expected = layer.forward(expected, train=False)
        out = net.forward(x, train=False)
        np.testing.assert_array_equal(out, expected)

    def test_eval_mode_deterministic(self):
        specs = [LayerSpec(kind="conv", out_ch=4, k=3, pad=1)]
        specs += conv_block("B-A-C-P", out_ch=6)
        specs += [LayerSpec(kind="conv", out_ch=3, k=0)]
        net = build_network(apply_mode(specs, "xnor"), (1, 8, 8), seed=8)
        x = np.random.default_rng(20).normal(size=(3, 1, 8, 8)).astype(np.float32)
        a = net.forward(x, train=False)
        b = net.forward(x, train=False)
        np.testing.assert_array_equal(a, b)


class TestSpecsAndModes:
    def test_apply_mode_xnor_flags_middle_layers(self):
        specs = [
            LayerSpec(kind="conv", out_ch=4, k=3),
            LayerSpec(kind="conv", out_ch=8, k=3),
            LayerSpec(kind="conv", out_ch=10, k=0),
        ]
        out = apply_mode(specs, "xnor")
        assert (out[0].binarize_weights, out[0].binarize_input) == (False, False)
        assert (out[1].binarize_weights, out[1].binarize_input) == (True, True)
        assert (out[2].binarize_weights, out[2].binarize_input) == (False, False)

    def test_apply_mode_bwn_no_input_binarization(self):
        specs = [LayerSpec(kind="conv", out_ch=4, k=3)] * 3
        out = apply_mode(specs, "bwn")
        assert out[1].binarize_weights and not out[1].binarize_input

    def test_build_forces_real_first_and_last(self):
        specs = [
            LayerSpec(kind="binconv", out_ch=4, k=3, binarize_weights=True, binarize_input=True),
            LayerSpec(kind="binconv", out_ch=5, k=0, binarize_weights=True),
        ]
        net = build_network(specs, (1, 4, 4), seed=0)
        convs = net.conv_layers()
        assert not convs[0].binarize_weights and not convs[0].binarize_input
        assert not convs[1].binarize_weights

    def test_softmax_nll_must_be_last(self):
        with pytest.raises(ShapeError):
            build_network(
                [LayerSpec(kind="softmax-nll"), LayerSpec(kind="conv", out_ch=2, k=0)],
                (1, 3, 3),
            )

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            LayerSpec(kind="dropout")

    def test_shape_chain_break(self):
        with pytest.raises(ShapeError):
            net = build_network([LayerSpec(kind="conv", out_ch=2, k=5)], (1, 3, 3))
