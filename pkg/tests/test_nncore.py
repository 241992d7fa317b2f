"""Layer math tests: trivial cases, oracle equivalence, finite differences."""
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import transferlab.nncore as nn
from transferlab.errors import InputError, NumericError, ShapeError

from oracles import (conv_oracle, lrn_oracle, maxpool_argmax_oracle,
                     maxpool_oracle, random_conv_case, random_lrn_case,
                     random_pool_case)


def tiny_spec(classes=5):
    return nn.ModelSpec((1, 8, 8), (
        nn.Conv(3, 3, 1, 1), nn.Relu(), nn.MaxPool(2, 2), nn.Lrn(),
        nn.Conv(4, 3, 1, 1), nn.Relu(),
        nn.FullyConnected(8), nn.Relu(), nn.Dropout(0.5),
        nn.FullyConnected(classes), nn.SoftmaxXent()))


def rand_model(spec, seed, dtype=np.float64, std=0.3):
    rng = np.random.default_rng(seed)
    states = [None] * len(spec.layers)
    for idx, (ws, bs) in zip(spec.weight_layers(), spec.weight_shapes()):
        states[idx] = nn.LayerState(rng.normal(0, std, ws).astype(dtype),
                                    rng.normal(0, 0.05, bs).astype(dtype))
    return nn.Model(spec, states)


def numeric_grad(f, x, eps=1e-6):
    """Central differences over every element of x, in place."""
    g = np.zeros_like(x, dtype=np.float64)
    flat, gflat = x.ravel(), g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = f()
        flat[i] = orig - eps
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * eps)
    return g


class TestConv:
    def test_all_ones_kernel_sums_window(self):
        """1x3x3 ones, single 2x2 ones kernel, stride 1, no pad -> 2x2 of 4."""
        x = np.ones((1, 3, 3))
        w = np.ones((1, 1, 2, 2))
        out = nn.conv_forward(x, w, np.zeros(1), nn.Conv(1, 2))
        assert out.shape == (1, 2, 2)
        assert np.array_equal(out, np.full((1, 2, 2), 4.0))

    def test_matches_loop_oracle_on_random_cases(self):
        rng = np.random.default_rng(11)
        for _ in range(40):
            x, w, b, stride, pad = random_conv_case(rng)
            fast = nn.conv_forward(x, w, b, nn.Conv(w.shape[0], w.shape[2], stride, pad))
            slow = conv_oracle(x, w, b, stride, pad)
            assert np.max(np.abs(fast - slow)) < 1e-10

    def test_batched_equals_per_example(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(4, 2, 5, 5))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        spec = nn.Conv(3, 3, 1, 1)
        full = nn.conv_forward(x, w, b, spec)
        for i in range(4):
            assert np.array_equal(full[i], nn.conv_forward(x[i], w, b, spec))

    def test_channel_mismatch_raises(self):
        x = np.ones((2, 4, 4))
        w = np.ones((1, 3, 2, 2))
        with pytest.raises(ShapeError):
            nn.conv_forward(x, w, np.zeros(1), nn.Conv(1, 2))

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(2, 2, 5, 5))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        spec = nn.Conv(3, 3, 2, 1)
        dout = rng.normal(size=nn.conv_forward(x, w, b, spec).shape)

        def loss():
            return float(np.sum(nn.conv_forward(x, w, b, spec) * dout))

        out, cache = nn.conv_forward(x, w, b, spec, want_cache=True)
        dx, dw, db = nn.conv_backward(dout, cache)
        for arr, grad in ((x, dx), (w, dw), (b, db)):
            num = numeric_grad(loss, arr)
            denom = np.maximum(np.abs(num), 1e-8)
            assert np.max(np.abs(grad - num) / denom) < 1e-4


class TestMaxPool:
    def test_two_by_two_blocks(self):
        x = np.array([[[1, 2, 5, 3], [0, -1, 2, 2], [7, 1, 1, 0], [3, 3, 0, 9]]], dtype=float)
        out = nn.maxpool_forward(x, nn.MaxPool(2, 2))
        assert np.array_equal(out, np.array([[[2, 5], [7, 9]]], dtype=float))

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(12)
        for _ in range(40):
            x, window, stride = random_pool_case(rng)
            fast = nn.maxpool_forward(x, nn.MaxPool(window, stride))
            slow = maxpool_oracle(x, window, stride)
            assert np.max(np.abs(fast - slow)) < 1e-10

    def test_tie_routes_to_first_in_row_major_order(self):
        """Equal values in one window: gradient goes to the earliest cell scanned."""
        x = np.full((1, 2, 2), 3.0)
        out, cache = nn.maxpool_forward(x, nn.MaxPool(2, 2), want_cache=True)
        dx = nn.maxpool_backward(np.ones((1, 1, 1)), cache)
        assert np.array_equal(dx, np.array([[[1.0, 0.0], [0.0, 0.0]]]))

    def test_argmax_agrees_with_oracle_under_ties(self):
        rng = np.random.default_rng(7)
        for _ in range(25):
            # quantized values make ties common
            x = np.round(rng.normal(size=(2, 6, 6)) * 2) / 2
            _, cache = nn.maxpool_forward(x, nn.MaxPool(2, 2), want_cache=True)
            arg = cache[0][0]  # cache holds the batch-lifted argmax
            assert np.array_equal(arg, maxpool_argmax_oracle(x, 2, 2))

    def test_window_larger_than_input_raises(self):
        with pytest.raises(ShapeError):
            nn.maxpool_forward(np.ones((1, 3, 3)), nn.MaxPool(4, 1))

    def test_backward_routes_all_gradient_mass(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(1, 3, 6, 6))
        out, cache = nn.maxpool_forward(x, nn.MaxPool(2, 2), want_cache=True)
        dout = rng.normal(size=out.shape)
        dx = nn.maxpool_backward(dout, cache)
        assert dx.shape == x.shape
        assert np.isclose(dx.sum(), dout.sum())


class TestLrn:
    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(13)
        for _ in range(40):
            x, window, alpha, beta, k = random_lrn_case(rng)
            fast = nn.lrn_forward(x, nn.Lrn(window, alpha, beta, k))
            slow = lrn_oracle(x, window, alpha, beta, k)
            assert np.max(np.abs(fast - slow)) < 1e-10

    def test_alpha_zero_rescales_by_k(self):
        x = np.random.default_rng(1).normal(size=(3, 4, 4))
        out = nn.lrn_forward(x, nn.Lrn(5, 0.0, 0.75, 2.0))
        assert np.allclose(out, x / 2.0 ** 0.75, atol=1e-12)

    def test_beta_zero_is_identity(self):
        x = np.random.default_rng(2).normal(size=(3, 4, 4))
        out = nn.lrn_forward(x, nn.Lrn(5, 1e-4, 0.0, 1.0))
        assert np.array_equal(out, x)

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(1, 6, 4, 4))
        spec = nn.Lrn(5, 1e-2, 0.75, 1.0)
        dout = rng.normal(size=x.shape)

        def loss():
            return float(np.sum(nn.lrn_forward(x, spec) * dout))

        _, cache = nn.lrn_forward(x, spec, want_cache=True)
        dx = nn.lrn_backward(dout, cache)
        num = numeric_grad(loss, x)
        assert np.max(np.abs(dx - num) / np.maximum(np.abs(num), 1e-8)) < 1e-4


class TestRelu:
    def test_definition(self):
        x = np.array([-2.0, -0.5, 0.0, 0.5, 2.0])
        assert np.array_equal(nn.relu_forward(x), np.array([0.0, 0.0, 0.0, 0.5, 2.0]))

    @given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=30))
    def test_never_negative_and_idempotent(self, vals):
        x = np.array(vals)
        out = nn.relu_forward(x)
        assert (out >= 0).all()
        assert np.array_equal(nn.relu_forward(out), out)

    def test_backward_away_from_kink(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=50)
        x = np.where(np.abs(x) < 0.05, 0.2, x)  # keep clear of the kink at 0
        dout = rng.normal(size=50)
        _, cache = nn.relu_forward(x, want_cache=True)
        dx = nn.relu_backward(dout, cache)

        def loss():
            return float(np.sum(nn.relu_forward(x) * dout))

        num = numeric_grad(loss, x)
        assert np.max(np.abs(dx - num) / np.maximum(np.abs(num), 1e-8)) < 1e-4


class TestDropout:
    def test_eval_is_exact_identity(self):
        x = np.random.default_rng(0).normal(size=(7, 5))
        out = nn.dropout_forward(x, nn.Dropout(0.5), "eval")
        assert np.array_equal(out, x)

    def test_train_expectation_matches_input(self):
        """Mean over many masks approaches the input within 3 sigma elementwise."""
        rng = np.random.default_rng(42)
        x = np.array([1.0, -2.0, 0.5, 3.0])
        p = 0.3
        trials = 10_000
        acc = np.zeros_like(x)
        for _ in range(trials):
            acc += nn.dropout_forward(x, nn.Dropout(p), "train", rng)
        mean = acc / trials
        sigma = np.abs(x) * np.sqrt(p / (1 - p) / trials)
        assert (np.abs(mean - x) <= 3 * sigma + 1e-12).all()

    def test_zero_rate_is_identity_in_train_mode(self):
        rng = np.random.default_rng(1)
        x = np.random.default_rng(2).normal(size=20)
        out = nn.dropout_forward(x, nn.Dropout(0.0), "train", rng)
        assert np.array_equal(out, x)

    def test_rate_validation(self):
        with pytest.raises(InputError):
            nn.Dropout(1.0)
        with pytest.raises(InputError):
            nn.Dropout(-0.1)

    def test_same_seed_same_mask(self):
        x = np.ones(100)
        a = nn.dropout_forward(x, nn.Dropout(0.5), "train", np.random.default_rng(9))
        b = nn.dropout_forward(x, nn.Dropout(0.5), "train", np.random.default_rng(9))
        assert np.array_equal(a, b)


class TestSoftmaxXent:
    def test_uniform_logits_give_log_class_count(self):
        """Uniform logits over 500 classes -> loss = ln 500 = 6.2146..."""
        loss, grad = nn.softmax_xent(np.zeros(500), 7)
        assert abs(loss - np.log(500)) < 1e-9
        assert abs(loss - 6.214608098422191) < 1e-9

    def test_gradient_is_softmax_minus_one_hot(self):
        rng = np.random.default_rng(3)
        z = rng.normal(size=9)
        loss, grad = nn.softmax_xent(z, 4)
        p = nn.softmax(z)
        expect = p.copy()
        expect[4] -= 1.0
        assert np.allclose(grad, expect, atol=1e-12)

    def test_label_out_of_range_raises(self):
        with pytest.raises(InputError):
            nn.softmax_xent(np.zeros(5), 5)
        with pytest.raises(InputError):
            nn.softmax_xent(np.zeros(5), -1)

    @given(st.lists(st.floats(-50, 50, allow_nan=False), min_size=2, max_size=40))
    @settings(max_examples=60)
    def test_softmax_sums_to_one(self, logits):
        p = nn.softmax(np.array(logits, dtype=np.float64))
        assert abs(p.sum() - 1.0) < 1e-9
        assert (p >= 0).all()

    def test_batch_loss_is_mean_of_examples(self):
        rng = np.random.default_rng(6)
        z = rng.normal(size=(4, 6))
        y = np.array([0, 2, 5, 1])
        batch_loss, _ = nn.softmax_xent(z, y)
        singles = [nn.softmax_xent(z[i], int(y[i]))[0] for i in range(4)]
        assert abs(batch_loss - np.mean(singles)) < 1e-12

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(10)
        z = rng.normal(size=8)
        _, grad = nn.softmax_xent(z, 3)

        def loss():
            return nn.softmax_xent(z, 3)[0]

        num = numeric_grad(loss, z)
        assert np.max(np.abs(grad - num) / np.maximum(np.abs(num), 1e-8)) < 1e-6


class TestFullyConnected:
    def test_affine_map(self):
        x = np.array([1.0, 2.0])
        w = np.array([[1.0, 0.0, 2.0], [0.0, 1.0, -1.0]])
        b = np.array([0.5, -0.5, 0.0])
        assert np.array_equal(nn.fc_forward(x, w, b), np.array([1.5, 1.5, 0.0]))

    def test_width_mismatch_raises(self):
        with pytest.raises(ShapeError):
            nn.fc_forward(np.ones(3), np.ones((4, 2)), np.zeros(2))


class TestModelSpec:
    def test_shape_inference_through_desk_style_stack(self):
        spec = tiny_spec()
        shapes = spec.shapes()
        assert shapes[0] == (3, 8, 8)
        assert shapes[2] == (3, 4, 4)
        assert shapes[-2] == (5,)
        assert spec.num_weight_layers == 4

    def test_rejects_zero_extent_input(self):
        with pytest.raises(ShapeError):
            nn.ModelSpec((0, 8, 8), (nn.FullyConnected(2), nn.SoftmaxXent()))

    def test_rejects_pool_window_exceeding_feature_map(self):
        with pytest.raises(ShapeError):
            nn.ModelSpec((1, 4, 4), (nn.MaxPool(5, 1), nn.FullyConnected(2), nn.SoftmaxXent()))

    def test_rejects_missing_loss_layer(self):
        with pytest.raises(InputError):
            nn.ModelSpec((1, 4, 4), (nn.FullyConnected(2),))

    def test_hyperparameter_validation(self):
        with pytest.raises(InputError):
            nn.Conv(4, 0)
        with pytest.raises(InputError):
            nn.Conv(4, 3, stride=0)
        with pytest.raises(InputError):
            nn.MaxPool(2, 0)

    def test_describe_parse_roundtrip(self):
        spec = tiny_spec()
        again = nn.parse_spec(spec.describe())
        assert again == spec
        assert again.fingerprint() == spec.fingerprint()


class TestWholeModel:
    def test_forward_deterministic_given_seed(self):
        spec = tiny_spec()
        model = rand_model(spec, 0)
        x = np.random.default_rng(1).normal(size=(3, 1, 8, 8))
        a = nn.forward_logits(model, x, mode="train", rng=np.random.default_rng(5))
        b = nn.forward_logits(model, x, mode="train", rng=np.random.default_rng(5))
        assert np.array_equal(a, b)

    def test_outputs_finite_on_random_inputs(self):
        spec = tiny_spec()
        model = rand_model(spec, 2)
        x = np.random.default_rng(3).normal(size=(4, 1, 8, 8))
        loss, grads, logits = nn.loss_and_grads(model, x, np.array([0, 1, 2, 3]),
                                                mode="train", rng=np.random.default_rng(0))
        assert np.isfinite(loss)
        assert np.isfinite(logits).all()
        for g in grads:
            if g is not None:
                assert np.isfinite(g[0]).all() and np.isfinite(g[1]).all()

    def test_input_shape_mismatch_raises(self):
        model = rand_model(tiny_spec(), 0)
        with pytest.raises(ShapeError):
            nn.forward_logits(model, np.ones((1, 9, 9)))


class TestGradCheck:
    def test_full_stack_under_tolerance(self):
        """Conv, pool, lrn, relu, derandomized dropout, fc, softmax together."""
        for seed in range(3):
            assert nn.grad_check(tiny_spec(), seed) < 1e-4

    def test_fc_softmax_stack_is_tight(self):
        """The smooth dense sub-stack has no kinks, so the bound is much tighter."""
        spec = nn.ModelSpec((1, 4, 4), (
            nn.FullyConnected(12),
            nn.FullyConnected(6), nn.SoftmaxXent()))
        for seed in range(3):
            assert nn.grad_check(spec, seed) < 1e-6

    def test_frozen_layer_excluded_but_errors_unchanged(self):
        spec = tiny_spec()
        full = nn.grad_check_layers(spec, seed=1)
        part = nn.grad_check_layers(spec, seed=1, frozen=[1])
        assert "conv1" not in part
        for name, err in part.items():
            assert err == full[name]

    def test_oversized_model_rejected(self):
        spec = nn.ModelSpec((1, 12, 12), (
            nn.FullyConnected(100), nn.Relu(), nn.FullyConnected(50), nn.SoftmaxXent()))
        with pytest.raises(InputError):
            nn.grad_check(spec, 0)

    def test_nonfinite_weight_names_a_layer(self):
        spec = tiny_spec()
        model = rand_model(spec, 0)
        model.weight_states()[1].weights[0, 0, 0, 0] = np.inf
        with pytest.raises(NumericError) as exc:
            nn.grad_check_layers(spec, 0, model=model)
        assert "conv" in str(exc.value) or "fc" in str(exc.value)
