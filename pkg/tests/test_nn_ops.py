import numpy as np
import pytest

from uniformer.nn import (
    BatchNorm3d,
    Conv3d,
    LayerNorm,
    Linear,
    Parameter,
    conv3d,
    drop_path,
    global_avg_pool,
    linear,
    trunc_normal,
)
from uniformer.tensor import Tensor, gradcheck

from oracles import conv3d_naive


def rnd(shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape)


class TestConv3d:
    def test_pointwise_identity_weight_is_channel_identity(self):
        x = rnd((2, 3, 2, 4, 4))
        w = np.eye(3).reshape(3, 3, 1, 1, 1)
        out = conv3d(Tensor(x), Tensor(w))
        np.testing.assert_allclose(out.data, x)

    def test_depthwise_center_delta_is_identity(self):
        x = rnd((1, 4, 3, 5, 5), 1)
        w = np.zeros((4, 1, 3, 3, 3))
        w[:, 0, 1, 1, 1] = 1.0
        out = conv3d(Tensor(x), Tensor(w), padding=(1, 1, 1), groups=4)
        np.testing.assert_allclose(out.data, x)

    def test_matches_nested_loop_oracle(self):
        x = rnd((1, 2, 4, 4, 4), 2)
        w = rnd((3, 2, 3, 3, 3), 3)
        b = rnd(3, 4)
        out = conv3d(Tensor(x), Tensor(w), Tensor(b), padding=(1, 1, 1)).data
        ref = conv3d_naive(x, w, b, padding=(1, 1, 1))
        assert np.abs(out - ref).max() < 1e-12

    def test_strided_grouped_matches_oracle(self):
        x = rnd((2, 4, 5, 6, 5), 5)
        w = rnd((6, 2, 2, 3, 1), 6)
        out = conv3d(Tensor(x), Tensor(w), stride=(2, 1, 2), padding=(0, 1, 0), groups=2).data
        ref = conv3d_naive(x, w, None, stride=(2, 1, 2), padding=(0, 1, 0), groups=2)
        assert np.abs(out - ref).max() < 1e-12

    def test_depthwise_equals_per_channel_correlation(self):
        x = rnd((1, 3, 2, 4, 4), 7)
        w = rnd((3, 1, 3, 3, 3), 8)
        out = conv3d(Tensor(x), Tensor(w), padding=(1, 1, 1), groups=3).data
        for c in range(3):
            single = conv3d_naive(
                x[:, c : c + 1], w[c : c + 1], None, padding=(1, 1, 1), groups=1
            )
            np.testing.assert_allclose(out[:, c : c + 1], single, atol=1e-12)

    def test_group_mismatch_error(self):
        with pytest.raises(ValueError, match="groups"):
            conv3d(Tensor(rnd((1, 3, 2, 2, 2))), Tensor(rnd((4, 1, 1, 1, 1))), groups=2)

    def test_nonpositive_output_extent_error(self):
        with pytest.raises(ValueError, match="non-positive"):
            conv3d(Tensor(rnd((1, 2, 2, 2, 2))), Tensor(rnd((2, 2, 3, 3, 3))))

    @pytest.mark.parametrize(
        "groups,stride,padding,kernel",
        [
            (1, (1, 1, 1), (1, 1, 1), (3, 3, 3)),
            (4, (1, 1, 1), (2, 2, 2), (5, 5, 5)),
            (2, (2, 2, 1), (0, 1, 1), (1, 3, 3)),
        ],
    )
    def test_gradcheck(self, groups, stride, padding, kernel):
        x = Tensor(rnd((2, 4, 4, 5, 5), 11))
        w = Tensor(rnd((4, 4 // groups, *kernel), 12))
        b = Tensor(rnd(4, 13))
        probe_holder = {}

        def f(xx, ww, bb):
            out = conv3d(xx, ww, bb, stride, padding, groups)
            if "p" not in probe_holder:
                probe_holder["p"] = Tensor(rnd(out.shape, 14))
            return (out * probe_holder["p"]).sum()

        rep = gradcheck(f, [x, w, b], max_checks_per_input=60, rng=np.random.default_rng(0))
        assert rep.passed, rep

    def test_module_output_shape_matches_forward(self):
        m = Conv3d(3, 8, (3, 4, 4), (2, 4, 4), (1, 0, 0), rng=np.random.default_rng(0))
        x = Tensor(rnd((1, 3, 8, 32, 32)))
        assert m(x).shape[1:] == m.output_shape((3, 8, 32, 32))


class TestBatchNorm:
    def test_constant_per_channel_train_output_is_shift(self):
        bn = BatchNorm3d(3)
        bn.shift.data[:] = [1.0, -2.0, 0.5]
        x = np.broadcast_to(np.array([4.0, 5.0, 6.0]).reshape(1, 3, 1, 1, 1), (2, 3, 2, 2, 2)).copy()
        out = bn(Tensor(x)).data
        for c, want in enumerate([1.0, -2.0, 0.5]):
            np.testing.assert_allclose(out[:, c], want, atol=1e-12)

    def test_unit_gaussian_passthrough(self):
        x = rnd((4, 2, 4, 8, 8), 3)
        x = (x - x.mean(axis=(0, 2, 3, 4), keepdims=True)) / x.std(axis=(0, 2, 3, 4), keepdims=True)
        out = BatchNorm3d(2)(Tensor(x)).data
        np.testing.assert_allclose(out, x, atol=1e-4)

    def test_train_statistics_normalized_before_affine(self):
        bn = BatchNorm3d(3)  # identity affine by construction
        out = bn(Tensor(rnd((2, 3, 3, 4, 4), 4))).data
        mu = out.mean(axis=(0, 2, 3, 4))
        var = out.var(axis=(0, 2, 3, 4))
        assert np.abs(mu).max() < 1e-10
        assert np.abs(var - 1.0).max() < 1e-4  # eps shrinks variance slightly

    def test_eval_uses_default_running_stats(self):
        bn = BatchNorm3d(2).eval()
        x = rnd((1, 2, 2, 2, 2), 5)
        out = bn(Tensor(x)).data
        np.testing.assert_allclose(out, x / np.sqrt(1 + bn.eps), atol=1e-12)

    def test_running_stats_track_batches(self):
        bn = BatchNorm3d(1, momentum=0.5)
        x = np.full((1, 1, 2, 2, 2), 3.0)
        bn(Tensor(x))
        np.testing.assert_allclose(bn.running_mean, [1.5])

    def test_too_few_values_error(self):
        with pytest.raises(ValueError, match="at least 2"):
            BatchNorm3d(3)(Tensor(rnd((1, 3, 1, 1, 1))))

    def test_gradcheck_train_mode(self):
        bn = BatchNorm3d(2)
        x = Tensor(rnd((2, 2, 2, 3, 3), 6))
        probe = Tensor(rnd((2, 2, 2, 3, 3), 7))
        rep = gradcheck(
            lambda xx, s, sh: (bn(xx) * probe).sum(),
            [x, bn.scale, bn.shift],
            max_checks_per_input=40,
            rng=np.random.default_rng(1),
        )
        assert rep.passed, rep


class TestLayerNorm:
    def test_equal_channels_give_zero_pre_affine(self):
        ln = LayerNorm(4)
        x = np.broadcast_to(rnd((2, 1, 2, 2, 2), 8), (2, 4, 2, 2, 2)).copy()
        np.testing.assert_allclose(ln(Tensor(x)).data, 0.0, atol=1e-3)

    def test_per_token_constant_shift_invariance(self):
        ln = LayerNorm(6)
        x = rnd((2, 6, 2, 3, 3), 9)
        shift = rnd((2, 1, 2, 3, 3), 10)  # one constant per token
        a = ln(Tensor(x)).data
        b = ln(Tensor(x + np.broadcast_to(shift, x.shape))).data
        np.testing.assert_allclose(a, b, atol=1e-9)

    def test_gradcheck(self):
        ln = LayerNorm(3)
        x = Tensor(rnd((2, 3, 2, 2, 2), 11))
        probe = Tensor(rnd((2, 3, 2, 2, 2), 12))
        rep = gradcheck(
            lambda xx, s, sh: (ln(xx) * probe).sum(),
            [x, ln.scale, ln.shift],
            max_checks_per_input=40,
            rng=np.random.default_rng(2),
        )
        assert rep.passed and rep.max_rel_err < 1e-5

    def test_channel_mismatch_error(self):
        with pytest.raises(ValueError, match="layernorm"):
            LayerNorm(4)(Tensor(rnd((1, 3, 2, 2, 2))))


class TestActivations:
    def test_gelu_zero(self):
        assert Tensor(np.array([0.0])).gelu().item() == 0.0

    def test_gelu_tanh_form(self):
        x = rnd(100, 13)
        want = 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x**3)))
        np.testing.assert_allclose(Tensor(x).gelu().data, want)

    def test_linear_matches_manual(self):
        x, w, b = rnd((5, 3), 14), rnd((3, 2), 15), rnd(2, 16)
        out = linear(Tensor(x), Tensor(w), Tensor(b)).data
        np.testing.assert_allclose(out, x @ w + b)

    def test_linear_module_tokens(self):
        m = Linear(3, 4, rng=np.random.default_rng(3))
        x = rnd((2, 5, 3), 17)
        out = m(Tensor(x)).data
        np.testing.assert_allclose(out, x @ m.weight.data + m.bias.data)

    def test_global_avg_pool(self):
        x = rnd((2, 3, 2, 4, 4), 18)
        np.testing.assert_allclose(global_avg_pool(Tensor(x)).data, x.mean(axis=(2, 3, 4)))
        rep = gradcheck(lambda t: global_avg_pool(t).sum(), [Tensor(rnd((1, 2, 2, 2, 2)))])
        assert rep.passed


class TestDropPath:
    def test_rate_zero_identity_both_modes(self):
        x = Tensor(rnd((4, 3, 2, 2, 2), 19))
        for training in (True, False):
            out = drop_path(x, 0.0, training, np.random.default_rng(0))
            np.testing.assert_array_equal(out.data, x.data)

    def test_eval_identity_any_rate(self):
        x = Tensor(rnd((4, 3, 2, 2, 2), 20))
        np.testing.assert_array_equal(drop_path(x, 0.9, False).data, x.data)

    def test_invalid_rate(self):
        x = Tensor(rnd((2, 2, 2, 2, 2)))
        for rate in (-0.1, 1.0, 1.5):
            with pytest.raises(ValueError, match="rate"):
                drop_path(x, rate, True, np.random.default_rng(0))

    def test_per_sample_granularity(self):
        x = Tensor(np.ones((64, 2, 2, 2, 2)))
        out = drop_path(x, 0.5, True, np.random.default_rng(21)).data
        per_sample = out.reshape(64, -1)
        # each sample is either fully dropped or fully kept and rescaled
        assert all(len(np.unique(row)) == 1 for row in per_sample)
        assert set(np.unique(per_sample)) <= {0.0, 2.0}

    def test_expectation_within_one_percent(self):
        rng = np.random.default_rng(22)
        x = Tensor(np.full((100_000, 1, 1, 1, 1), 3.0))
        out = drop_path(x, 0.3, True, rng).data
        assert abs(out.mean() - 3.0) / 3.0 < 0.01

    def test_train_gradient_masks_dropped_samples(self):
        x = Tensor(rnd((8, 2, 1, 2, 2), 23))
        rep = gradcheck(
            lambda t: drop_path(t, 0.5, True, np.random.default_rng(7)).sum(), [x]
        )
        assert rep.passed


class TestInit:
    def test_trunc_normal_bounds_and_determinism(self):
        a = trunc_normal(np.random.default_rng(5), (1000,), std=0.02)
        b = trunc_normal(np.random.default_rng(5), (1000,), std=0.02)
        np.testing.assert_array_equal(a, b)
        assert np.abs(a).max() <= 0.04 + 1e-12

    def test_parameter_decay_flag(self):
        p = Parameter(np.zeros(3), decay=False)
        assert p.requires_grad and not p.decay
