"""Autodiff engine: primitive ops, gradients vs central differences,
numerical-stability properties, determinism."""

import mpmath
import numpy as np
import pytest

from cdvit import autodiff as ad
from cdvit import nn
from cdvit.autodiff import Tensor, backward, finite_diff_check, no_grad
from cdvit.errors import ConfigError, ShapeError


def central_diff(f, x, idx, h=1e-5):
    """Independent finite-difference oracle used to cross-check the
    package's own checker on selected ops."""
    orig = x.data[idx]
    x.data[idx] = orig + h
    f_plus = float(f().data)
    x.data[idx] = orig - h
    f_minus = float(f().data)
    x.data[idx] = orig
    return (f_plus - f_minus) / (2 * h)


class TestMatmul:
    def test_identity(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(3, 3))
        out = Tensor(np.eye(3)) @ Tensor(a)
        np.testing.assert_array_equal(out.data, a)

    def test_hand_case(self):
        out = Tensor([[1.0, 2.0], [3.0, 4.0]]) @ Tensor([[0.0], [1.0]])
        np.testing.assert_array_equal(out.data, [[2.0], [4.0]])

    def test_gradient_vs_central_differences(self):
        rng = np.random.default_rng(1)
        a = nn.param(rng.normal(size=(4, 5)))
        b = nn.param(rng.normal(size=(5, 3)))

        def f():
            return (a @ b).sum()

        loss = f()
        backward(loss)
        for idx in [(0, 0), (2, 3), (3, 4)]:
            num = central_diff(f, a, idx)
            assert abs(a.grad[idx] - num) / max(abs(num), 1e-9) < 1e-6
        assert finite_diff_check(f, [a, b], samples=20) < 1e-6

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            Tensor(np.zeros((2, 3))) @ Tensor(np.zeros((2, 3)))

    def test_batched_broadcast_gradient(self):
        rng = np.random.default_rng(2)
        a = nn.param(rng.normal(size=(3, 2, 4, 5)))
        b = nn.param(rng.normal(size=(5, 3)))
        err = finite_diff_check(lambda: ((a @ b) * (a @ b)).sum(), [a, b],
                                samples=25)
        assert err < 1e-5


class TestSoftmax:
    def test_uniform(self):
        out = ad.softmax(Tensor([0.0, 0.0, 0.0, 0.0]), axis=-1)
        np.testing.assert_array_equal(out.data, [0.25, 0.25, 0.25, 0.25])

    def test_large_inputs_no_overflow(self):
        out = ad.softmax(Tensor([1000.0, 1000.0]), axis=-1)
        np.testing.assert_array_equal(out.data, [0.5, 0.5])

    def test_matches_extended_precision(self):
        rng = np.random.default_rng(3)
        x = rng.normal(scale=3.0, size=8)
        out = ad.softmax(Tensor(x), axis=-1).data
        with mpmath.workdps(50):
            exps = [mpmath.e ** v for v in x]
            total = mpmath.fsum(exps)
            expected = np.array([float(e / total) for e in exps])
        np.testing.assert_allclose(out, expected, rtol=0, atol=1e-15)
        assert abs(out.sum() - 1.0) < 1e-12

    def test_rows_sum_to_one_and_bounded(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            x = Tensor(rng.normal(scale=10, size=(5, 7)))
            y = ad.softmax(x, axis=-1).data
            np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)
            assert (y >= 0).all() and (y <= 1).all()

    def test_gradient(self):
        rng = np.random.default_rng(5)
        x = nn.param(rng.normal(size=(3, 6)))
        w = Tensor(rng.normal(size=(3, 6)))
        err = finite_diff_check(lambda: (ad.softmax(x, axis=-1) * w).sum(), [x],
                                samples=20)
        assert err < 1e-5


class TestLayerNorm:
    def test_constant_row_maps_to_zero(self):
        out = ad.layer_norm(Tensor([[5.0, 5.0, 5.0]]), Tensor(np.ones(3)),
                            Tensor(np.zeros(3)))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_already_normalized_row(self):
        out = ad.layer_norm(Tensor([[1.0, -1.0]]), Tensor(np.ones(2)),
                            Tensor(np.zeros(2)), eps=1e-6)
        np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-6)

    def test_normalization_property(self):
        rng = np.random.default_rng(6)
        x = Tensor(rng.normal(loc=3.0, scale=2.0, size=(10, 16)))
        y = ad.layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16))).data
        assert np.abs(y.mean(axis=-1)).max() < 1e-10
        assert np.abs(y.var(axis=-1) - 1.0).max() < 1e-6

    def test_gradient(self):
        rng = np.random.default_rng(7)
        x = nn.param(rng.normal(size=(3, 6)))
        g = nn.param(rng.normal(size=6))
        b = nn.param(rng.normal(size=6))
        w = Tensor(rng.normal(size=(3, 6)))

        def f():
            return (ad.layer_norm(x, g, b) * w).sum()

        assert finite_diff_check(f, [x, g, b], samples=30) < 1e-5


class TestMha:
    def test_single_key_attention_is_one(self):
        rng = np.random.default_rng(8)
        p = nn.attn_params(rng, 4, 2)
        x = Tensor(rng.normal(size=(1, 4)))
        _, attn = nn.mha(x, x, 2, p)
        np.testing.assert_array_equal(attn.data, np.ones((2, 1, 1)))

    def test_uniform_attention_returns_row_mean(self):
        rng = np.random.default_rng(9)
        p = nn.attn_params(rng, 4, 2)
        for name in ("wq", "wk"):
            p[name].data[...] = 0.0
        p["wv"].data[...] = np.eye(4)
        p["wo"].data[...] = np.eye(4)
        x = rng.normal(size=(5, 4))
        out, attn = nn.mha(Tensor(x), Tensor(x), 2, p)
        np.testing.assert_allclose(out.data, np.tile(x.mean(axis=0), (5, 1)),
                                   atol=1e-12)
        np.testing.assert_allclose(attn.data, 0.2, atol=1e-15)

    def test_gradient(self):
        rng = np.random.default_rng(10)
        p = nn.attn_params(rng, 4, 2)
        x = nn.param(rng.normal(size=(3, 4)))
        w = Tensor(rng.normal(size=(3, 4)))

        def f():
            out, _ = nn.mha(x, x, 2, p)
            return (out * w).sum()

        assert finite_diff_check(f, [x] + list(p.values()), samples=40) < 1e-5

    def test_width_not_divisible_by_heads(self):
        rng = np.random.default_rng(11)
        with pytest.raises(ConfigError):
            nn.attn_params(rng, 5, 2)
        p = nn.attn_params(rng, 4, 2)
        with pytest.raises(ConfigError):
            nn.mha(Tensor(np.zeros((2, 6))), Tensor(np.zeros((2, 6))), 4, p)


class TestMlpAndGelu:
    def test_zero_weights_zero_output(self):
        p = {"w1": Tensor(np.zeros((4, 8))), "b1": Tensor(np.zeros(8)),
             "w2": Tensor(np.zeros((8, 4))), "b2": Tensor(np.zeros(4))}
        out = nn.mlp_block(Tensor(np.random.default_rng(0).normal(size=(3, 4))), p)
        np.testing.assert_array_equal(out.data, np.zeros((3, 4)))

    def test_gelu_asymptotes(self):
        assert float(ad.gelu(Tensor(0.0)).data) == 0.0
        x = np.array([8.0, 12.0, 20.0])
        np.testing.assert_allclose(ad.gelu(Tensor(x)).data, x, rtol=1e-12)
        np.testing.assert_allclose(ad.gelu(Tensor(-x)).data, 0.0, atol=1e-12)

    def test_gradient(self):
        rng = np.random.default_rng(12)
        p = nn.mlp_params(rng, 4, 2)
        x = nn.param(rng.normal(size=(3, 4)))

        def f():
            y = nn.mlp_block(x, p)
            return (y * y).sum()

        assert finite_diff_check(f, [x] + list(p.values()), samples=30) < 1e-5


class TestBackward:
    def test_sum_gradient_is_ones(self):
        x = nn.param(np.arange(6.0).reshape(2, 3))
        backward(x.sum())
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_square_gradient(self):
        x = nn.param(np.arange(1.0, 5.0))
        backward((x * x).sum())
        np.testing.assert_allclose(x.grad, 2 * x.data)

    def test_non_scalar_loss_rejected(self):
        x = nn.param(np.ones((2, 2)))
        with pytest.raises(ShapeError):
            backward(x * 2)

    def test_gradient_accumulates_across_reuse(self):
        x = nn.param(np.array([3.0]))
        y = x * x + x * 5.0
        backward(y.sum())
        np.testing.assert_allclose(x.grad, [11.0])


class TestFiniteDiffCheck:
    def test_linear_function_error_is_tiny(self):
        x = nn.param(np.random.default_rng(13).normal(size=(4, 4)))
        assert finite_diff_check(lambda: x.sum(), [x], samples=10) < 1e-10

    def test_quadratic_at_ones(self):
        x = nn.param(np.ones(5))
        err = finite_diff_check(lambda: (x * x).sum(), [x], samples=10)
        assert err < 1e-9
        np.testing.assert_allclose(x.grad, 2.0)


class TestElementwiseGradients:
    @pytest.mark.parametrize("op,domain", [
        (ad.exp, (-2, 2)),
        (ad.log, (0.5, 3)),
        (ad.sqrt, (0.5, 3)),
        (ad.sigmoid, (-4, 4)),
        (ad.gelu, (-3, 3)),
    ])
    def test_unary(self, op, domain):
        rng = np.random.default_rng(hash(op.__name__) % 2 ** 31)
        x = nn.param(rng.uniform(*domain, size=(3, 4)))
        w = Tensor(rng.normal(size=(3, 4)))
        err = finite_diff_check(lambda: (op(x) * w).sum(), [x], samples=20)
        assert err < 1e-5

    def test_div(self):
        rng = np.random.default_rng(14)
        a = nn.param(rng.normal(size=(3, 4)))
        b = nn.param(rng.uniform(0.5, 2.0, size=(3, 4)))
        err = finite_diff_check(lambda: ((a / b) * (a / b)).sum(), [a, b],
                                samples=25)
        assert err < 1e-5

    def test_clip_passes_gradient_inside_only(self):
        x = nn.param(np.array([-2.0, 0.5, 2.0]))
        backward(ad.clip(x, -1.0, 1.0).sum())
        np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])

    def test_log_softmax_gradient(self):
        rng = np.random.default_rng(15)
        x = nn.param(rng.normal(size=(2, 6)))
        w = Tensor(rng.normal(size=(2, 6)))
        err = finite_diff_check(lambda: (ad.log_softmax(x, axis=-1) * w).sum(),
                                [x], samples=20)
        assert err < 1e-5


class TestStructuralOps:
    def test_concat_getitem_transpose_reshape_gradients(self):
        rng = np.random.default_rng(16)
        a = nn.param(rng.normal(size=(2, 3)))
        b = nn.param(rng.normal(size=(2, 2)))

        def f():
            joined = ad.concat([a, b], axis=1)  # (2, 5)
            t = joined.transpose((1, 0)).reshape(10)
            return (t[2:7] * t[2:7]).sum()

        assert finite_diff_check(f, [a, b], samples=20) < 1e-5

    def test_sorted_sum_matches_sum_and_is_permutation_stable(self):
        rng = np.random.default_rng(17)
        x = rng.normal(size=(40, 3))
        base = ad.sorted_sum(Tensor(x), axis=0).data
        for _ in range(5):
            perm = rng.permutation(40)
            np.testing.assert_array_equal(
                ad.sorted_sum(Tensor(x[perm]), axis=0).data, base)
        np.testing.assert_allclose(base, x.sum(axis=0), rtol=1e-12)
        p = nn.param(x)
        backward(ad.sorted_sum(p, axis=0).sum())
        np.testing.assert_array_equal(p.grad, np.ones_like(x))


class TestGradMode:
    def test_no_grad_blocks_recording(self):
        x = nn.param(np.ones(3))
        with no_grad():
            y = (x * x).sum()
        assert not y.requires_grad
        backward(ad.as_tensor(y))  # no-op, must not raise
        np.testing.assert_array_equal(x.grad, 0.0)

    def test_teacher_style_isolation(self):
        x = nn.param(np.ones(3))
        frozen = nn.param(np.full(3, 2.0))
        with no_grad():
            target = frozen * 3.0
        loss = ((x - Tensor(target.data)) * (x - Tensor(target.data))).sum()
        backward(loss)
        np.testing.assert_array_equal(frozen.grad, 0.0)


class TestDeterminism:
    def test_identical_seeds_bitwise_identical(self):
        def run():
            rng = np.random.default_rng(42)
            x = nn.param(rng.normal(size=(6, 6)))
            w = nn.param(rng.normal(size=(6, 6)))
            y = ad.layer_norm(ad.gelu(x @ w), Tensor(np.ones(6)),
                              Tensor(np.zeros(6)))
            loss = (ad.softmax(y, axis=-1) * y).sum()
            backward(loss)
            return loss.data.copy(), x.grad.copy(), w.grad.copy()

        l1, gx1, gw1 = run()
        l2, gx2, gw2 = run()
        assert np.array_equal(l1, l2)
        assert np.array_equal(gx1, gx2)
        assert np.array_equal(gw1, gw2)