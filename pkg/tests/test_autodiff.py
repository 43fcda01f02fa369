import numpy as np
import pytest

import crossflow.autodiff as ad
from crossflow.autodiff import Tensor, backward, finite_diff_grad
from crossflow.errors import ContractError, DimensionError

from conftest import rel_err


def grad_of(build, *arrays, wrt=0):
    """Analytic gradient of sum(build(tensors)) w.r.t. one input array."""
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = build(*tensors).sum()
    backward(out)
    return tensors[wrt].grad


def fd_of(build, *arrays, wrt=0, h=1e-6):
    def f(x):
        args = [x if i == wrt else a for i, a in enumerate(arrays)]
        return build(*[Tensor(a) for a in args]).data.sum()
    return finite_diff_grad(f, arrays[wrt], h=h)


def check_grad(build, *arrays, wrt=0, tol=1e-6):
    err = rel_err(grad_of(build, *arrays, wrt=wrt), fd_of(build, *arrays, wrt=wrt))
    assert err < tol, f"gradient mismatch {err:.3e}"


class TestMatmul:
    def test_identity_right(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        out = ad.matmul(a, Tensor(np.eye(2)))
        np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])

    def test_identity_left(self):
        out = ad.matmul(Tensor(np.eye(2)), Tensor([[5.0], [6.0]]))
        np.testing.assert_array_equal(out.data, [[5], [6]])

    def test_matches_triple_loop(self, rng):
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 2))
        ref = np.zeros((3, 2))
        for i in range(3):
            for j in range(2):
                for k in range(4):
                    ref[i, j] += a[i, k] * b[k, j]
        out = ad.matmul(Tensor(a), Tensor(b))
        assert np.abs(out.data - ref).max() < 1e-12

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
            ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))


class TestConv2d:
    def test_zero_kernel(self, rng):
        x = rng.normal(size=(1, 4, 4))
        out = ad.conv2d(Tensor(x), Tensor(np.zeros((1, 1, 3, 3))), padding=1)
        assert (out.data == 0).all()

    def test_identity_kernel_is_exact_identity(self, rng):
        x = rng.normal(size=(1, 5, 6))
        k = np.zeros((1, 1, 3, 3))
        k[0, 0, 1, 1] = 1.0
        out = ad.conv2d(Tensor(x), Tensor(k), padding=1)
        np.testing.assert_array_equal(out.data, x)

    def test_matches_sliding_window_oracle(self, rng):
        x = rng.normal(size=(1, 5, 5))
        k = rng.normal(size=(1, 1, 3, 3))
        out = ad.conv2d(Tensor(x), Tensor(k), padding=1)
        xp = np.pad(x[0], 1)
        ref = np.zeros((5, 5))
        for i in range(5):
            for j in range(5):
                ref[i, j] = (xp[i:i + 3, j:j + 3] * k[0, 0]).sum()
        assert np.abs(out.data[0] - ref).max() < 1e-12

    def test_kernel_larger_than_padded_input(self):
        with pytest.raises(DimensionError):
            ad.conv2d(Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 1, 5, 5))),
                      padding=0)

    def test_even_kernel_rejected(self):
        with pytest.raises(ContractError):
            ad.conv2d(Tensor(np.zeros((1, 4, 4))), Tensor(np.zeros((1, 1, 2, 2))),
                      padding=1)


class TestSoftmax:
    def test_symmetric_row(self):
        out = ad.softmax_rows(Tensor([[0.0, 0.0]]))
        np.testing.assert_allclose(out.data, [[0.5, 0.5]], atol=1e-15)

    def test_analytic_row(self):
        out = ad.softmax_rows(Tensor([[0.0, np.log(3.0)]]))
        np.testing.assert_allclose(out.data, [[0.25, 0.75]], atol=1e-15)

    def test_rows_sum_to_one(self, rng):
        out = ad.softmax_rows(Tensor(rng.normal(size=(4, 6))))
        sums = out.data.sum(axis=-1)
        assert np.abs(sums - 1.0).max() < 1e-12

    def test_shift_invariance(self, rng):
        x = rng.normal(size=(3, 5))
        a = ad.softmax_rows(Tensor(x)).data
        b = ad.softmax_rows(Tensor(x + 100.0)).data
        assert np.abs(a - b).max() < 1e-12


class TestRelu:
    def test_definition(self):
        out = ad.relu(Tensor([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])

    def test_all_negative(self, rng):
        x = -np.abs(rng.normal(size=7)) - 0.1
        assert (ad.relu(Tensor(x)).data == 0).all()

    def test_nonnegative_unchanged(self, rng):
        x = np.abs(rng.normal(size=7))
        np.testing.assert_array_equal(ad.relu(Tensor(x)).data, x)


class TestRmsNorm:
    def test_constant_row(self):
        out = ad.rms_norm(Tensor([[2.0, 2.0, 2.0]]), Tensor(np.ones(3)), eps=1e-12)
        assert np.abs(out.data - 1.0).max() < 1e-12

    def test_zero_row_stays_zero(self):
        out = ad.rms_norm(Tensor([[0.0, 0.0]]), Tensor([3.0, 4.0]), eps=1e-12)
        np.testing.assert_array_equal(out.data, [[0.0, 0.0]])

    def test_closed_form(self):
        out = ad.rms_norm(Tensor([[3.0, 4.0]]), Tensor(np.ones(2)), eps=1e-12)
        expect = np.array([[3.0, 4.0]]) / np.sqrt(12.5)
        assert np.abs(out.data - expect).max() < 1e-12

    def test_scale_invariance(self, rng):
        # holds whenever c^2 * mean(x^2) dwarfs eps; test scales in that regime
        x = rng.normal(size=(4, 6))
        g = rng.normal(size=6)
        a = ad.rms_norm(Tensor(x), Tensor(g), eps=1e-12).data
        for c in (0.1, 0.5, 7.0, 1e4):
            b = ad.rms_norm(Tensor(c * x), Tensor(g), eps=1e-12).data
            assert rel_err(a, b) < 1e-9

    def test_eps_must_be_positive(self):
        with pytest.raises(ContractError):
            ad.rms_norm(Tensor([[1.0]]), Tensor([1.0]), eps=0.0)


class TestBackward:
    def test_scalar_passthrough(self):
        x = Tensor([2.5], requires_grad=True)
        backward(x.sum())
        np.testing.assert_array_equal(x.grad, [1.0])

    def test_relu_subgradient(self):
        x = Tensor([-1.0, 2.0], requires_grad=True)
        backward(ad.relu(x).sum())
        np.testing.assert_array_equal(x.grad, [0.0, 1.0])

    def test_non_scalar_root_rejected(self):
        with pytest.raises(ContractError):
            backward(Tensor([1.0, 2.0], requires_grad=True))

    def test_repeated_backward_accumulates(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        out = (x * 3.0).sum()
        backward(out)
        first = x.grad.copy()
        out2 = (x * 3.0).sum()
        backward(out2)
        np.testing.assert_array_equal(x.grad, 2 * first)


class TestFiniteDiff:
    def test_linear_function(self, rng):
        x = rng.normal(size=(3, 2))
        g = finite_diff_grad(lambda a: a.sum(), x)
        assert np.abs(g - 1.0).max() < 1e-8

    def test_quadratic(self):
        x = np.array([1.0, -2.0])
        g = finite_diff_grad(lambda a: 0.5 * (a ** 2).sum(), x)
        assert np.abs(g - x).max() < 1e-6

    def test_step_must_be_positive(self):
        with pytest.raises(ContractError):
            finite_diff_grad(lambda a: a.sum(), np.zeros(2), h=0.0)


class TestPrimitiveGradients:
    """Central-difference check of every primitive, rel. error < 1e-6."""

    def test_add_broadcast(self, rng):
        check_grad(lambda a, b: a + b, rng.normal(size=(3, 4)),
                   rng.normal(size=(4,)), wrt=1)

    def test_sub(self, rng):
        check_grad(lambda a, b: a - b, rng.normal(size=(3, 4)),
                   rng.normal(size=(3, 4)), wrt=1)

    def test_mul_broadcast(self, rng):
        check_grad(lambda a, b: a * b, rng.normal(size=(2, 3, 4)),
                   rng.normal(size=(3, 1)), wrt=1)

    def test_matmul_both_sides(self, rng):
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        check_grad(ad.matmul, a, b, wrt=0)
        check_grad(ad.matmul, a, b, wrt=1)

    def test_bmm_both_sides(self, rng):
        a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 2))
        check_grad(ad.bmm, a, b, wrt=0)
        check_grad(ad.bmm, a, b, wrt=1)

    def test_transpose(self, rng):
        check_grad(lambda a: ad.transpose(a, (1, 2, 0)) * 2.0,
                   rng.normal(size=(2, 3, 4)))

    def test_reshape(self, rng):
        check_grad(lambda a: ad.reshape(a, (6, 2)) * ad.reshape(a, (6, 2)),
                   rng.normal(size=(3, 4)))

    def test_concat(self, rng):
        a, b = rng.normal(size=(2, 3)), rng.normal(size=(2, 2))
        check_grad(lambda x, y: ad.concat([x, y], axis=1)
                   * ad.concat([x, y], axis=1), a, b, wrt=0)
        check_grad(lambda x, y: ad.concat([x, y], axis=1)
                   * ad.concat([x, y], axis=1), a, b, wrt=1)

    def test_index(self, rng):
        check_grad(lambda a: a[1] * a[1], rng.normal(size=(3, 4)))

    def test_gather_rows(self, rng):
        idx = np.array([0, 2, 2, 1])
        check_grad(lambda t: ad.gather_rows(t, idx) * ad.gather_rows(t, idx),
                   rng.normal(size=(3, 5)))

    def test_relu_away_from_kink(self, rng):
        x = rng.normal(size=(3, 4))
        x += 0.2 * np.sign(x)
        check_grad(ad.relu, x)

    def test_abs_away_from_kink(self, rng):
        x = rng.normal(size=(3, 4))
        x += 0.2 * np.sign(x)
        check_grad(ad.absval, x)

    def test_sigmoid(self, rng):
        check_grad(ad.sigmoid, rng.normal(size=(3, 4)))

    def test_sum_axis(self, rng):
        check_grad(lambda a: ad.tsum(a, axis=1) * ad.tsum(a, axis=1),
                   rng.normal(size=(3, 4)))

    def test_softmax_rows(self, rng):
        w = rng.normal(size=(3, 4))
        check_grad(lambda a: ad.softmax_rows(a) * w, rng.normal(size=(3, 4)))

    def test_masked_softmax(self, rng):
        mask = np.array([[1, 0, 1, 1], [1, 1, 0, 1], [0, 1, 1, 0]], dtype=float)
        w = rng.normal(size=(3, 4))
        check_grad(lambda a: ad.masked_softmax_rows(a, mask) * w,
                   rng.normal(size=(3, 4)))

    def test_rms_norm_x_and_gain(self, rng):
        x, g = rng.normal(size=(3, 4)), rng.normal(size=4)
        w = rng.normal(size=(3, 4))
        check_grad(lambda a, b: ad.rms_norm(a, b, eps=1e-8) * w, x, g, wrt=0)
        check_grad(lambda a, b: ad.rms_norm(a, b, eps=1e-8) * w, x, g, wrt=1)

    def test_layer_norm_all_inputs(self, rng):
        x = rng.normal(size=(3, 4))
        gain, bias = rng.normal(size=4), rng.normal(size=4)
        w = rng.normal(size=(3, 4))
        for wrt in range(3):
            check_grad(lambda a, b, c: ad.layer_norm(a, b, c, eps=1e-8) * w,
                       x, gain, bias, wrt=wrt)

    def test_conv2d_input_and_kernels(self, rng):
        x = rng.normal(size=(2, 2, 4, 5))
        k = rng.normal(size=(3, 2, 3, 3))
        w = rng.normal(size=(2, 3, 4, 5))
        check_grad(lambda a, b: ad.conv2d(a, b, padding=1) * w, x, k, wrt=0)
        check_grad(lambda a, b: ad.conv2d(a, b, padding=1) * w, x, k, wrt=1)

    def test_lagged_mean(self, rng):
        x = rng.normal(size=(5, 2, 3))
        w = rng.normal(size=(5, 2, 3))
        check_grad(lambda a: ad.lagged_mean(a, 2, axis=0) * w, x)
        check_grad(lambda a: ad.lagged_mean(a, 3, axis=1)
                   * ad.lagged_mean(a, 3, axis=1), x)


def test_random_composition_matches_finite_diff(rng):
    """Chain of many primitives against the central-difference oracle."""
    w1 = rng.normal(size=(4, 8))
    w2 = rng.normal(size=(8, 4))
    g = rng.normal(size=8)
    mask = (rng.random((3, 3)) > 0.3).astype(float)
    np.fill_diagonal(mask, 1.0)

    def build(x):
        h = ad.relu(ad.matmul(x, Tensor(w1)) + 0.1)
        h = ad.rms_norm(h, Tensor(g), eps=1e-8)
        h = ad.matmul(h, Tensor(w2))
        scores = ad.matmul(h, ad.transpose(h, (1, 0))) * (1.0 / 2.0)
        att = ad.relu(scores * Tensor(mask))
        out = ad.matmul(att, ad.sigmoid(h))
        return ad.absval(out).sum()

    x = rng.normal(size=(3, 4))
    xt = Tensor(x, requires_grad=True)
    backward(build(xt))
    fd = finite_diff_grad(lambda a: build(Tensor(a)).item(), x, h=1e-6)
    assert rel_err(xt.grad, fd) < 1e-4


def test_conv_identity_composition_is_bitwise(rng):
    x = rng.normal(size=(1, 6, 6))
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1.0
    out = ad.conv2d(ad.conv2d(Tensor(x), Tensor(k), 1), Tensor(k), 1)
    np.testing.assert_array_equal(out.data, x)


def test_determinism_same_inputs_bitwise(rng):
    x = rng.normal(size=(4, 4))
    a = ad.softmax_rows(ad.matmul(Tensor(x), Tensor(x))).data
    b = ad.softmax_rows(ad.matmul(Tensor(x), Tensor(x))).data
    np.testing.assert_array_equal(a, b)
