import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from audiotext import autodiff as ad
from audiotext.gradcheck import PRIMITIVE_TOL, primitive_cases


class TestMatmul:
    def test_identity(self):
        a = ad.Tensor(np.eye(2))
        b = ad.Tensor([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(ad.matmul(a, b).data, [[1, 2], [3, 4]])

    def test_hand_product(self):
        out = ad.matmul(ad.Tensor([[1.0, 2.0], [3.0, 4.0]]), ad.Tensor([[5.0], [6.0]]))
        np.testing.assert_array_equal(out.data, [[17.0], [39.0]])

    def test_inner_extent_mismatch(self):
        with pytest.raises(ad.ShapeError):
            ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((2, 3))))

    def test_backward_rules(self, float64_mode, rng):
        a = ad.parameter(rng.normal(size=(2, 3)))
        b = ad.parameter(rng.normal(size=(3, 4)))
        dc = rng.normal(size=(2, 4))
        ad.matmul(a, b).backward(dc)
        np.testing.assert_allclose(a.grad, dc @ b.data.T, atol=1e-12)
        np.testing.assert_allclose(b.grad, a.data.T @ dc, atol=1e-12)


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(ad.softmax(ad.Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-7)

    def test_ln2(self, float64_mode):
        out = ad.softmax(ad.Tensor([0.0, math.log(2.0)])).data
        np.testing.assert_allclose(out, [1 / 3, 2 / 3], atol=1e-12)

    def test_nan_rejected(self):
        with pytest.raises(ad.NumericError):
            ad.softmax(ad.Tensor([0.0, np.nan]))

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (3, 5), elements=st.floats(-30, 30)), st.floats(-50, 50))
    def test_shift_invariance(self, x, c):
        with ad.precision("float64"):
            np.testing.assert_allclose(ad.softmax(ad.Tensor(x)).data, ad.softmax(ad.Tensor(x + c)).data,
                                       atol=1e-10)

    def test_rows_sum_to_one_float32(self, rng):
        out = ad.softmax(ad.Tensor(rng.normal(scale=5.0, size=(64, 33))), axis=-1)
        assert out.data.dtype == np.float32
        np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-6)


class TestLayerNorm:
    def test_constant_row(self):
        out = ad.layer_norm(ad.Tensor([[5.0, 5.0, 5.0, 5.0]]), ad.Tensor(np.ones(4)), ad.Tensor(np.zeros(4)))
        np.testing.assert_array_equal(out.data, np.zeros((1, 4)))

    def test_unit_variance_row(self, float64_mode):
        out = ad.layer_norm(ad.Tensor([[-1.0, 1.0]]), ad.Tensor(np.ones(2)), ad.Tensor(np.zeros(2)))
        np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-4)

    def test_zero_gain(self, rng):
        bias = rng.normal(size=4)
        out = ad.layer_norm(ad.Tensor(rng.normal(size=(3, 4))), ad.Tensor(np.zeros(4)), ad.Tensor(bias))
        np.testing.assert_allclose(out.data, np.tile(bias, (3, 1)).astype(np.float32))


class TestSilu:
    def test_values(self, float64_mode):
        assert ad.silu(ad.Tensor([0.0])).data[0] == 0.0
        assert abs(ad.silu(ad.Tensor([1.0])).data[0] - 1.0 / (1.0 + math.exp(-1.0))) < 1e-12
        assert abs(ad.silu(ad.Tensor([1.0])).data[0] - 0.731059) < 1e-6
        assert abs(ad.silu(ad.Tensor([-100.0])).data[0]) < 1e-10


class TestL2Normalize:
    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (4, 6), elements=st.floats(-1e3, 1e3)))
    def test_unit_norm(self, x):
        norms = np.linalg.norm(x, axis=1)
        if np.any(norms < 1e-6):
            return
        with ad.precision("float64"):
            out = ad.l2_normalize(ad.Tensor(x)).data
        np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-6)

    def test_zero_input(self):
        with pytest.raises(ad.NumericError):
            ad.l2_normalize(ad.Tensor(np.zeros((2, 3))))


class TestGradCheck:
    def test_linear_is_exact(self, rng):
        c = np.array([1.5, -2.0, 0.75, 3.0, -1.25])
        for _ in range(20):
            err = ad.grad_check(lambda x: ad.tsum(ad.mul(x, c)), rng.normal(size=5))
            assert err < 1e-10

    def test_softmax_cross_entropy(self, rng):
        targets = np.array([1, 0, 4])
        err = ad.grad_check(lambda x: ad.cross_entropy_from_logits(x, targets), rng.normal(size=(3, 5)))
        assert err < 1e-4

    def test_non_finite_value(self):
        with pytest.raises(ad.NumericError):
            ad.grad_check(lambda x: ad.tsum(ad.mul(x, np.inf)), np.ones(2))

    @pytest.mark.parametrize("name", sorted(primitive_cases()))
    def test_primitive(self, name):
        shape, fn = primitive_cases()[name]
        rng = np.random.default_rng(abs(hash(name)) % 2**32)
        errs = [ad.grad_check(fn, rng.normal(size=shape)) for _ in range(10)]
        assert max(errs) < PRIMITIVE_TOL, name


class TestGraph:
    def test_linearity_of_backward(self, float64_mode, rng):
        w = rng.normal(size=(4, 3))
        x0 = rng.normal(size=(2, 4))

        def f1(x):
            return ad.tsum(ad.softmax(ad.matmul(x, ad.Tensor(w)), axis=-1) * w[:2, :3])

        def f2(x):
            return ad.mean(ad.silu(x))

        grads = []
        for fns in ((f1,), (f2,), (f1, f2)):
            x = ad.parameter(x0)
            total = fns[0](x)
            for f in fns[1:]:
                total = ad.add(total, f(x))
            total.backward()
            grads.append(x.grad)
        np.testing.assert_allclose(grads[2], grads[0] + grads[1], atol=1e-12, rtol=0)

    def test_shared_node_visited_once(self, float64_mode):
        x = ad.parameter([2.0])
        y = ad.mul(x, x)
        z = ad.add(y, y)  # d/dx 2x^2 = 4x
        z.backward()
        assert x.grad[0] == 8.0

    def test_leaves_get_grads(self, rng):
        a = ad.parameter(rng.normal(size=(2, 2)))
        b = ad.parameter(rng.normal(size=(2, 2)))
        ad.tsum(ad.matmul(a, b)).backward()
        assert a.grad.shape == a.shape and b.grad.shape == b.shape

    def test_no_grad_builds_no_graph(self):
        a = ad.parameter([1.0, 2.0])
        with ad.no_grad():
            out = ad.mul(a, a)
        assert not out.requires_grad and out._parents == ()

    def test_mode_dtypes(self):
        assert ad.Tensor([1.0]).data.dtype == np.float32
        with ad.precision("float64"):
            assert ad.Tensor([1.0]).data.dtype == np.float64
        assert ad.get_mode() == "float32"

    def test_check_finite(self):
        with pytest.raises(ad.NumericError):
            ad.Tensor([1.0, np.inf]).check_finite()
