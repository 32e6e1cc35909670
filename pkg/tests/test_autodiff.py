import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradleak import autodiff as ad
from gradleak.autodiff import DimensionError, Tape, TapeError, Tensor, grad


def finite_diff(f, x, eps=1e-6):
    """Central finite differences of a scalar function of a flat vector."""
    g = np.zeros_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += eps
        xm[i] -= eps
        g[i] = (f(xp) - f(xm)) / (2 * eps)
    return g


def rel_err(a, b):
    denom = max(np.linalg.norm(b.ravel()), 1e-12)
    return np.linalg.norm(a.ravel() - b.ravel()) / denom


arrays = st.integers(2, 5).flatmap(
    lambda n: st.lists(
        st.floats(-3, 3, allow_nan=False, width=32), min_size=n, max_size=n
    )
)


class TestFirstOrder:
    def test_chain_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        w = rng.standard_normal((4, 3))

        def f(v):
            with Tape():
                x = Tensor(v.reshape(1, 3), requires_grad=True)
                h = ad.sigmoid(ad.matmul(x, Tensor(w.T)))
                out = ad.reduce_sum(ad.mul(h, h))
                if isinstance(v, np.ndarray) and f.capture:
                    (g,) = grad(out, [x])
                    f.grad = g.data.reshape(-1).copy()
            return out.item()

        v = rng.standard_normal(3)
        f.capture = True
        f.grad = None
        y = f(v)
        f.capture = False
        assert rel_err(f.grad, finite_diff(lambda u: f(u), v)) < 1e-6

    @given(arrays)
    @settings(max_examples=30, deadline=None)
    def test_gradient_of_sum_is_ones(self, vals):
        with Tape():
            x = Tensor(np.array(vals, dtype=np.float64), requires_grad=True)
            (g,) = grad(ad.reduce_sum(x), [x])
        assert np.array_equal(g.data, np.ones(len(vals)))

    @given(arrays, st.floats(-2, 2, allow_nan=False))
    @settings(max_examples=30, deadline=None)
    def test_grad_is_linear_in_scale(self, vals, c):
        x0 = np.array(vals, dtype=np.float64)
        with Tape():
            x = Tensor(x0, requires_grad=True)
            (g1,) = grad(ad.reduce_sum(ad.mul(x, x)), [x])
        with Tape():
            x = Tensor(x0, requires_grad=True)
            (g2,) = grad(ad.scale(ad.reduce_sum(ad.mul(x, x)), c), [x])
        assert np.allclose(g2.data, c * g1.data, atol=1e-12)

    def test_relu_and_exp_log(self):
        v = np.array([-1.5, 0.5, 2.0])
        with Tape():
            x = Tensor(v, requires_grad=True)
            y = ad.reduce_sum(ad.relu(x))
            (g,) = grad(y, [x])
        assert np.array_equal(g.data, (v > 0).astype(float))
        with Tape():
            x = Tensor(np.abs(v) + 0.5, requires_grad=True)
            (g,) = grad(ad.reduce_sum(ad.log(ad.exp(x))), [x])
        assert np.allclose(g.data, np.ones(3), atol=1e-12)

    def test_softmax_cross_entropy_matches_manual(self):
        rng = np.random.default_rng(1)
        z = rng.standard_normal((1, 7))
        with Tape():
            logits = Tensor(z, requires_grad=True)
            loss = ad.softmax_cross_entropy(logits, 3)
            (g,) = grad(loss, [logits])
        p = np.exp(z - z.max())
        p /= p.sum()
        expected = -np.log(p[0, 3])
        assert abs(loss.item() - expected) < 1e-12
        onehot = np.zeros((1, 7))
        onehot[0, 3] = 1
        assert np.allclose(g.data, p - onehot, atol=1e-12)


class TestConvAndPool:
    def test_conv2d_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        x0 = rng.standard_normal((1, 2, 6, 6))
        w = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)

        def f(v):
            with Tape():
                x = Tensor(v.reshape(1, 2, 6, 6), requires_grad=True)
                y = ad.conv2d(x, Tensor(w), stride=(2, 2), pad=(1, 1), bias=Tensor(b))
                out = ad.reduce_sum(ad.mul(y, y))
                if f.capture:
                    (g,) = grad(out, [x])
                    f.grad = g.data.reshape(-1).copy()
            return out.item()

        f.capture = True
        f(x0.reshape(-1))
        f.capture = False
        fd = finite_diff(lambda u: f(u), x0.reshape(-1).copy(), eps=1e-5)
        assert rel_err(f.grad, fd) < 1e-6

    def test_maxpool_routes_gradient_to_argmax(self):
        x0 = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
        with Tape():
            x = Tensor(x0, requires_grad=True)
            y = ad.maxpool2d(x, 2)
            (g,) = grad(ad.reduce_sum(y), [x])
        expected = np.zeros((1, 1, 4, 4))
        expected[0, 0, 1::2, 1::2] = 1
        assert np.array_equal(g.data, expected)


class TestHigherOrder:
    def test_double_backward_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        w0 = rng.standard_normal((3, 4))
        x = rng.standard_normal((1, 4))
        target = rng.standard_normal((3, 4))

        def first_grad(wv):
            with Tape():
                w = Tensor(wv.reshape(3, 4), requires_grad=True)
                y = ad.sigmoid(ad.matmul(Tensor(x), ad.transpose(w)))
                loss = ad.reduce_sum(ad.mul(y, y))
                (gw,) = grad(loss, [w], create_graph=True)
                d = ad.sub(gw, Tensor(target))
                match = ad.reduce_sum(ad.mul(d, d))
                (gg,) = grad(match, [w])
                first_grad.second = gg.data.reshape(-1).copy()
                return gw.data.reshape(-1).copy(), match.item()

        def match_of(wv):
            g, m = first_grad(wv)
            return m

        _, m0 = first_grad(w0.reshape(-1))
        second = first_grad.second
        fd = finite_diff(match_of, w0.reshape(-1).copy(), eps=1e-6)
        assert rel_err(second, fd) < 1e-5

    def test_create_graph_yields_differentiable_grads(self):
        with Tape():
            x = Tensor(np.array([2.0]), requires_grad=True)
            y = ad.mul(ad.mul(x, x), x)  # x^3
            (g,) = grad(ad.reduce_sum(y), [x], create_graph=True)
            (g2,) = grad(ad.reduce_sum(g), [x])
        assert abs(g.data[0] - 12.0) < 1e-12  # 3x^2
        assert abs(g2.data[0] - 12.0) < 1e-12  # 6x


class TestTapeDiscipline:
    def test_grad_outside_tape_raises(self):
        with Tape():
            x = Tensor(np.ones(3), requires_grad=True)
            y = ad.reduce_sum(x)
            grad(y, [x])
        with pytest.raises(TapeError):
            grad(y, [x])

    def test_shape_mismatch_raises(self):
        with Tape():
            a = Tensor(np.ones((2, 3)))
            b = Tensor(np.ones((4, 5)))
            with pytest.raises(DimensionError):
                ad.matmul(a, b)
            with pytest.raises(DimensionError):
                ad.add(a, b)


class TestSerialization:
    @given(arrays)
    @settings(max_examples=25, deadline=None)
    def test_binary_round_trip(self, vals):
        t = Tensor(np.array(vals, dtype=np.float64))
        back = ad.tensor_from_ften(ad.tensor_to_ften(t))
        assert back.shape == t.shape
        assert np.allclose(back.data, t.data.astype(np.float32), atol=0)

    def test_json_round_trip(self):
        t = Tensor(np.arange(12, dtype=np.float64).reshape(3, 4))
        back = ad.tensor_from_json(ad.tensor_to_json(t))
        assert back.shape == (3, 4)
        assert np.array_equal(back.data, t.data)

    def test_truncated_binary_rejected(self):
        t = Tensor(np.ones(5))
        blob = ad.tensor_to_ften(t)
        with pytest.raises(ValueError):
            ad.tensor_from_ften(blob[:-3])
