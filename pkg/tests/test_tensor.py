import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lfsr import tensor as T
from lfsr.optim import AdamState, NonFiniteGradient, adam_step
from lfsr.tensor import Tensor, backward

from conftest import check_grad, numeric_grad, rel_err


def direct_conv(x, w, b, stride, pad):
    """Six nested loops, no vectorisation."""
    n, c, hgt, wid = x.shape
    f, _, kh, kw = w.shape
    ph, pw = (kh // 2, kw // 2) if pad == "same" else (0, 0)
    ho = (hgt + 2 * ph - kh) // stride + 1
    wo = (wid + 2 * pw - kw) // stride + 1
    out = np.zeros((n, f, ho, wo))
    for b_ in range(n):
        for o in range(f):
            for y in range(ho):
                for x_ in range(wo):
                    acc = b[o]
                    for ch in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                yy, xx = y * stride + i - ph, x_ * stride + j - pw
                                if 0 <= yy < hgt and 0 <= xx < wid:
                                    acc += x[b_, ch, yy, xx] * w[o, ch, i, j]
                    out[b_, o, y, x_] = acc
    return out


def window_scan_maxpool(x, k, s):
    n, c, hgt, wid = x.shape
    ho, wo = (hgt - k) // s + 1, (wid - k) // s + 1
    out = np.zeros((n, c, ho, wo))
    route = np.zeros_like(x)
    for b in range(n):
        for ch in range(c):
            for y in range(ho):
                for x_ in range(wo):
                    best, pos = -np.inf, None
                    for i in range(k):
                        for j in range(k):
                            v = x[b, ch, y * s + i, x_ * s + j]
                            if v > best:
                                best, pos = v, (y * s + i, x_ * s + j)
                    out[b, ch, y, x_] = best
                    route[b, ch, pos[0], pos[1]] += 1
    return out, route


class TestConv2d:
    def test_box_sum_of_ones(self):
        out = T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)))
        assert out.data[0, 0, 1, 1] == 9.0
        assert out.data[0, 0, 0, 0] == 4.0 and out.data[0, 0, 2, 2] == 4.0

    def test_identity_kernel(self, rng):
        x = rng.normal(size=(2, 1, 6, 5))
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1.0
        assert np.array_equal(T.conv2d(Tensor(x), Tensor(w)).data, x)

    def test_matches_direct_loops(self, rng):
        x = rng.normal(size=(1, 2, 5, 5))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        got = T.conv2d(Tensor(x), Tensor(w), Tensor(b)).data
        assert np.max(np.abs(got - direct_conv(x, w, b, 1, "same"))) < 1e-12

    @pytest.mark.parametrize("n,c,hw,f,k,stride,pad", [
        (2, 3, 9, 2, 3, 1, "same"), (2, 3, 9, 4, 5, 2, "same"), (1, 2, 7, 3, 3, 1, "valid"),
        (2, 1, 8, 2, 1, 1, "same"), (1, 3, 9, 2, 3, 3, "valid"), (2, 3, 8, 3, 3, 2, "same"),
    ])
    def test_equivalence_suite(self, rng, n, c, hw, f, k, stride, pad):
        x = rng.normal(size=(n, c, hw, hw))
        w = rng.normal(size=(f, c, k, k))
        b = rng.normal(size=f)
        got = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, pad=pad).data
        assert np.max(np.abs(got - direct_conv(x, w, b, stride, pad))) < 1e-12

    @pytest.mark.parametrize("stride", [1, 2])
    def test_gradient(self, rng, stride):
        x = rng.normal(size=(2, 2, 5, 5))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        err = check_grad(lambda a, ww, bb: T.conv2d(a, ww, bb, stride=stride), [x, w, b])
        assert err < 1e-6

    def test_errors(self, rng):
        with pytest.raises(T.ShapeError, match="channels"):
            T.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))
        with pytest.raises(T.ShapeError, match="odd"):
            T.conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 2, 2))))


class TestBatchNorm:
    def _stats(self):
        return np.zeros(2), np.ones(2)

    def test_normalizes(self, rng):
        x = 5.0 + 2.0 * rng.normal(size=(4, 2, 6, 6))
        rm, rv = self._stats()
        out = T.batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), True, rm, rv, eps=1e-12).data
        assert np.all(np.abs(out.mean(axis=(0, 2, 3))) < 1e-10)
        assert np.all(np.abs(out.var(axis=(0, 2, 3)) - 1.0) < 1e-8)

    def test_default_eps_shrinks_variance(self, rng):
        x = rng.normal(size=(4, 2, 6, 6))
        rm, rv = self._stats()
        out = T.batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), True, rm, rv).data
        v = x.var(axis=(0, 2, 3))
        np.testing.assert_allclose(out.var(axis=(0, 2, 3)), v / (v + 1e-5), rtol=1e-12)

    def test_running_stats_momentum(self, rng):
        x = 3.0 + rng.normal(size=(4, 2, 5, 5))
        rm, rv = self._stats()
        T.batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), True, rm, rv)
        np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)), rtol=1e-12)
        np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3)), rtol=1e-12)

    def test_gamma_zero_gives_beta(self, rng):
        x = rng.normal(size=(2, 2, 3, 3))
        rm, rv = self._stats()
        out = T.batchnorm2d(Tensor(x), Tensor(np.zeros(2)), Tensor(np.array([0.5, -1.0])), True, rm, rv).data
        assert np.all(out[:, 0] == 0.5) and np.all(out[:, 1] == -1.0)

    def test_eval_uses_running_stats(self, rng):
        x = rng.normal(size=(2, 2, 3, 3))
        rm, rv = np.array([1.0, -1.0]), np.array([4.0, 0.25])
        out = T.batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), False, rm, rv, eps=0.0).data
        np.testing.assert_allclose(out[:, 0], (x[:, 0] - 1.0) / 2.0)
        np.testing.assert_allclose(out[:, 1], (x[:, 1] + 1.0) / 0.5)

    @pytest.mark.parametrize("training", [True, False])
    def test_gradient(self, rng, training):
        x = rng.normal(size=(3, 2, 4, 4))
        g = rng.normal(size=2)
        b = rng.normal(size=2)

        def op(a, gg, bb):
            rm, rv = np.array([0.1, -0.2]), np.array([1.5, 0.7])
            return T.batchnorm2d(a, gg, bb, training, rm, rv)

        assert check_grad(op, [x, g, b]) < 1e-4

    def test_single_element_rejected(self):
        rm, rv = np.zeros(1), np.ones(1)
        with pytest.raises(ValueError, match="variance undefined"):
            T.batchnorm2d(Tensor(np.ones((1, 1, 1, 1))), Tensor(np.ones(1)), Tensor(np.zeros(1)), True, rm, rv)


class TestActivations:
    def test_values(self):
        assert T.prelu(Tensor(np.array([[-2.0]])), Tensor(np.array(0.25))).data[0, 0] == -0.5
        assert T.sigmoid(Tensor(0.0)).item() == 0.5
        assert T.leaky_relu(Tensor(np.array([-1.0, 2.0]))).data.tolist() == [-0.2, 2.0]
        assert T.relu(Tensor(np.array([-1.0, 0.0, 3.0]))).data.tolist() == [0.0, 0.0, 3.0]

    def test_relu_kink_subgradient_zero(self):
        x = Tensor(np.array([0.0, 1.0]), requires_grad=True)
        backward(T.sum(T.relu(x)))
        assert x.grad.tolist() == [0.0, 1.0]

    @pytest.mark.parametrize("seed", range(5))
    def test_gradients(self, seed):
        r = np.random.default_rng(seed)
        x = r.normal(size=(2, 3, 4, 4))
        x = np.where(np.abs(x) < 0.05, 0.1, x)  # stay away from kinks
        a = r.uniform(0.1, 0.4, size=3)
        assert check_grad(lambda t, al: T.prelu(t, al), [x, a]) < 1e-4
        assert check_grad(T.relu, [x]) < 1e-4
        assert check_grad(T.leaky_relu, [x]) < 1e-4
        assert check_grad(T.sigmoid, [x]) < 1e-4
        assert check_grad(T.tanh, [x]) < 1e-4


class TestMaxPool:
    def test_simple(self):
        out = T.maxpool2d(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])))
        assert out.data.tolist() == [[[[4.0]]]]

    def test_constant_ties_route_to_first(self):
        x = Tensor(np.full((1, 1, 4, 4), 7.0), requires_grad=True)
        out = T.maxpool2d(x)
        assert np.all(out.data == 7.0)
        backward(T.sum(out))
        expected = np.zeros((4, 4))
        expected[::2, ::2] = 1.0
        assert np.array_equal(x.grad[0, 0], expected)

    def test_window_scan_oracle(self, rng):
        x = rng.normal(size=(1, 1, 8, 8))
        ref, route = window_scan_maxpool(x, 2, 2)
        xt = Tensor(x, requires_grad=True)
        out = T.maxpool2d(xt)
        assert np.array_equal(out.data, ref)
        backward(T.sum(out))
        assert np.array_equal(xt.grad, route)

    def test_gradient(self, rng):
        x = rng.permutation(np.arange(2 * 2 * 6 * 6, dtype=float)).reshape(2, 2, 6, 6) / 10
        assert check_grad(T.maxpool2d, [x]) < 1e-6

    def test_indivisible(self):
        with pytest.raises(T.ShapeError):
            T.maxpool2d(Tensor(np.ones((1, 1, 5, 4))))


class TestPixelShuffle:
    def test_permutation(self):
        p, q, s, t = 1.0, 2.0, 3.0, 4.0
        out = T.pixel_shuffle(Tensor(np.array([p, q, s, t]).reshape(1, 4, 1, 1)), 2)
        assert out.data.tolist() == [[[[p, q], [s, t]]]]

    def test_index_formula(self, rng):
        r, c = 3, 2
        x = rng.normal(size=(2, c * r * r, 3, 4))
        out = T.pixel_shuffle(Tensor(x), r).data
        for n in range(2):
            for ch in range(c):
                for h in range(3):
                    for w in range(4):
                        for a in range(r):
                            for b in range(r):
                                assert out[n, ch, h * r + a, w * r + b] == x[n, ch * r * r + a * r + b, h, w]

    @pytest.mark.parametrize("r", [2, 4])
    def test_round_trip(self, rng, r):
        x = rng.normal(size=(2, 3 * r * r, 4, 5))
        assert np.array_equal(T.pixel_unshuffle(T.pixel_shuffle(Tensor(x), r), r).data, x)
        y = rng.normal(size=(2, 3, 4 * r, 2 * r))
        assert np.array_equal(T.pixel_shuffle(T.pixel_unshuffle(Tensor(y), r), r).data, y)

    def test_shape_after_conv(self, rng):
        x = Tensor(rng.normal(size=(1, 64, 16, 16)))
        y = T.conv2d(x, Tensor(rng.normal(size=(4, 64, 3, 3))))
        assert T.pixel_shuffle(y, 2).shape == (1, 1, 32, 32)

    def test_gradient(self, rng):
        assert check_grad(lambda t: T.pixel_shuffle(t, 2), [rng.normal(size=(1, 8, 2, 3))]) < 1e-8

    def test_indivisible(self):
        with pytest.raises(T.ShapeError):
            T.pixel_shuffle(Tensor(np.ones((1, 3, 2, 2))), 2)


class TestDenseAndElementwise:
    def test_identity(self, rng):
        x = rng.normal(size=(3, 4))
        assert np.array_equal(T.dense(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4))).data, x)

    def test_values(self):
        out = T.dense(Tensor(np.array([[1.0, 2.0]])), Tensor(np.array([[3.0, 4.0]])), Tensor(np.array([5.0])))
        assert out.data.tolist() == [[16.0]]

    @pytest.mark.parametrize("seed", range(5))
    def test_gradients(self, seed):
        r = np.random.default_rng(seed)
        x, w, b = r.normal(size=(3, 4)), r.normal(size=(2, 4)), r.normal(size=2)
        assert check_grad(T.dense, [x, w, b]) < 1e-6
        a, c = r.normal(size=(2, 3, 4)), r.normal(size=(3, 1))
        assert check_grad(T.add, [a, c]) < 1e-6
        assert check_grad(T.sub, [a, c]) < 1e-6
        assert check_grad(T.mul, [a, c]) < 1e-6
        assert check_grad(lambda t: T.scale(t, -1.7), [a]) < 1e-6
        assert check_grad(lambda t: T.mean(t, axis=(1, 2)), [a]) < 1e-6
        assert check_grad(T.flatten, [a]) < 1e-6
        assert check_grad(lambda t: T.crop(t, (slice(None), slice(1, 3), slice(0, 2))), [a]) < 1e-6
        assert check_grad(lambda t: T.global_avg_pool(t), [r.normal(size=(2, 3, 4, 4))]) < 1e-6

    def test_mismatch(self):
        with pytest.raises(T.ShapeError):
            T.dense(Tensor(np.ones((1, 3))), Tensor(np.ones((2, 4))))
        with pytest.raises(T.ShapeError):
            T.add(Tensor(np.ones(3)), Tensor(np.ones(4)))


class TestMSE:
    def test_values(self):
        assert T.mse_loss(Tensor([1.0, 2.0]), Tensor([1.0, 2.0])).item() == 0.0
        assert T.mse_loss(Tensor([0.0, 0.0]), Tensor([1.0, 3.0])).item() == 5.0

    def test_gradient(self, rng):
        a, b = rng.normal(size=(2, 5)), rng.normal(size=(2, 5))
        ta = Tensor(a.copy(), requires_grad=True)
        backward(T.mse_loss(ta, Tensor(b)))
        np.testing.assert_allclose(ta.grad, 2 * (a - b) / a.size, rtol=1e-14)
        num = numeric_grad(lambda x: float(np.mean((x - b) ** 2)), [a.copy()])[0]
        assert rel_err(ta.grad, num) < 1e-8

    def test_mismatch(self):
        with pytest.raises(T.ShapeError):
            T.mse_loss(Tensor([1.0]), Tensor([1.0, 2.0]))


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        backward(T.sum(x))
        assert np.array_equal(x.grad, np.ones((2, 3, 4)))

    def test_conv_mse_all_parameters(self, rng):
        x = rng.normal(size=(2, 2, 6, 6))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        y = rng.normal(size=(2, 3, 6, 6))
        tensors = [Tensor(a.copy(), requires_grad=True) for a in (x, w, b)]
        backward(T.mse_loss(T.conv2d(*tensors), Tensor(y)))
        num = numeric_grad(lambda a, ww, bb: T.mse_loss(T.conv2d(Tensor(a), Tensor(ww), Tensor(bb)), Tensor(y)).item(),
                           [x.copy(), w.copy(), b.copy()])
        for t, n in zip(tensors, num):
            assert rel_err(t.grad, n) < 1e-3

    def test_accumulation_doubles(self, rng):
        x = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
        w = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        loss = T.mse_loss(T.dense(x, w), Tensor(np.zeros((3, 2))))
        backward(loss)
        first = w.grad.copy()
        backward(loss)
        assert np.array_equal(w.grad, 2 * first)
        w.zero_grad()
        assert w.grad is None

    def test_fan_out_sums_paths(self, rng):
        a = rng.normal(size=(4,))
        x = Tensor(a.copy(), requires_grad=True)
        y = T.mul(x, x)
        z = T.add(T.scale(y, 3.0), T.sigmoid(y))
        backward(T.sum(z))
        s = 1 / (1 + np.exp(-a * a))
        np.testing.assert_allclose(x.grad, 3 * 2 * a + s * (1 - s) * 2 * a, rtol=1e-12)

    def test_tape_reverse_order(self, rng):
        x = Tensor(rng.normal(size=(3,)), requires_grad=True)
        y = T.sigmoid(T.scale(x, 2.0))
        loss = T.sum(T.mul(y, y))
        tape = T.Tape.from_loss(loss)
        assert [n.op for n in tape.nodes] == ["scale", "sigmoid", "mul", "sum"]
        seqs = [n.seq for n in tape.nodes]
        assert seqs == sorted(seqs)
        outs = [n.out_id for n in tape.nodes]
        assert len(outs) == len(set(outs))

    def test_no_grad_builds_no_graph(self, rng):
        x = Tensor(rng.normal(size=(3,)), requires_grad=True)
        with T.no_grad():
            y = T.sigmoid(x)
        assert y.node is None and not y.requires_grad
        assert T.sigmoid(x).node is not None

    def test_graph_freed_without_gc(self, rng):
        import gc
        import weakref
        gc.disable()
        try:
            x = Tensor(rng.normal(size=(3,)), requires_grad=True)
            y = T.sigmoid(x)
            ref = weakref.ref(y.node)
            del y
            assert ref() is None
        finally:
            gc.enable()

    def test_non_scalar_rejected(self, rng):
        x = Tensor(rng.normal(size=(3,)), requires_grad=True)
        with pytest.raises(T.ShapeError):
            backward(T.scale(x, 2.0))

    def test_deterministic_forward(self, rng):
        x = rng.normal(size=(2, 3, 8, 8))
        w = rng.normal(size=(4, 3, 3, 3))
        a = T.conv2d(Tensor(x), Tensor(w)).data
        b = T.conv2d(Tensor(x), Tensor(w)).data
        assert a.tobytes() == b.tobytes()


@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 2), c=st.integers(1, 3), f=st.integers(1, 3),
       h=st.integers(3, 9), w=st.integers(3, 9), k=st.sampled_from([1, 3, 5]),
       stride=st.integers(1, 3), pad=st.sampled_from(["same", "valid"]), seed=st.integers(0, 2**31))
def test_conv_equals_direct_loops_property(n, c, f, h, w, k, stride, pad, seed):
    if pad == "valid" and k > min(h, w):
        return
    r = np.random.default_rng(seed)
    x, wt, b = r.normal(size=(n, c, h, w)), r.normal(size=(f, c, k, k)), r.normal(size=f)
    got = T.conv2d(Tensor(x), Tensor(wt), Tensor(b), stride=stride, pad=pad).data
    assert np.max(np.abs(got - direct_conv(x, wt, b, stride, pad))) < 1e-12


class TestAdam:
    def test_first_step_magnitude(self, rng):
        lr = 1e-4
        for g in (1e-3, -0.5, 7.0):
            p = Tensor(np.array([1.0]))
            st_ = AdamState(lr=lr)
            adam_step({"p": p}, st_, grads={"p": np.array([g])})
            step = abs(p.data[0] - 1.0)
            assert 0.999 * lr <= step <= lr
            assert np.sign(1.0 - p.data[0]) == np.sign(g)

    def test_zero_gradient_is_noop(self):
        p = Tensor(np.array([0.3, -2.0]))
        st_ = AdamState()
        for _ in range(100):
            adam_step({"p": p}, st_, grads={"p": np.zeros(2)})
        assert p.data.tolist() == [0.3, -2.0]
        assert st_.t == 100

    def test_quadratic_bowl(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        st_ = AdamState(lr=1e-2)
        for _ in range(2000):
            p.zero_grad()
            backward(T.sum(T.mul(p, p)))
            adam_step({"p": p}, st_)
        assert abs(p.data[0]) < 1e-3

    def test_defaults(self):
        s = AdamState()
        assert (s.lr, s.beta1, s.beta2, s.eps, s.t) == (1e-4, 0.9, 0.999, 1e-8, 0)

    def test_non_finite_named(self):
        p = Tensor(np.array([1.0]))
        with pytest.raises(NonFiniteGradient, match="'conv1.w'"):
            adam_step({"conv1.w": p}, AdamState(), grads={"conv1.w": np.array([np.nan])})


class TestSoftmax:
    def test_normalized(self, rng):
        s = T.softmax(Tensor(rng.normal(size=(2, 3, 4, 4)) * 50), axis=(2, 3)).data
        np.testing.assert_allclose(s.sum(axis=(2, 3)), 1.0, rtol=1e-14)
        assert np.all(s >= 0)

    @pytest.mark.parametrize("seed", range(5))
    def test_gradient(self, seed):
        x = np.random.default_rng(seed).normal(size=(2, 1, 3, 3))
        assert check_grad(lambda t: T.softmax(t, axis=(2, 3)), [x]) < 1e-6
