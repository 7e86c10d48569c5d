import io
import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from detectlab import tensor as T
from detectlab.tensor import ShapeError, Tensor

from conftest import t64


def conv_loop(x, w, b, stride, pad, dil):
    """Direct seven-loop cross-correlation, the oracle for im2col."""
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - dil * (kh - 1) - 1) // stride + 1
    wo = (wd + 2 * pad - dil * (kw - 1) - 1) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for i, o, r, c in itertools.product(range(n), range(cout), range(ho), range(wo)):
        acc = 0.0 if b is None else b[o]
        for ci in range(cin):
            for a in range(kh):
                for e in range(kw):
                    acc += w[o, ci, a, e] * xp[i, ci, r * stride + a * dil, c * stride + e * dil]
        out[i, o, r, c] = acc
    return out


class TestBroadcastAndBackward:
    def test_add_unbroadcasts(self, f64):
        a = t64(np.ones((2, 3)), grad=True)
        b = t64(np.ones((1, 3)), grad=True)
        (a + b).sum().backward()
        assert b.grad.shape == (1, 3)
        np.testing.assert_array_equal(b.grad, [[2, 2, 2]])

    def test_rank_mismatch_rejected(self, f64):
        with pytest.raises(ShapeError):
            t64(np.ones((2, 3))) + t64(np.ones(3))

    def test_mixed_precision_rejected(self):
        with pytest.raises(TypeError):
            Tensor(np.ones(2, np.float32)) + Tensor(np.ones(2, np.float64))

    def test_diamond_graph_accumulates(self, f64):
        x = t64([3.0], grad=True)
        y = x * x
        (y + y * x).sum().backward()
        # d/dx (x^2 + x^3) = 2x + 3x^2
        assert x.grad[0] == pytest.approx(6 + 27)

    def test_backward_is_deterministic(self, rng, f64):
        x = t64(rng.normal(size=(2, 3, 6, 6)), grad=True)
        w = t64(rng.normal(size=(4, 3, 3, 3)), grad=True)
        grads = []
        for _ in range(2):
            x.zero_grad(), w.zero_grad()
            (T.silu(T.conv2d(x, w, padding=1)) ** 2).sum().backward()
            grads.append((x.grad.copy(), w.grad.copy()))
        assert np.array_equal(grads[0][0], grads[1][0]) and np.array_equal(grads[0][1], grads[1][1])

    def test_no_grad_builds_no_graph(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with T.no_grad():
            y = x * 2
        assert not y.requires_grad

    def test_detach_blocks_gradient(self, f64):
        x = t64([2.0], grad=True)
        (x * T.detach(x)).sum().backward()
        assert x.grad[0] == 2.0

    def test_sigmoid_extremes_finite(self, f64):
        s = T.sigmoid(t64([-1000.0, 0.0, 1000.0])).data
        np.testing.assert_allclose(s, [0.0, 0.5, 1.0])


class TestConv:
    def test_matches_loop_oracle_50_configs(self, rng, f64):
        done = 0
        while done < 50:
            k = int(rng.integers(1, 4))
            stride, dil, pad = int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(0, 3))
            h = int(rng.integers(1, 9))
            if h + 2 * pad < dil * (k - 1) + 1:
                continue
            x = rng.normal(size=(2, 3, h, h + 1))
            w = rng.normal(size=(2, 3, k, k))
            b = rng.normal(size=2) if done % 2 else None
            got = T.conv2d(t64(x), t64(w), None if b is None else t64(b), stride, pad, dil).data
            np.testing.assert_allclose(got, conv_loop(x, w, b, stride, pad, dil), atol=1e-12, rtol=0)
            done += 1

    @pytest.mark.parametrize("kw", [dict(padding=3, dilation=3), dict(stride=2, padding=1), dict()])
    def test_gradients(self, rng, kw):
        x = t64(rng.normal(size=(2, 2, 7, 7)))
        w = t64(rng.normal(size=(3, 2, 3, 3)))
        b = t64(rng.normal(size=3))
        with T.precision(np.float64):
            res = T.grad_check(lambda x, w, b: (T.conv2d(x, w, b, **kw) ** 2).sum(), [x, w, b])
        assert res["pass"], res

    def test_pointwise_strided_gradient(self, rng):
        x, w = t64(rng.normal(size=(2, 3, 5, 5))), t64(rng.normal(size=(2, 3, 1, 1)))
        with T.precision(np.float64):
            assert T.grad_check(lambda x, w: (T.conv2d(x, w, stride=2) ** 2).sum(), [x, w])["pass"]

    def test_errors(self, f64):
        x = t64(np.zeros((1, 2, 5, 5)))
        with pytest.raises(ShapeError):
            T.conv2d(x, t64(np.zeros((1, 3, 3, 3))))
        with pytest.raises(ValueError):
            T.conv2d(x, t64(np.zeros((1, 2, 3, 3))), stride=0)
        with pytest.raises(ShapeError):
            T.conv2d(x, t64(np.zeros((1, 2, 3, 3))), dilation=3)

    def test_mac_count(self, f64):
        with T.count_macs() as box:
            T.conv2d(t64(np.zeros((2, 3, 8, 8))), t64(np.zeros((4, 3, 3, 3))), padding=1)
        assert box["macs"] == 2 * 4 * 8 * 8 * 3 * 9


class TestPooling:
    def test_directional_means(self, rng, f64):
        x = t64(rng.normal(size=(2, 3, 4, 5)))
        np.testing.assert_allclose(T.pool_avg_h(x).data[..., 0], x.data.mean(axis=3))
        np.testing.assert_allclose(T.pool_avg_w(x).data[:, :, 0], x.data.mean(axis=2))

    def test_full_window_max_is_global_max(self, rng, f64):
        x = t64(rng.normal(size=(1, 2, 5, 5)))
        np.testing.assert_array_equal(T.pool_max2d(x, 5).data[..., 0, 0], x.data.max(axis=(2, 3)))

    def test_same_padding_keeps_shape_and_dominates(self, rng, f64):
        x = t64(rng.normal(size=(1, 2, 7, 7)))
        y = T.pool_max2d(x, 5, stride=1, padding=2)
        assert y.shape == x.shape and np.all(y.data >= x.data)

    def test_ties_route_to_lowest_index(self, f64):
        x = t64(np.ones((1, 1, 2, 2)), grad=True)
        T.pool_max2d(x, 2).sum().backward()
        np.testing.assert_array_equal(x.grad[0, 0], [[1, 0], [0, 0]])

    @pytest.mark.parametrize("k,s,p", [(5, 1, 2), (13, 1, 6), (3, 2, 1)])
    def test_matches_window_argmax(self, rng, k, s, p, f64):
        x = rng.integers(0, 3, size=(2, 2, 9, 9)).astype(float)  # many ties
        xt = t64(x, grad=True)
        y = T.pool_max2d(xt, k, s, p)
        y.sum().backward()
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=-np.inf)
        g = np.zeros_like(xp)
        for a, b in itertools.product(range(y.shape[2]), range(y.shape[3])):
            win = xp[:, :, a * s:a * s + k, b * s:b * s + k].reshape(2, 2, -1)
            np.testing.assert_array_equal(y.data[:, :, a, b], win.max(-1))
            idx = win.argmax(-1)
            for i, j in itertools.product(range(2), range(2)):
                g[i, j, a * s + idx[i, j] // k, b * s + idx[i, j] % k] += 1
        np.testing.assert_array_equal(xt.grad, g[:, :, p:p + 9, p:p + 9])


class TestShapeOps:
    @given(sizes=st.lists(st.integers(1, 4), min_size=1, max_size=4), axis=st.integers(0, 2))
    @settings(max_examples=30, deadline=None)
    def test_split_inverts_concat(self, sizes, axis):
        rng = np.random.default_rng(len(sizes))
        parts = []
        for s in sizes:
            shape = [2, 3, 2]
            shape[axis] = s
            parts.append(t64(rng.normal(size=shape)))
        back = T.split(T.concat(parts, axis), sizes, axis)
        for a, b in zip(parts, back):
            assert np.array_equal(a.data, b.data)

    def test_index_repeated_accumulates(self, f64):
        x = t64([1.0, 2.0, 3.0], grad=True)
        x[np.array([0, 0, 2])].sum().backward()
        np.testing.assert_array_equal(x.grad, [2, 0, 1])


class TestBatchNorm:
    def test_training_normalises_and_updates_running(self, rng, f64):
        x = t64(rng.normal(3.0, 2.0, size=(4, 2, 5, 5)))
        rm, rv = np.zeros(2), np.ones(2)
        y = T.batch_norm(x, t64(np.ones(2)), t64(np.zeros(2)), rm, rv, training=True)
        np.testing.assert_allclose(y.data.mean(axis=(0, 2, 3)), 0, atol=1e-12)
        np.testing.assert_allclose(rm, 0.1 * x.data.mean(axis=(0, 2, 3)))

    def test_eval_uses_running_stats(self, f64):
        x = t64(np.full((1, 1, 2, 2), 5.0))
        y = T.batch_norm(x, t64([1.0]), t64([0.0]), np.array([1.0]), np.array([4.0]), training=False, eps=0)
        np.testing.assert_allclose(y.data, 2.0)


class TestGradCheck:
    def test_detects_wrong_gradient(self, f64):
        x = t64([0.3, 0.7])
        bad = lambda x: T._make(x.data ** 2, (x,), lambda g: (g * 3 * x.data,), "bad").sum()  # noqa: E731
        assert not T.grad_check(bad, [x])["pass"]

    def test_requires_64_bit(self):
        with pytest.raises(TypeError):
            T.grad_check(lambda x: x.sum(), [Tensor(np.ones(2, np.float32))])


class TestTnsr:
    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_round_trip(self, rng, tmp_path, dtype):
        a = rng.normal(size=(3, 4, 5)).astype(dtype)
        T.save_tnsr(tmp_path / "a.tnsr", a)
        b = T.load_tnsr(tmp_path / "a.tnsr")
        assert b.dtype == dtype and np.array_equal(a, b)

    def test_header_layout(self):
        buf = T.tnsr_bytes(np.zeros((2, 3), np.float32))
        assert buf[:4] == b"TNSR" and buf[4:7] == bytes([1, 0, 2])
        assert len(buf) == 7 + 8 + 24

    def test_bad_magic(self):
        with pytest.raises(ValueError):
            T.tnsr_from_buffer(b"XXXX" + bytes(10))
