import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from detectlab import bbox_loss as L
from detectlab import checks
from detectlab import tensor as T
from detectlab.bbox_loss import BBox, FocusState, WIoUParams
from oracles import wiou_v1_oracle

coord = st.floats(0.0, 100.0, allow_nan=False)
size = st.floats(0.5, 50.0, allow_nan=False)
boxes = st.builds(BBox, coord, coord, size, size)


class TestIoU:
    @given(boxes, boxes)
    @settings(max_examples=100, deadline=None)
    def test_symmetric_and_bounded(self, a, b):
        v = L.iou(a, b)
        assert 0.0 <= v <= 1.0 + 1e-12
        assert v == pytest.approx(L.iou(b, a), abs=1e-12)

    def test_worked_pair(self):
        assert L.iou(BBox(1, 1, 2, 2), BBox(2, 2, 2, 2)) == pytest.approx(1 / 7, abs=1e-15)

    def test_degenerate_rejected(self):
        with pytest.raises(ValueError):
            BBox(0, 0, 0, 1)


class TestWIoUv1:
    def test_worked_pair(self):
        pred, gt = BBox(1, 1, 2, 2), BBox(2, 2, 2, 2)
        assert L.r_wiou(pred, gt) == pytest.approx(math.exp(1 / 9), abs=1e-12)
        assert L.wiou_v1(pred, gt) == pytest.approx(6 / 7 * math.exp(1 / 9), abs=1e-12)

    def test_matches_oracle(self, rng):
        n = 300
        g = np.column_stack([rng.uniform(0, 100, (n, 2)), rng.uniform(1, 40, (n, 2))])
        p = np.column_stack([g[:, :2] + rng.normal(0, 15, (n, 2)), g[:, 2:] * np.exp(rng.normal(0, 0.5, (n, 2)))])
        got = L.wiou_v1_t(T.Tensor(p, dtype=np.float64), T.Tensor(g, dtype=np.float64)).data
        want = [wiou_v1_oracle(a, b) for a, b in zip(p, g)]
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)

    @given(boxes, boxes)
    @settings(max_examples=100, deadline=None)
    def test_amplifies_iou_loss(self, a, b):
        assert L.wiou_v1(a, b) >= L.l_iou(a, b) - 1e-12
        assert L.r_wiou(a, b) >= 1.0

    def test_concentric_is_plain_iou_loss(self):
        a, b = BBox(5, 5, 2, 4), BBox(5, 5, 3, 3)
        assert L.wiou_v1(a, b) == pytest.approx(L.l_iou(a, b), abs=1e-15)

    def test_identical_is_zero(self):
        assert L.wiou_v1(BBox(3, 4, 5, 6), BBox(3, 4, 5, 6)) == 0.0

    def test_enclosing_box_is_detached(self):
        # central differences of the oracle with W_g, H_g frozen at their base values
        p0, g = np.array([6.0, 5.3, 2.0, 4.0]), np.array([5.0, 5.0, 3.0, 3.0])
        px1, px2 = p0[0] - p0[2] / 2, p0[0] + p0[2] / 2
        py1, py2 = p0[1] - p0[3] / 2, p0[1] + p0[3] / 2
        wg = max(px2, g[0] + g[2] / 2) - min(px1, g[0] - g[2] / 2)
        hg = max(py2, g[1] + g[3] / 2) - min(py1, g[1] - g[3] / 2)

        def frozen(p):
            l_iou = 1 - L.iou(BBox(*p), BBox(*g))
            return math.exp(((p[0] - g[0]) ** 2 + (p[1] - g[1]) ** 2) / (wg ** 2 + hg ** 2)) * l_iou

        h = 1e-6
        num = [(frozen(p0 + h * e) - frozen(p0 - h * e)) / (2 * h) for e in np.eye(4)]
        pt = T.Tensor(p0[None], requires_grad=True, dtype=np.float64)
        L.wiou_v1_t(pt, T.Tensor(g[None], dtype=np.float64)).sum().backward()
        np.testing.assert_allclose(pt.grad[0], num, rtol=1e-6, atol=1e-9)


class TestFocusing:
    def test_gain_shape(self):
        prm = WIoUParams(1.9, 3.0)
        assert L.gradient_gain(3.0, prm) == 1.0
        assert L.gradient_gain(0.0, prm) == 0.0
        grid = np.linspace(0, 10, 100001)
        r = L.gradient_gain(grid, prm)
        peak = grid[np.argmax(r)]
        assert abs(peak - 1 / math.log(1.9)) < 1e-3
        assert np.sum(r == r.max()) == 1

    def test_first_update_sets_mean(self):
        s = FocusState()
        L.update_focus(s, 0.4)
        assert s.ema == 0.4 and s.steps == 1
        L.update_focus(s, 1.4)
        assert s.ema == pytest.approx(0.99 * 0.4 + 0.01 * 1.4)

    def test_frozen_state_does_not_move(self):
        s = FocusState(ema=0.5, frozen=True)
        L.update_focus(s, 10.0)
        assert s.ema == 0.5

    def test_outlier_degree_needs_mean(self):
        with pytest.raises(L.FocusStateError):
            L.outlier_degree(0.3, FocusState())

    def test_v3_at_average_quality(self):
        # beta = 1 gives r = 1 / (delta * alpha^(1 - delta))
        pred, gt = BBox(1, 1, 2, 2), BBox(2, 2, 2, 2)
        s = FocusState(ema=L.l_iou(pred, gt))
        r = 1 / (3 * 1.9 ** -2)
        assert L.wiou_v3(pred, gt, s) == pytest.approx(r * L.wiou_v1(pred, gt), rel=1e-12)

    def test_v3_backward_is_gain_times_v1(self):
        assert checks.wiou3_gain_identity(seed=3) <= 1e-10

    @pytest.mark.parametrize("alpha,delta", [(1.0, 3.0), (0.0, 3.0), (1.9, 0.0)])
    def test_param_validation(self, alpha, delta):
        with pytest.raises(ValueError):
            WIoUParams(alpha, delta)


class TestCIoU:
    def test_identical_is_zero(self):
        assert L.ciou(BBox(3, 4, 5, 6), BBox(3, 4, 5, 6)) == pytest.approx(0.0, abs=1e-15)

    def test_same_aspect_concentric(self):
        # no centre or aspect term: reduces to 1 - IoU = 1 - 1/4
        assert L.ciou(BBox(0, 0, 1, 1), BBox(0, 0, 2, 2)) == pytest.approx(0.75, abs=1e-15)

    def test_disjoint_exceeds_one(self):
        assert L.ciou(BBox(0, 0, 1, 1), BBox(5, 0, 1, 1)) > 1.0


@pytest.mark.parametrize("module", ["wiou1", "wiou3", "ciou"])
def test_loss_gradients(module):
    res = checks.run(module, max_coords=None)
    assert res["pass"], res
