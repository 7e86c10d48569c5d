"""Named gradient checks over small 64-bit instances of every differentiable unit."""
from __future__ import annotations

import numpy as np

from . import bbox_loss as L
from . import blocks as B
from . import tensor as T
from .tensor import Tensor

MODULES = ("conv", "cbs", "ca", "rfb", "sppcspc", "wiou1", "wiou3", "ciou")


def _projection(shape, rng) -> Tensor:
    # random readout so symmetric units (batch norm) still get non-trivial gradients
    return Tensor(rng.normal(size=shape), dtype=np.float64)


def _block_case(build, forward, x_shape, rng):
    p = B.BlockParams()
    with T.precision(np.float64):
        build(p, rng)
        x = Tensor(rng.normal(size=x_shape), dtype=np.float64)
        probe = forward(x, p)
        proj = _projection(probe.shape, rng)
    params = [t for _, t in p.items()]

    def f(x, *_):
        return (forward(x, p) * proj).sum()
    return f, [x, *params]


def _boxes(rng, n):
    gt = np.column_stack([rng.uniform(10, 30, (n, 2)), rng.uniform(4, 12, (n, 2))])
    pred = gt.copy()
    pred[:, :2] += rng.uniform(-4, 4, (n, 2))
    pred[:, 2:] *= np.exp(rng.uniform(-0.5, 0.5, (n, 2)))
    return Tensor(pred, dtype=np.float64), Tensor(gt, dtype=np.float64)


def case(module: str, seed: int = 0):
    """(scalar function, inputs) for one named unit."""
    rng = np.random.default_rng(seed)
    if module == "conv":
        x = Tensor(rng.normal(size=(2, 3, 9, 9)), dtype=np.float64)
        w = Tensor(rng.normal(size=(4, 3, 3, 3)), dtype=np.float64)
        b = Tensor(rng.normal(size=4), dtype=np.float64)
        proj = _projection((2, 4, 5, 5), rng)
        # dilation 3 with stride 1 and a strided dilation-1 conv in one scalar
        proj2 = _projection((2, 4, 5, 5), rng)
        return (lambda x, w, b: (T.conv2d(x, w, b, padding=1, dilation=3) * proj).sum()
                + (T.conv2d(x, w, b, stride=2, padding=1) * proj2).sum()), [x, w, b]
    if module == "cbs":
        return _block_case(lambda p, r: B.init_cbs(p, 3, 4, 3, r),
                           lambda x, p: B.cbs_forward(x, p), (2, 3, 6, 6), rng)
    if module == "ca":
        cfg = B.CAConfig(8, reduction=2)
        return _block_case(lambda p, r: B.init_ca(p, cfg, r),
                           lambda x, p: B.ca_forward(x, cfg, p)[0], (2, 8, 5, 4), rng)
    if module == "rfb":
        cfg = B.RFBConfig(8, 8)
        return _block_case(lambda p, r: B.init_rfb(p, cfg, r),
                           lambda x, p: B.rfb_forward(x, cfg, p), (2, 8, 7, 7), rng)
    if module == "sppcspc":
        return _block_case(lambda p, r: B.init_sppcspc(p, 4, 4, r),
                           lambda x, p: B.sppcspc_forward(x, p), (2, 4, 7, 7), rng)
    pred, gt = _boxes(rng, 16)
    if module == "wiou1":
        return lambda p: L.wiou_v1_t(p, gt).sum(), [pred]
    if module == "ciou":
        return lambda p: L.ciou_t(p, gt).sum(), [pred]
    if module == "wiou3":
        state = L.FocusState()
        L.update_focus(state, float(L.l_iou_t(pred, gt).data.mean()) * 1.3)
        return lambda p: L.wiou_v3_t(p, gt, state)[0].sum(), [pred]
    raise ValueError(f"unknown module {module!r}; choose from {', '.join(MODULES)}")


def run(module: str, seed: int = 0, tol: float = 1e-4, h: float = 1e-5, max_coords: int | None = 40) -> dict:
    f, inputs = case(module, seed)
    with T.precision(np.float64):
        res = T.grad_check(f, inputs, h=h, tol=tol, max_coords=max_coords, seed=seed)
    res["module"] = module
    return res


def wiou3_gain_identity(seed: int = 0) -> float:
    """max |grad(wiou3) - r * grad(wiou1)| per box; zero when beta is properly detached."""
    rng = np.random.default_rng(seed)
    pred, gt = _boxes(rng, 32)
    state = L.FocusState()
    L.update_focus(state, float(L.l_iou_t(pred, gt).data.mean()))
    with T.precision(np.float64):
        p3 = Tensor(pred.data.copy(), requires_grad=True)
        loss3, r = L.wiou_v3_t(p3, gt, state)
        loss3.sum().backward()
        p1 = Tensor(pred.data.copy(), requires_grad=True)
        L.wiou_v1_t(p1, gt).sum().backward()
    return float(np.max(np.abs(p3.grad - r[:, None] * p1.grad)))
