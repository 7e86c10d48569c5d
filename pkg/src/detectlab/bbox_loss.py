"""IoU-family box regression losses: IoU, WIoU v1/v3 with dynamic focusing, CIoU.

Tensor entry points take boxes as ``[..., 4]`` tensors laid out
``(cx, cy, w, h)`` and return per-box losses. The float helpers at the bottom
wrap them for single :class:`BBox` pairs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

ENCLOSE_FLOOR = 1e-12


class FocusStateError(RuntimeError):
    pass


@dataclass(frozen=True)
class BBox:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"degenerate box: w={self.w}, h={self.h}")

    @property
    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)


@dataclass(frozen=True)
class PairGeometry:
    iou: float
    inter_w: float
    inter_h: float
    enclose_w: float
    enclose_h: float
    center_dist2: float


@dataclass
class WIoUParams:
    alpha: float = 1.9
    delta: float = 3.0

    def __post_init__(self):
        if not self.alpha > 0 or self.alpha == 1:
            raise ValueError(f"alpha must be > 0 and != 1, got {self.alpha}")
        if not self.delta > 0:
            raise ValueError(f"delta must be > 0, got {self.delta}")


@dataclass
class FocusState:
    """Running mean of the IoU loss that normalises the outlier degree."""

    momentum: float = 0.99
    ema: float | None = None
    steps: int = 0
    frozen: bool = False

    def to_dict(self) -> dict:
        return {"momentum": self.momentum, "ema": self.ema, "steps": self.steps, "frozen": self.frozen}

    @classmethod
    def from_dict(cls, d: dict) -> FocusState:
        return cls(**d)


def update_focus(state: FocusState, batch_mean_l_iou: float) -> None:
    if state.frozen:
        return
    v = float(batch_mean_l_iou)
    if state.ema is None:
        state.ema = v
    else:
        state.ema = state.momentum * state.ema + (1 - state.momentum) * v
    state.steps += 1


def outlier_degree(l_iou_value, state: FocusState):
    """beta = L_IoU / running mean, with the numerator detached."""
    if state.ema is None or not state.ema > 0:
        raise FocusStateError("focus state has no positive running mean yet; call update_focus first")
    v = l_iou_value.data if isinstance(l_iou_value, Tensor) else l_iou_value
    return np.asarray(v, dtype=np.float64) / state.ema if np.ndim(v) else float(v) / state.ema


def gradient_gain(beta, params: WIoUParams):
    """r = beta / (delta * alpha ** (beta - delta))."""
    a, d = params.alpha, params.delta
    if not a > 0 or not d > 0:
        raise ValueError("alpha and delta must be positive")
    if np.ndim(beta):
        beta = np.asarray(beta, dtype=np.float64)
        return beta / (d * np.power(a, beta - d))
    return beta / (d * a ** (beta - d))


# -- tensor forms ---------------------------------------------------------------

def _split(b: Tensor):
    if b.shape[-1] != 4:
        raise T.ShapeError(f"boxes must have trailing dim 4 (cx, cy, w, h), got {b.shape}")
    if np.any(b.data[..., 2:] <= 0):
        raise ValueError("degenerate box with non-positive width or height")
    return b[..., 0], b[..., 1], b[..., 2], b[..., 3]


def _pair_terms(pred: Tensor, gt: Tensor):
    pcx, pcy, pw, ph = _split(pred)
    gcx, gcy, gw, gh = _split(gt)
    px1, px2 = pcx - pw * 0.5, pcx + pw * 0.5
    py1, py2 = pcy - ph * 0.5, pcy + ph * 0.5
    gx1, gx2 = gcx - gw * 0.5, gcx + gw * 0.5
    gy1, gy2 = gcy - gh * 0.5, gcy + gh * 0.5
    iw = T.relu(T.minimum(px2, gx2) - T.maximum(px1, gx1))
    ih = T.relu(T.minimum(py2, gy2) - T.maximum(py1, gy1))
    inter = iw * ih
    union = pw * ph + gw * gh - inter
    iou = inter / union
    ew = T.maximum(px2, gx2) - T.minimum(px1, gx1)
    eh = T.maximum(py2, gy2) - T.minimum(py1, gy1)
    dx, dy = pcx - gcx, pcy - gcy
    return {"iou": iou, "ew": ew, "eh": eh, "dist2": dx * dx + dy * dy,
            "pw": pw, "ph": ph, "gw": gw, "gh": gh}


def iou_t(pred: Tensor, gt: Tensor) -> Tensor:
    return _pair_terms(pred, gt)["iou"]


def l_iou_t(pred: Tensor, gt: Tensor) -> Tensor:
    return 1.0 - iou_t(pred, gt)


def _r_wiou(terms) -> Tensor:
    diag2 = T.detach(terms["ew"] * terms["ew"] + terms["eh"] * terms["eh"])
    return T.exp(terms["dist2"] / T.maximum(diag2, ENCLOSE_FLOOR))


def r_wiou_t(pred: Tensor, gt: Tensor) -> Tensor:
    """exp(center distance^2 / detached enclosing diagonal^2)."""
    return _r_wiou(_pair_terms(pred, gt))


def wiou_v1_t(pred: Tensor, gt: Tensor) -> Tensor:
    terms = _pair_terms(pred, gt)
    return _r_wiou(terms) * (1.0 - terms["iou"])


def wiou_v3_t(pred: Tensor, gt: Tensor, state: FocusState, params: WIoUParams | None = None):
    """Per-box r * WIoUv1 with r built from the detached outlier degree.

    Returns (loss, r) where r is a plain array. The focus state is read, not
    updated; callers update it once per batch.
    """
    params = params or WIoUParams()
    terms = _pair_terms(pred, gt)
    l_iou = 1.0 - terms["iou"]
    beta = outlier_degree(T.detach(l_iou), state)
    r = np.asarray(gradient_gain(beta, params), dtype=pred.dtype)
    return Tensor(r) * (_r_wiou(terms) * l_iou), r


def ciou_t(pred: Tensor, gt: Tensor) -> Tensor:
    """1 - IoU + rho^2/c^2 + alpha_v * v, alpha_v held constant in the backward pass."""
    terms = _pair_terms(pred, gt)
    iou = terms["iou"]
    c2 = terms["ew"] * terms["ew"] + terms["eh"] * terms["eh"]
    c2 = T.maximum(c2, ENCLOSE_FLOOR)
    dv = T.arctan(terms["gw"] / terms["gh"]) - T.arctan(terms["pw"] / terms["ph"])
    v = T.scale(dv * dv, 4.0 / math.pi ** 2)
    v_c, iou_c = T.detach(v).data, T.detach(iou).data
    denom = (1.0 - iou_c) + v_c
    alpha_v = np.where(denom > 0, v_c / np.where(denom > 0, denom, 1.0), 0.0).astype(pred.dtype)
    return 1.0 - iou + terms["dist2"] / c2 + Tensor(alpha_v) * v


BOX_LOSSES = ("ciou", "wiou1", "wiou3")


# -- float helpers --------------------------------------------------------------

def _pair(a: BBox, b: BBox):
    return (Tensor(a.as_array().reshape(1, 4), dtype=np.float64),
            Tensor(b.as_array().reshape(1, 4), dtype=np.float64))


def geometry(a: BBox, b: BBox) -> PairGeometry:
    ax1, ay1, ax2, ay2 = a.corners
    bx1, by1, bx2, by2 = b.corners
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    return PairGeometry(
        iou=inter / (a.area + b.area - inter),
        inter_w=iw, inter_h=ih,
        enclose_w=max(ax2, bx2) - min(ax1, bx1),
        enclose_h=max(ay2, by2) - min(ay1, by1),
        center_dist2=(a.cx - b.cx) ** 2 + (a.cy - b.cy) ** 2,
    )


def iou(a: BBox, b: BBox) -> float:
    return iou_t(*_pair(a, b)).item()


def l_iou(a: BBox, b: BBox) -> float:
    return 1.0 - iou(a, b)


def r_wiou(pred: BBox, gt: BBox) -> float:
    return r_wiou_t(*_pair(pred, gt)).item()


def wiou_v1(pred: BBox, gt: BBox) -> float:
    return wiou_v1_t(*_pair(pred, gt)).item()


def wiou_v3(pred: BBox, gt: BBox, state: FocusState, params: WIoUParams | None = None) -> float:
    loss, _ = wiou_v3_t(*_pair(pred, gt), state, params)
    return loss.item()


def ciou(pred: BBox, gt: BBox) -> float:
    return ciou_t(*_pair(pred, gt)).item()
