"""Pure box-regression bench: gradient descent on predicted box coordinates.

Every pair is optimised independently (the objective is the sum of per-pair
losses), so the step size means the same thing for every loss.
"""
from __future__ import annotations

import csv

import numpy as np

from . import bbox_loss as L
from . import tensor as T
from .tensor import Tensor

MIN_SIZE = 0.5


def random_pairs(n: int, seed: int, canvas: float = 128.0) -> tuple[np.ndarray, np.ndarray]:
    """(pred, gt) arrays [n,4] in (cx, cy, w, h). Some pairs start disjoint."""
    rng = np.random.default_rng(seed)
    gt = np.empty((n, 4))
    gt[:, 2:] = rng.uniform(8.0, 40.0, size=(n, 2))
    gt[:, :2] = rng.uniform(20.0, canvas - 20.0, size=(n, 2))
    pred = np.empty((n, 4))
    pred[:, :2] = gt[:, :2] + rng.uniform(-1.0, 1.0, size=(n, 2)) * gt[:, 2:]
    pred[:, 2:] = gt[:, 2:] * np.exp(rng.uniform(-0.8, 0.8, size=(n, 2)))
    return pred, gt


def run(loss: str, pred0: np.ndarray, gt: np.ndarray, steps: int, lr: float,
        params: L.WIoUParams | None = None, momentum: float = 0.99) -> np.ndarray:
    """Mean L_IoU before each step and after the last one: shape [steps + 1]."""
    if loss not in L.BOX_LOSSES:
        raise ValueError(f"unknown loss {loss!r}; choose from {L.BOX_LOSSES}")
    params = params or L.WIoUParams()
    state = L.FocusState(momentum=momentum)
    g = Tensor(gt, dtype=np.float64)
    p = pred0.astype(np.float64).copy()
    curve = np.empty(steps + 1)
    with T.precision(np.float64):
        for k in range(steps + 1):
            x = Tensor(p, requires_grad=True)
            l_iou = L.l_iou_t(T.detach(x), g).data
            curve[k] = l_iou.mean()
            if k == steps:
                break
            if loss == "ciou":
                per = L.ciou_t(x, g)
            elif loss == "wiou1":
                per = L.wiou_v1_t(x, g)
            else:
                L.update_focus(state, float(l_iou.mean()))
                per, _ = L.wiou_v3_t(x, g, state, params)
            per.sum().backward()
            if not np.all(np.isfinite(x.grad)):
                raise FloatingPointError(f"non-finite gradient under {loss} at step {k}")
            p -= lr * x.grad
            p[:, 2:] = np.maximum(p[:, 2:], MIN_SIZE)
    return curve


def first_below(curve: np.ndarray, level: float) -> int | None:
    hits = np.flatnonzero(curve < level)
    return int(hits[0]) if len(hits) else None


def loss_bench(losses=("ciou", "wiou1", "wiou3"), steps: int = 500, seed: int = 42, lr: float = 10.0,
               pairs: int = 256) -> dict[str, np.ndarray]:
    pred, gt = random_pairs(pairs, seed)
    return {name: run(name, pred, gt, steps, lr) for name in losses}


def write_curves(path, curves: dict[str, np.ndarray]) -> None:
    names = list(curves)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", *names])
        for k in range(len(next(iter(curves.values())))):
            w.writerow([k, *(repr(float(curves[n][k])) for n in names)])
