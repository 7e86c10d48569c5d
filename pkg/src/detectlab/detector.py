"""Single-scale anchor-free grid detector with a swappable neck, attention and box loss."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import os
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import bbox_loss as L
from . import blocks as B
from . import tensor as T
from .bbox_loss import BBox, FocusState, WIoUParams
from .metrics import Detection, evaluate
from .tensor import Tensor

log = logging.getLogger(__name__)

CSV_HEADER = ["epoch", "box", "obj", "cls", "total", "precision", "recall", "map50", "map5095"]


class NumericalError(FloatingPointError):
    pass


@dataclass
class DetectorConfig:
    input_size: int = 128
    grid: int = 8
    classes: int = 3
    base_channels: int = 16
    stage_depth: int = 1
    neck: str = "sppcspc"
    attention: str = "none"
    box_loss: str = "ciou"
    w_box: float = 5.0
    w_obj: float = 1.0
    w_cls: float = 1.0
    lr: float = 0.01
    lr_final: float = 0.05
    warmup_epochs: int = 1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 30
    batch_size: int = 16
    seed: int = 0
    augment: str = "none"               # none | dihedral (random flips and transposes of train images)
    ca_reduction: int = 8
    wiou_alpha: float = 1.9
    wiou_delta: float = 3.0
    focus_momentum: float = 0.99
    obj_prior: float = 0.02
    conf_thresh: float = 0.001
    nms_iou: float = 0.5

    def __post_init__(self):
        if self.neck not in ("sppcspc", "rfb"):
            raise ValueError(f"neck must be sppcspc or rfb, got {self.neck!r}")
        if self.attention not in ("none", "ca"):
            raise ValueError(f"attention must be none or ca, got {self.attention!r}")
        if self.box_loss not in L.BOX_LOSSES:
            raise ValueError(f"box_loss must be one of {L.BOX_LOSSES}, got {self.box_loss!r}")
        if self.augment not in ("none", "dihedral"):
            raise ValueError(f"augment must be none or dihedral, got {self.augment!r}")
        if self.classes < 1:
            raise ValueError("classes must be >= 1")
        if self.grid < 1 or self.input_size % self.grid:
            raise ValueError(f"input_size {self.input_size} not divisible by grid {self.grid}")
        if self.input_size // self.grid != 16:
            raise ValueError("the backbone downsamples by 16; input_size / grid must equal 16")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")

    @property
    def cell(self) -> float:
        return self.input_size / self.grid

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> DetectorConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown config keys: {sorted(extra)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> DetectorConfig:
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


# -- model ---------------------------------------------------------------------------

class Model:
    """Parameter registry plus the forward wiring.

    Four stride-2 CBS stages -> neck -> optional coordinate attention -> 1x1 head.
    """

    def __init__(self, config: DetectorConfig, params: B.BlockParams, rfb_cfg=None, ca_cfg=None):
        self.config = config
        self.params = params
        self.rfb_cfg = rfb_cfg
        self.ca_cfg = ca_cfg

    @property
    def channels(self) -> list[int]:
        b = self.config.base_channels
        return [b, 2 * b, 4 * b, 8 * b]

    def parameters(self) -> list[tuple[str, Tensor]]:
        return self.params.items()

    def param_count(self) -> int:
        return self.params.count()

    def forward(self, x, training: bool = False):
        """Returns (pred [N,S,S,5+K], extras). ``extras`` holds CA gates when present."""
        cfg = self.config
        p = self.params
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=T.default_dtype()))
        if x.shape[1:] != (3, cfg.input_size, cfg.input_size):
            raise T.ShapeError(f"expected [N,3,{cfg.input_size},{cfg.input_size}], got {x.shape}")
        for si in range(4):
            s = p.scope(f"stage{si}")
            x = B.cbs_forward(x, s.scope("down"), stride=2, training=training)
            for d in range(cfg.stage_depth):
                x = B.cbs_forward(x, s.scope(f"conv{d}"), training=training)
        if cfg.neck == "rfb":
            x = B.rfb_forward(x, self.rfb_cfg, p.scope("neck"), training=training)
        else:
            x = B.sppcspc_forward(x, p.scope("neck"), training=training)
        extras = {}
        if cfg.attention == "ca":
            x, g_h, g_w = B.ca_forward(x, self.ca_cfg, p.scope("attn"), training=training)
            extras = {"g_h": g_h, "g_w": g_w}
        out = B.conv(x, p, "head")
        return T.permute(out, (0, 2, 3, 1)), extras

    __call__ = forward

    def astype(self, dtype) -> Model:
        return Model(self.config, self.params.astype(dtype), self.rfb_cfg, self.ca_cfg)


def build_model(config: DetectorConfig, rng: np.random.Generator | None = None) -> Model:
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    p = B.BlockParams()
    cin = 3
    ch = [config.base_channels * m for m in (1, 2, 4, 8)]
    for si, c in enumerate(ch):
        s = p.scope(f"stage{si}")
        B.init_cbs(s.scope("down"), cin, c, 3, rng)
        for d in range(config.stage_depth):
            B.init_cbs(s.scope(f"conv{d}"), c, c, 3, rng)
        cin = c
    c = ch[-1]
    rfb_cfg = ca_cfg = None
    if config.neck == "rfb":
        rfb_cfg = B.RFBConfig(c, c)
        B.init_rfb(p.scope("neck"), rfb_cfg, rng)
    else:
        B.init_sppcspc(p.scope("neck"), c, c, rng)
    if config.attention == "ca":
        ca_cfg = B.CAConfig(c, config.ca_reduction)
        B.init_ca(p.scope("attn"), ca_cfg, rng)
    k = config.classes
    B.init_conv(p, "head", c, 5 + k, 1, rng)
    # small head init; objectness bias at the prior
    head_w = p["head.weight"]
    head_w.data *= 0.1
    p["head.bias"].data[4] = math.log(config.obj_prior / (1 - config.obj_prior))
    return Model(config, p, rfb_cfg, ca_cfg)


# -- targets ---------------------------------------------------------------------------

@dataclass
class TargetGrid:
    mask: np.ndarray      # [N,S,S] bool
    boxes: np.ndarray     # [N,S,S,4] (cx, cy, w, h) pixels
    classes: np.ndarray   # [N,S,S] int


def assign_targets(gts: list[tuple[BBox, int]], config: DetectorConfig) -> TargetGrid:
    """Positive cell = the cell holding a GT centre; larger GT wins a shared cell."""
    s = config.grid
    mask = np.zeros((1, s, s), dtype=bool)
    boxes = np.zeros((1, s, s, 4), dtype=np.float64)
    cls = np.zeros((1, s, s), dtype=np.int64)
    area = np.zeros((s, s))
    for box, c in gts:
        if not 0 <= c < config.classes:
            raise ValueError(f"class {c} outside [0, {config.classes})")
        col = min(max(int(math.floor(box.cx / config.cell)), 0), s - 1)
        row = min(max(int(math.floor(box.cy / config.cell)), 0), s - 1)
        if mask[0, row, col] and area[row, col] >= box.area:
            continue
        mask[0, row, col] = True
        area[row, col] = box.area
        boxes[0, row, col] = (box.cx, box.cy, box.w, box.h)
        cls[0, row, col] = c
    return TargetGrid(mask, boxes, cls)


def stack_targets(grids: list[TargetGrid]) -> TargetGrid:
    return TargetGrid(np.concatenate([g.mask for g in grids]), np.concatenate([g.boxes for g in grids]),
                      np.concatenate([g.classes for g in grids]))


def encode_box(box: BBox, config: DetectorConfig, eps: float = 1e-9) -> tuple[int, int, np.ndarray]:
    """Inverse of the decoder: (row, col, [tx, ty, tw, th])."""
    cell = config.cell
    col = min(max(int(math.floor(box.cx / cell)), 0), config.grid - 1)
    row = min(max(int(math.floor(box.cy / cell)), 0), config.grid - 1)
    fx = min(max(box.cx / cell - col, eps), 1 - eps)
    fy = min(max(box.cy / cell - row, eps), 1 - eps)
    logit = lambda f: math.log(f / (1 - f))  # noqa: E731
    return row, col, np.array([logit(fx), logit(fy), math.log(box.w / cell), math.log(box.h / cell)])


_TW_MIN, _TW_MAX = -6.0, 4.0


def _decode_t(p: Tensor, rows, cols, cell: float) -> Tensor:
    """Positive-cell logits [P,5+K] -> boxes [P,4] on the tape."""
    dt = p.dtype
    cx = (T.sigmoid(p[:, 0]) + Tensor(cols.astype(dt))) * cell
    cy = (T.sigmoid(p[:, 1]) + Tensor(rows.astype(dt))) * cell
    w = T.exp(T.clip(p[:, 2], _TW_MIN, _TW_MAX)) * cell
    h = T.exp(T.clip(p[:, 3], _TW_MIN, _TW_MAX)) * cell
    return T.concat([t.reshape(-1, 1) for t in (cx, cy, w, h)], axis=1)


def bce_logits(x: Tensor, target: np.ndarray) -> Tensor:
    """Elementwise binary cross-entropy on logits: softplus(x) - t * x."""
    return T.softplus(x) - Tensor(target.astype(x.dtype)) * x


def detector_loss(pred: Tensor, targets: TargetGrid, config: DetectorConfig,
                  focus_state: FocusState | None = None, wiou_params: WIoUParams | None = None) -> dict:
    """Box, objectness and class terms plus their weighted total (all Tensors)."""
    n, s, _, ch = pred.shape
    k = config.classes
    if ch != 5 + k:
        raise T.ShapeError(f"prediction has {ch} channels, expected {5 + k}")
    dt = pred.dtype
    # summed over cells, averaged over images: a mean over all S*S cells would
    # leave the ~1/S^2 positive cells with almost no gradient
    obj = T.scale(bce_logits(pred[..., 4], targets.mask).sum(), 1.0 / n)
    ni, ri, ci = np.nonzero(targets.mask)
    zero = Tensor(np.zeros((), dtype=dt))
    l_iou_mean = None
    if len(ni):
        p = pred[ni, ri, ci]
        boxes = _decode_t(p, ri, ci, config.cell)
        gt = Tensor(targets.boxes[ni, ri, ci].astype(dt))
        if config.box_loss == "ciou":
            per_box = L.ciou_t(boxes, gt)
        elif config.box_loss == "wiou1":
            per_box = L.wiou_v1_t(boxes, gt)
        else:
            if focus_state is None:
                raise L.FocusStateError("wiou3 needs a FocusState")
            l_iou_mean = float(np.mean(1.0 - L.iou_t(T.detach(boxes), gt).data))
            L.update_focus(focus_state, l_iou_mean)
            wp = wiou_params or WIoUParams(config.wiou_alpha, config.wiou_delta)
            per_box, _ = L.wiou_v3_t(boxes, gt, focus_state, wp)
        box = per_box.mean()
        onehot = np.zeros((len(ni), k))
        onehot[np.arange(len(ni)), targets.classes[ni, ri, ci]] = 1.0
        cls = bce_logits(p[:, 5:], onehot).mean()
    else:
        box = cls = zero
    total = T.scale(box, config.w_box) + T.scale(obj, config.w_obj) + T.scale(cls, config.w_cls)
    out = {"box": box, "obj": obj, "cls": cls, "total": total}
    bad = [name for name, v in out.items() if not np.all(np.isfinite(v.data))]
    if bad:
        raise NumericalError(f"non-finite loss component(s): {', '.join(bad)}")
    return out


# -- decoding ----------------------------------------------------------------------------

def _sig(x):
    return 1.0 / (1.0 + np.exp(-np.clip(x, -60, 60)))


def box_iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU between [A,4] and [B,4] (cx, cy, w, h) arrays."""
    ax1, ay1 = a[:, 0] - a[:, 2] / 2, a[:, 1] - a[:, 3] / 2
    ax2, ay2 = a[:, 0] + a[:, 2] / 2, a[:, 1] + a[:, 3] / 2
    bx1, by1 = b[:, 0] - b[:, 2] / 2, b[:, 1] - b[:, 3] / 2
    bx2, by2 = b[:, 0] + b[:, 2] / 2, b[:, 1] + b[:, 3] / 2
    iw = np.clip(np.minimum(ax2[:, None], bx2[None]) - np.maximum(ax1[:, None], bx1[None]), 0, None)
    ih = np.clip(np.minimum(ay2[:, None], by2[None]) - np.maximum(ay1[:, None], by1[None]), 0, None)
    inter = iw * ih
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None] - inter
    return inter / union


def nms(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float) -> list[int]:
    """Greedy NMS; returns kept indices in descending score order."""
    order = list(np.argsort(-scores, kind="stable"))
    keep = []
    while order:
        i = order.pop(0)
        keep.append(int(i))
        if not order:
            break
        ious = box_iou_matrix(boxes[i:i + 1], boxes[order])[0]
        order = [j for j, v in zip(order, ious) if v <= iou_thresh]
    return keep


def decode(pred, conf_thresh: float = 0.25, nms_iou: float = 0.5, config: DetectorConfig | None = None,
           image_ids: list[str] | None = None) -> list[list[Detection]]:
    """Per-image detections after per-class greedy NMS."""
    config = config or DetectorConfig()
    arr = pred.data if isinstance(pred, Tensor) else np.asarray(pred)
    arr = arr.astype(np.float64)
    n, s = arr.shape[:2]
    cell = config.cell
    size = config.input_size
    rows, cols = np.mgrid[0:s, 0:s]
    image_ids = image_ids or [str(i) for i in range(n)]
    results = []
    for b in range(n):
        a = arr[b]
        cx = (cols + _sig(a[..., 0])) * cell
        cy = (rows + _sig(a[..., 1])) * cell
        w = np.exp(np.clip(a[..., 2], _TW_MIN, _TW_MAX)) * cell
        h = np.exp(np.clip(a[..., 3], _TW_MIN, _TW_MAX)) * cell
        cls_p = _sig(a[..., 5:])
        c = cls_p.argmax(axis=-1)
        conf = _sig(a[..., 4]) * cls_p.max(axis=-1)
        sel = conf >= conf_thresh
        if not sel.any():
            results.append([])
            continue
        x1 = np.clip(cx - w / 2, 0, size)
        y1 = np.clip(cy - h / 2, 0, size)
        x2 = np.clip(cx + w / 2, 0, size)
        y2 = np.clip(cy + h / 2, 0, size)
        bx = np.stack([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1], axis=-1)[sel]
        sc, cl = conf[sel], c[sel]
        valid = (bx[:, 2] > 0) & (bx[:, 3] > 0)
        bx, sc, cl = bx[valid], sc[valid], cl[valid]
        dets = []
        for k in np.unique(cl):
            idx = np.flatnonzero(cl == k)
            for j in nms(bx[idx], sc[idx], nms_iou):
                i = idx[j]
                dets.append(Detection(image_ids[b], BBox(*map(float, bx[i])), int(k), float(min(sc[i], 1.0))))
        dets.sort(key=lambda d: -d.conf)
        results.append(dets)
    return results


# -- data -----------------------------------------------------------------------------------

@dataclass
class DetectionData:
    images: np.ndarray                         # [N,3,H,W] float32
    annotations: list[list[tuple[BBox, int]]]
    image_ids: list[str]

    def __len__(self):
        return len(self.image_ids)

    def ground_truth(self) -> list[Detection]:
        return [Detection(i, b, c) for i, anns in zip(self.image_ids, self.annotations) for b, c in anns]

    @classmethod
    def from_dir(cls, data_dir, split: str) -> DetectionData:
        from .synth import load_images, load_split
        recs = load_split(data_dir, split)
        return cls(load_images(data_dir, recs), [r.annotations for r in recs], [r.image for r in recs])


def dihedral(image: np.ndarray, anns: list[tuple[BBox, int]], k: int):
    """One of the 8 symmetries of the square canvas: bit 2 transposes, bits 0/1 flip x/y."""
    size = image.shape[-1]
    out = []
    for b, c in anns:
        cx, cy, w, h = b.cx, b.cy, b.w, b.h
        if k & 4:
            cx, cy, w, h = cy, cx, h, w
        if k & 1:
            cx = size - cx
        if k & 2:
            cy = size - cy
        out.append((BBox(cx, cy, w, h), c))
    if k & 4:
        image = image.transpose(0, 2, 1)
    if k & 1:
        image = image[:, :, ::-1]
    if k & 2:
        image = image[:, ::-1, :]
    return np.ascontiguousarray(image), out


# -- checkpoint -------------------------------------------------------------------------------

CKPT_MAGIC = b"DLCK"


@dataclass
class Checkpoint:
    config: DetectorConfig
    tensors: dict[str, np.ndarray]
    focus: FocusState
    step: int = 0
    epoch: int = 0
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    momentum: dict[str, np.ndarray] = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        head = json.dumps({"config": self.config.to_dict(), "focus": self.focus.to_dict(),
                           "step": self.step, "epoch": self.epoch}, sort_keys=True).encode()
        parts = [CKPT_MAGIC, struct.pack("<BI", 1, len(head)), head]
        records = [(f"param/{k}", v) for k, v in self.tensors.items()]
        records += [(f"buffer/{k}", v) for k, v in self.buffers.items()]
        records += [(f"momentum/{k}", v) for k, v in self.momentum.items()]
        parts.append(struct.pack("<I", len(records)))
        for name, arr in records:
            nb = name.encode()
            parts += [struct.pack("<H", len(nb)), nb, T.tnsr_bytes(arr)]
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes) -> Checkpoint:
        if buf[:4] != CKPT_MAGIC:
            raise ValueError("not a checkpoint (bad magic)")
        version, hlen = struct.unpack_from("<BI", buf, 4)
        if version != 1:
            raise ValueError(f"unsupported checkpoint version {version}")
        pos = 9
        head = json.loads(buf[pos:pos + hlen].decode())
        pos += hlen
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "buffer": {}, "momentum": {}}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + nlen].decode()
            pos += nlen
            arr, pos = T.tnsr_from_buffer(buf, pos)
            kind, key = name.split("/", 1)
            groups[kind][key] = arr
        return cls(DetectorConfig.from_dict(head["config"]), groups["param"], FocusState.from_dict(head["focus"]),
                   head["step"], head["epoch"], groups["buffer"], groups["momentum"])

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> Checkpoint:
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def model_from_checkpoint(ckpt: Checkpoint) -> Model:
    model = build_model(ckpt.config)
    for k, t in model.params.tensors.items():
        if k not in ckpt.tensors:
            raise ValueError(f"checkpoint lacks parameter {k}")
        t.data = ckpt.tensors[k].astype(t.dtype).copy()
    for k in model.params.buffers:
        model.params.buffers[k][...] = ckpt.buffers[k]
    return model


def snapshot(model: Model, focus: FocusState, step: int, epoch: int, velocity: dict) -> Checkpoint:
    return Checkpoint(model.config, {k: t.data.copy() for k, t in model.params.tensors.items()},
                      FocusState(**focus.to_dict()), step, epoch,
                      {k: v.copy() for k, v in model.params.buffers.items()},
                      {k: v.copy() for k, v in velocity.items()})


# -- training -------------------------------------------------------------------------------------

def _lr_at(cfg: DetectorConfig, step: int, steps_per_epoch: int) -> float:
    total = max(1, cfg.epochs * steps_per_epoch)
    warm = cfg.warmup_epochs * steps_per_epoch
    if step < warm:
        return cfg.lr * (step + 1) / warm
    t = (step - warm) / max(1, total - warm)
    return cfg.lr * (cfg.lr_final + (1 - cfg.lr_final) * 0.5 * (1 + math.cos(math.pi * min(t, 1.0))))


def _decays(name: str) -> bool:
    return name.endswith(".weight")


def predict(model: Model, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    outs = []
    with T.no_grad():
        for i in range(0, len(images), batch_size):
            pred, _ = model.forward(Tensor(images[i:i + batch_size]), training=False)
            outs.append(pred.data)
    return np.concatenate(outs) if outs else np.zeros((0,))


def evaluate_model(model: Model, data: DetectionData, conf_thresh: float | None = None):
    cfg = model.config
    pred = predict(model, data.images)
    dets = decode(pred, cfg.conf_thresh if conf_thresh is None else conf_thresh, cfg.nms_iou, cfg, data.image_ids)
    return evaluate([d for per in dets for d in per], data.ground_truth())


def _threads() -> int:
    v = os.environ.get("DETECTLAB_THREADS")
    return max(1, int(v)) if v else 1


def train(config: DetectorConfig, train_set: DetectionData, val_set: DetectionData | None = None,
          resume: Checkpoint | None = None, until_epoch: int | None = None, csv_path=None,
          progress=None) -> tuple[Checkpoint, list[dict]]:
    """SGD-momentum training with cosine decay. Deterministic for a given seed.

    ``until_epoch`` stops early (exclusive epoch index) without changing the
    schedule, so a later ``resume`` continues bit-identically.
    """
    if resume is not None:
        if resume.config != config:
            raise ValueError("resume checkpoint was written with a different config")
        model = model_from_checkpoint(resume)
        focus = FocusState(**resume.focus.to_dict())
        step, start = resume.step, resume.epoch
        velocity = {k: v.copy() for k, v in resume.momentum.items()}
    else:
        model = build_model(config)
        focus = FocusState(momentum=config.focus_momentum)
        step, start = 0, 0
        velocity = {}
    for k, t in model.params.tensors.items():
        velocity.setdefault(k, np.zeros_like(t.data))
    end = config.epochs if until_epoch is None else min(until_epoch, config.epochs)
    n = len(train_set)
    spe = max(1, math.ceil(n / config.batch_size))
    targets_all = [assign_targets(a, config) for a in train_set.annotations]
    wp = WIoUParams(config.wiou_alpha, config.wiou_delta)
    rows: list[dict] = []
    with threadpool_limits(limits=_threads()):
        for epoch in range(start, end):
            order = np.random.default_rng([config.seed, epoch]).permutation(n)
            if config.augment == "dihedral":
                flips = np.random.default_rng([config.seed, epoch, 1]).integers(8, size=n)
            sums = {"box": 0.0, "obj": 0.0, "cls": 0.0, "total": 0.0}
            t0 = time.perf_counter()
            for bi in range(spe):
                idx = order[bi * config.batch_size:(bi + 1) * config.batch_size]
                if len(idx) == 0:
                    continue
                if config.augment == "dihedral":
                    views = [dihedral(train_set.images[i], train_set.annotations[i], int(flips[i])) for i in idx]
                    x = Tensor(np.stack([v[0] for v in views]))
                    tg = stack_targets([assign_targets(v[1], config) for v in views])
                else:
                    x = Tensor(train_set.images[idx])
                    tg = stack_targets([targets_all[i] for i in idx])
                pred, _ = model.forward(x, training=True)
                losses = detector_loss(pred, tg, config, focus, wp)
                for t in model.params.tensors.values():
                    t.zero_grad()
                losses["total"].backward()
                lr = np.float32(_lr_at(config, step, spe))
                for k, t in model.params.tensors.items():
                    g = t.grad if t.grad is not None else np.zeros_like(t.data)
                    if _decays(k):
                        g = g + np.float32(config.weight_decay) * t.data
                    v = velocity[k]
                    v *= np.float32(config.momentum)
                    v += g
                    t.data -= lr * v
                    if not np.all(np.isfinite(t.data)):
                        raise NumericalError(f"non-finite weights in {k} at step {step}")
                step += 1
                for key in sums:
                    sums[key] += float(losses[key].data)
            row = {"epoch": epoch, **{k: v / spe for k, v in sums.items()}}
            if val_set is not None and len(val_set):
                res = evaluate_model(model, val_set)
                row.update(precision=res.precision, recall=res.recall, map50=res.map50, map5095=res.map5095)
            else:
                row.update(precision=0.0, recall=0.0, map50=0.0, map5095=0.0)
            rows.append(row)
            log.info("epoch %d total %.4f map50 %.3f (%.1fs)", epoch, row["total"], row["map50"],
                     time.perf_counter() - t0)
            if progress is not None:
                progress(row)
            if csv_path is not None:
                write_csv(csv_path, [row], append=epoch > 0)
    ckpt = snapshot(model, focus, step, end, velocity)
    return ckpt, rows


def _fmt(v) -> str:
    return str(v) if isinstance(v, int) else repr(float(v))


def write_csv(path, rows: list[dict], append: bool = False) -> None:
    """Write per-epoch rows; ``append`` adds to an existing log instead of starting one."""
    path = Path(path)
    if append and path.exists():
        with open(path, "a", newline="") as fh:
            w = csv.writer(fh)
            for r in rows:
                w.writerow([_fmt(r[k]) for k in CSV_HEADER])
        return
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for r in rows:
            w.writerow([_fmt(r[k]) for k in CSV_HEADER])


# -- cost reporting ---------------------------------------------------------------------------------

def forward_macs(model: Model) -> int:
    """Multiply-accumulates of the conv layers for one image (analytic, counted during a forward)."""
    x = Tensor(np.zeros((1, 3, model.config.input_size, model.config.input_size), dtype=T.default_dtype()))
    with T.no_grad(), T.count_macs() as box:
        model.forward(x, training=False)
    return box["macs"]


def measure_speed(model: Model, runs: int = 50, warmup: int = 5, image: np.ndarray | None = None) -> float:
    """Mean single-image forward wall time in milliseconds, single-threaded."""
    if runs < 1 or warmup < 0:
        raise ValueError("runs must be >= 1 and warmup >= 0")
    size = model.config.input_size
    x = Tensor(np.zeros((1, 3, size, size), dtype=T.default_dtype()) if image is None else image[None])
    times = []
    with threadpool_limits(limits=1), T.no_grad():
        for i in range(warmup + runs):
            t0 = time.perf_counter()
            model.forward(x, training=False)
            if i >= warmup:
                times.append(time.perf_counter() - t0)
    return 1000.0 * float(np.mean(times))
