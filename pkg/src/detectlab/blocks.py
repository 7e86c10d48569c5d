"""Architectural units: CBS, receptive field block, SPPCSPC baseline, coordinate attention.

Blocks are functional: an ``init_*`` builder registers named tensors in a
:class:`BlockParams` scope and the matching ``*_forward`` reads them back.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class BlockParams:
    """Flat registry of named weight tensors (and non-trainable buffers).

    ``scope("neck")`` returns a view that shares storage and prefixes names,
    so a whole model lives in one registry while blocks see short names.
    """

    def __init__(self, tensors=None, buffers=None, prefix: str = ""):
        self.tensors: dict[str, Tensor] = {} if tensors is None else tensors
        self.buffers: dict[str, np.ndarray] = {} if buffers is None else buffers
        self.prefix = prefix

    def scope(self, name: str) -> BlockParams:
        return BlockParams(self.tensors, self.buffers, f"{self.prefix}{name}.")

    def add(self, name: str, data: np.ndarray) -> Tensor:
        key = self.prefix + name
        if key in self.tensors:
            raise ConfigError(f"duplicate parameter {key}")
        t = Tensor(data, requires_grad=True, name=key)
        self.tensors[key] = t
        return t

    def add_buffer(self, name: str, data: np.ndarray) -> np.ndarray:
        self.buffers[self.prefix + name] = data
        return data

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[self.prefix + name]

    def buffer(self, name: str) -> np.ndarray:
        return self.buffers[self.prefix + name]

    def __contains__(self, name: str) -> bool:
        return self.prefix + name in self.tensors

    def items(self):
        return [(k, v) for k, v in self.tensors.items() if k.startswith(self.prefix)]

    def count(self) -> int:
        return sum(int(t.data.size) for _, t in self.items())

    def astype(self, dtype) -> BlockParams:
        """Deep copy in another precision (used for 64-bit gradient checks)."""
        return BlockParams({k: v.astype(dtype) for k, v in self.tensors.items()},
                           {k: v.astype(np.float64).copy() for k, v in self.buffers.items()}, self.prefix)


def param_count(params: BlockParams) -> int:
    return params.count()


# -- initialisation ---------------------------------------------------------------------

def he_uniform(rng: np.random.Generator, shape) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(T.default_dtype())


def init_conv(p: BlockParams, name: str, cin: int, cout: int, k: int, rng, bias: bool = True):
    p.add(f"{name}.weight", he_uniform(rng, (cout, cin, k, k)))
    if bias:
        p.add(f"{name}.bias", np.zeros(cout, dtype=T.default_dtype()))


def conv(x: Tensor, p: BlockParams, name: str, stride=1, padding=0, dilation=1) -> Tensor:
    b = p[f"{name}.bias"] if f"{name}.bias" in p else None
    return T.conv2d(x, p[f"{name}.weight"], b, stride=stride, padding=padding, dilation=dilation)


# -- CBS: conv + batch norm + SiLU ------------------------------------------------------------

def init_cbs(p: BlockParams, cin: int, cout: int, k: int, rng) -> BlockParams:
    init_conv(p, "conv", cin, cout, k, rng, bias=False)
    dt = T.default_dtype()
    p.add("bn.gamma", np.ones(cout, dtype=dt))
    p.add("bn.beta", np.zeros(cout, dtype=dt))
    p.add_buffer("bn.running_mean", np.zeros(cout))
    p.add_buffer("bn.running_var", np.ones(cout))
    return p


def cbs_forward(x: Tensor, p: BlockParams, stride: int = 1, dilation: int = 1, training: bool = True,
                act: bool = True) -> Tensor:
    k = p["conv.weight"].shape[-1]
    pad = dilation * (k - 1) // 2
    y = T.conv2d(x, p["conv.weight"], None, stride=stride, padding=pad, dilation=dilation)
    y = T.batch_norm(y, p["bn.gamma"], p["bn.beta"], p.buffer("bn.running_mean"),
                     p.buffer("bn.running_var"), training)
    return T.silu(y) if act else y


# -- RFB -------------------------------------------------------------------------------------

@dataclass
class RFBConfig:
    """Branch layout: each branch is 1x1 reduce, ``pre_kernels`` convs, then a dilated 3x3."""

    in_channels: int
    out_channels: int
    branches: list[tuple[int, int]] = field(default_factory=lambda: [(1, 1), (3, 3), (5, 5)])
    shortcut_scale: float = 1.0
    branch_channels: int | None = None

    def __post_init__(self):
        if len(self.branches) < 2:
            raise ConfigError("RFB needs at least two branches")
        for k, d in self.branches:
            if d <= 0:
                raise ConfigError(f"dilation must be positive, got {d}")
            if k not in (1, 3, 5, 7):
                raise ConfigError(f"unsupported pre-kernel size {k}")
        if self.branch_channels is None:
            self.branch_channels = max(1, self.in_channels // 4)

    @property
    def fuse_in(self) -> int:
        return self.branch_channels * len(self.branches)


def _pre_convs(k: int) -> int:
    # k x k receptive field as stacked 3x3 convs; 1 means no extra conv
    return (k - 1) // 2


def init_rfb(p: BlockParams, cfg: RFBConfig, rng) -> BlockParams:
    bc = cfg.branch_channels
    for bi, (k, _d) in enumerate(cfg.branches):
        b = p.scope(f"branch{bi}")
        init_cbs(b.scope("reduce"), cfg.in_channels, bc, 1, rng)
        for j in range(_pre_convs(k)):
            init_cbs(b.scope(f"pre{j}"), bc, bc, 3, rng)
        init_cbs(b.scope("dilated"), bc, bc, 3, rng)
    fused = sum(bc for _ in cfg.branches)
    if fused != cfg.fuse_in:
        raise ConfigError(f"branch widths sum to {fused}, fuse expects {cfg.fuse_in}")
    init_conv(p, "fuse", cfg.fuse_in, cfg.out_channels, 1, rng)
    init_conv(p, "shortcut", cfg.in_channels, cfg.out_channels, 1, rng)
    return p


def rfb_forward(x: Tensor, cfg: RFBConfig, p: BlockParams, training: bool = True) -> Tensor:
    outs = []
    for bi, (k, d) in enumerate(cfg.branches):
        b = p.scope(f"branch{bi}")
        y = cbs_forward(x, b.scope("reduce"), training=training)
        for j in range(_pre_convs(k)):
            y = cbs_forward(y, b.scope(f"pre{j}"), training=training)
        y = cbs_forward(y, b.scope("dilated"), dilation=d, training=training, act=False)
        outs.append(y)
    cat = T.concat(outs, axis=1)
    if cat.shape[1] != p["fuse.weight"].shape[1]:
        raise ConfigError(f"concat width {cat.shape[1]} != fuse input {p['fuse.weight'].shape[1]}")
    fused = conv(cat, p, "fuse")
    short = conv(x, p, "shortcut")
    return T.relu(fused + T.scale(short, cfg.shortcut_scale))


# -- SPPCSPC ---------------------------------------------------------------------------------

SPP_KERNELS = (5, 9, 13)


def init_sppcspc(p: BlockParams, cin: int, cout: int, rng, expansion: float = 0.5) -> BlockParams:
    hid = max(1, int(2 * cout * expansion))
    init_cbs(p.scope("cv1"), cin, hid, 1, rng)
    init_cbs(p.scope("cv2"), cin, hid, 1, rng)
    init_cbs(p.scope("cv3"), hid, hid, 3, rng)
    init_cbs(p.scope("cv4"), hid, hid, 1, rng)
    init_cbs(p.scope("cv5"), (len(SPP_KERNELS) + 1) * hid, hid, 1, rng)
    init_cbs(p.scope("cv6"), hid, hid, 3, rng)
    init_cbs(p.scope("cv7"), 2 * hid, cout, 1, rng)
    return p


def sppcspc_forward(x: Tensor, p: BlockParams, training: bool = True) -> Tensor:
    def c(name, t):
        return cbs_forward(t, p.scope(name), training=training)

    b = c("cv4", c("cv3", c("cv1", x)))
    pooled = [T.pool_max2d(b, k, stride=1, padding=k // 2) for k in SPP_KERNELS]
    b = c("cv6", c("cv5", T.concat([b] + pooled, axis=1)))
    a = c("cv2", x)
    return c("cv7", T.concat([b, a], axis=1))


# -- coordinate attention ---------------------------------------------------------------------

@dataclass
class CAConfig:
    channels: int
    reduction: int = 8
    min_mid: int = 4

    def __post_init__(self):
        if self.reduction < 1:
            raise ConfigError("reduction must be a positive integer")

    @property
    def mid(self) -> int:
        m = self.channels // self.reduction
        if m < 1:
            log.warning("CA: %d channels / reduction %d rounds below 1, clamped to %d",
                        self.channels, self.reduction, self.min_mid)
        return max(self.min_mid, m, 1)


def init_ca(p: BlockParams, cfg: CAConfig, rng) -> BlockParams:
    mid = cfg.mid
    init_cbs(p.scope("embed"), cfg.channels, mid, 1, rng)
    init_conv(p, "conv_h", mid, cfg.channels, 1, rng)
    init_conv(p, "conv_w", mid, cfg.channels, 1, rng)
    return p


def ca_forward(x: Tensor, cfg: CAConfig, p: BlockParams, training: bool = True):
    """Returns (y, g_h [N,C,H,1], g_w [N,C,1,W]) with y = x * g_h * g_w."""
    n, c, h, w = x.shape
    xh = T.pool_avg_h(x)                            # [N,C,H,1]
    xw = T.permute(T.pool_avg_w(x), (0, 1, 3, 2))   # [N,C,W,1]
    f = cbs_forward(T.concat([xh, xw], axis=2), p.scope("embed"), training=training)
    fh, fw = T.split(f, [h, w], axis=2)
    g_h = T.sigmoid(conv(fh, p, "conv_h"))
    g_w = T.sigmoid(conv(T.permute(fw, (0, 1, 3, 2)), p, "conv_w"))
    return x * g_h * g_w, g_h, g_w


def attention_map(g_h, g_w) -> np.ndarray:
    """Per-channel outer product g_h(i) * g_w(j) -> [N,C,H,W]."""
    gh = g_h.data if isinstance(g_h, Tensor) else np.asarray(g_h)
    gw = g_w.data if isinstance(g_w, Tensor) else np.asarray(g_w)
    return gh * gw


def attention_maps_export(g_h, g_w, path) -> tuple[str, str]:
    """Write the per-channel gate map and its channel mean as TNSR files.

    ``path`` is a file stem; ``<path>.tnsr`` holds [N,C,H,W] and
    ``<path>_mean.tnsr`` holds the channel mean [N,1,H,W].
    """
    amap = attention_map(g_h, g_w)
    stem = str(path)
    if stem.endswith(".tnsr"):
        stem = stem[:-5]
    full, avg = f"{stem}.tnsr", f"{stem}_mean.tnsr"
    T.save_tnsr(full, amap)
    T.save_tnsr(avg, amap.mean(axis=1, keepdims=True))
    return full, avg
