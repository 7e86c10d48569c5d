"""Dense N-d tensor with reverse-mode differentiation on a numpy backend.

Only the operators the detection blocks need are provided: pointwise math,
same-rank singleton broadcasting, reductions, reshape/permute, concat/split,
dilated conv2d, directional average pooling and max pooling.

The graph is recorded implicitly through parent links; ``backward`` replays it
in reverse topological order. ``detach`` cuts a node out of that replay.
"""
from __future__ import annotations

import contextlib
import struct
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


_state = {"dtype": np.float32, "grad_enabled": True, "freeze": None, "macs": 0}


def default_dtype():
    return _state["dtype"]


@contextlib.contextmanager
def precision(dtype):
    """Create new tensors in ``dtype`` (np.float32 or np.float64) inside the block."""
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype}")
    prev = _state["dtype"]
    _state["dtype"] = dtype
    try:
        yield
    finally:
        _state["dtype"] = prev


@contextlib.contextmanager
def no_grad():
    prev = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = prev


def is_grad_enabled() -> bool:
    return _state["grad_enabled"]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64) else default_dtype()
        self.data = np.asarray(data, dtype=dtype, order="C")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = ""
        self.name = name

    # -- construction helpers -------------------------------------------------
    @classmethod
    def zeros(cls, *shape, requires_grad=False):
        return cls(np.zeros(shape, dtype=default_dtype()), requires_grad=requires_grad)

    @classmethod
    def ones(cls, *shape, requires_grad=False):
        return cls(np.ones(shape, dtype=default_dtype()), requires_grad=requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def astype(self, dtype) -> Tensor:
        """Leaf copy in another precision (does not join the graph)."""
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, dtype=dtype, name=self.name)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, op={self.op or 'leaf'})"

    def __len__(self):
        return self.shape[0]

    # -- graph ------------------------------------------------------------------
    def zero_grad(self):
        self.grad = None

    def tape(self) -> list[Tensor]:
        """Nodes reachable from self in topological order (parents first)."""
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in reversed(node._parents):
                if id(p) not in seen:
                    stack.append((p, False))
        return order

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.dtype).reshape(self.shape)
        order = self.tape()
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and not node._parents:
                node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            contribs = node._backward(g)
            for parent, pg in zip(node._parents, contribs):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar -----------------------------------------------------------
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return scale(self, -1.0)
    def __pow__(self, p): return power(self, p)
    def __getitem__(self, idx): return index(self, idx)

    def sum(self, axis=None, keepdims=False): return tsum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)
    def permute(self, *axes): return permute(self, axes)
    def exp(self): return exp(self)
    def log(self): return log(self)
    def sigmoid(self): return sigmoid(self)
    def relu(self): return relu(self)
    def silu(self): return silu(self)
    def detach(self): return detach(self)


def _c(a: np.ndarray) -> np.ndarray:
    # C-contiguous without promoting 0-d arrays (unlike np.ascontiguousarray)
    return np.asarray(a, order="C")


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    out.op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else default_dtype()
    return Tensor(np.asarray(x, dtype=dtype), dtype=dtype)


def _check_dtype(a: Tensor, b: Tensor):
    if a.dtype != b.dtype:
        raise TypeError(f"mixed precision in one graph: {a.dtype} vs {b.dtype}")


def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    if a == b:
        return a
    if len(a) == 0:
        return b
    if len(b) == 0:
        return a
    if len(a) != len(b):
        raise ShapeError(f"cannot broadcast {a} with {b}: rank differs")
    out = []
    for x, y in zip(a, b):
        if x == y or y == 1:
            out.append(x)
        elif x == 1:
            out.append(y)
        else:
            raise ShapeError(f"cannot broadcast {a} with {b}")
    return tuple(out)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum(), dtype=g.dtype)
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


def _binary_operands(a, b):
    if not isinstance(a, Tensor):
        a = as_tensor(a, like=b)
    if not isinstance(b, Tensor):
        b = as_tensor(b, like=a)
    _check_dtype(a, b)
    _broadcast_shape(a.shape, b.shape)
    return a, b


# -- pointwise ------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)
    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)
    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)
    return _make(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        ga = g / bd
        return _unbroadcast(ga, ad.shape), _unbroadcast(-ga * out, bd.shape)
    return _make(out, (a, b), bw, "div")


def maximum(a, b) -> Tensor:
    """Elementwise max; ties send the gradient to the first operand."""
    a, b = _binary_operands(a, b)
    pick_a = a.data >= b.data

    def bw(g):
        return _unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)
    return _make(np.where(pick_a, a.data, b.data), (a, b), bw, "maximum")


def minimum(a, b) -> Tensor:
    """Elementwise min; ties send the gradient to the first operand."""
    a, b = _binary_operands(a, b)
    pick_a = a.data <= b.data

    def bw(g):
        return _unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)
    return _make(np.where(pick_a, a.data, b.data), (a, b), bw, "minimum")


def scale(x: Tensor, k: float) -> Tensor:
    k = x.dtype.type(k)
    return _make(x.data * k, (x,), lambda g: (g * k,), "scale")


def power(x: Tensor, p: float) -> Tensor:
    xd = x.data

    def bw(g):
        return (g * p * xd ** (p - 1),)
    return _make(xd ** p, (x,), bw, "pow")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,), "log")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def arctan(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.arctan(xd), (x,), lambda g: (g / (1 + xd * xd),), "arctan")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid_np(x.data)
    return _make(out, (x,), lambda g: (g * out * (1 - out),), "sigmoid")


def silu(x: Tensor) -> Tensor:
    xd = x.data
    s = _sigmoid_np(xd)

    def bw(g):
        return (g * (s * (1 + xd * (1 - s))),)
    return _make(xd * s, (x,), bw, "silu")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def softplus(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.logaddexp(0, xd).astype(xd.dtype), (x,), lambda g: (g * _sigmoid_np(xd),), "softplus")


def clip(x: Tensor, lo=None, hi=None) -> Tensor:
    """Clamp values; gradient is zero where clamping was active."""
    xd = x.data
    mask = np.ones(xd.shape, dtype=bool)
    if lo is not None:
        mask &= xd >= lo
    if hi is not None:
        mask &= xd <= hi
    return _make(np.clip(xd, lo, hi), (x,), lambda g: (g * mask,), "clip")


def elementwise(op: str, *operands, k: float | None = None) -> Tensor:
    """Dispatch by name: add, mul, sigmoid, silu, relu, exp, scale."""
    table = {"add": add, "mul": mul, "sigmoid": sigmoid, "silu": silu, "relu": relu, "exp": exp}
    if op == "scale":
        (x,) = operands
        return scale(x, k if k is not None else 1.0)
    if op not in table:
        raise ValueError(f"unknown elementwise op {op!r}")
    return table[op](*operands)


def detach(x: Tensor) -> Tensor:
    """Same values, no gradient to ancestors."""
    data = x.data
    frz = _state["freeze"]
    if frz is not None:
        # grad_check replays detached values from the unperturbed pass
        if frz["record"]:
            frz["values"].append(data.copy())
        else:
            data = frz["values"][frz["i"]]
            frz["i"] += 1
    out = Tensor(data, dtype=x.dtype)
    out.op = "detach"
    return out


# -- reductions & shape ------------------------------------------------------------

def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = x.shape
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims), dtype=x.dtype)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)
    return _make(out, (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(tsum(x, axis, keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(_c(x.data.transpose(axes)), (x,),
                 lambda g: (_c(g.transpose(inv)),), "permute")


def index(x: Tensor, idx) -> Tensor:
    """Basic or integer-array indexing; repeated indices accumulate."""
    shape = x.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, idx, g)
        return (full,)
    return _make(_c(x.data[idx]), (x,), bw, "index")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of empty list")
    ref = tensors[0]
    nd = ref.ndim
    axis = axis % nd
    for t in tensors[1:]:
        _check_dtype(ref, t)
        if t.ndim != nd or any(t.shape[i] != ref.shape[i] for i in range(nd) if i != axis):
            raise ShapeError(f"concat: non-axis dims differ {ref.shape} vs {t.shape}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(_c(p) for p in np.split(g, bounds, axis=axis))
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def split(x: Tensor, sizes: Sequence[int], axis: int) -> list[Tensor]:
    axis = axis % x.ndim
    if sum(sizes) != x.shape[axis]:
        raise ShapeError(f"split sizes {list(sizes)} do not sum to {x.shape[axis]}")
    outs = []
    start = 0
    for s in sizes:
        sl = [slice(None)] * x.ndim
        sl[axis] = slice(start, start + s)
        outs.append(index(x, tuple(sl)))
        start += s
    return outs


# -- spatial ops ---------------------------------------------------------------------

def _out_size(n, k, stride, padding, dilation):
    return (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _im2col(xt: np.ndarray, kh, kw, stride, dilation, ho, wo) -> np.ndarray:
    """Channel-major padded input [C,N,Hp,Wp] -> columns [C,kh,kw,N,ho,wo]."""
    c, n = xt.shape[:2]
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=xt.dtype)
    for i in range(kh):
        hi = i * dilation
        for j in range(kw):
            wj = j * dilation
            cols[:, i, j] = xt[:, :, hi:hi + stride * (ho - 1) + 1:stride, wj:wj + stride * (wo - 1) + 1:stride]
    return cols


def _col2im(cols: np.ndarray, xt_shape, kh, kw, stride, dilation, ho, wo) -> np.ndarray:
    dx = np.zeros(xt_shape, dtype=cols.dtype)
    for i in range(kh):
        hi = i * dilation
        for j in range(kw):
            wj = j * dilation
            dx[:, :, hi:hi + stride * (ho - 1) + 1:stride, wj:wj + stride * (wo - 1) + 1:stride] += cols[:, i, j]
    return dx


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0, dilation: int = 1) -> Tensor:
    """2-d cross-correlation with zero padding and dilation (im2col + one GEMM)."""
    if stride < 1 or dilation < 1:
        raise ValueError(f"stride and dilation must be positive, got stride={stride} dilation={dilation}")
    if padding < 0:
        raise ValueError(f"padding must be non-negative, got {padding}")
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if cin != wcin:
        raise ShapeError(f"conv2d: input has {cin} channels, weight expects {wcin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    _check_dtype(x, weight)
    if bias is not None:
        _check_dtype(x, bias)
    if h + 2 * padding < dilation * (kh - 1) + 1 or w + 2 * padding < dilation * (kw - 1) + 1:
        raise ShapeError(f"conv2d: kernel extent exceeds padded input {x.shape}")
    ho = _out_size(h, kh, stride, padding, dilation)
    wo = _out_size(w, kw, stride, padding, dilation)
    _state["macs"] += n * cout * ho * wo * cin * kh * kw
    w2 = weight.data.reshape(cout, cin * kh * kw)

    # channel-major layout turns the whole conv into one [Cout,K] x [K,N*ho*wo] product
    xt = x.data.transpose(1, 0, 2, 3)
    pointwise = kh == 1 and kw == 1 and padding == 0
    if pointwise:
        cols2 = _c(xt[:, :, ::stride, ::stride]).reshape(cin, -1)
    else:
        xp = np.zeros((cin, n, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
        xp[:, :, padding:padding + h, padding:padding + w] = xt
        cols2 = _im2col(xp, kh, kw, stride, dilation, ho, wo).reshape(cin * kh * kw, -1)
    out2 = w2 @ cols2
    if bias is not None:
        out2 += bias.data[:, None]
    out = _c(out2.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3))

    def bw(g):
        g2 = _c(g.transpose(1, 0, 2, 3)).reshape(cout, -1)
        gw = (g2 @ cols2.T).reshape(weight.shape)
        gcols = w2.T @ g2
        if pointwise:
            gxt = np.zeros((cin, n, h, w), dtype=g.dtype)
            gxt[:, :, ::stride, ::stride] = gcols.reshape(cin, n, ho, wo)
        else:
            gxp = _col2im(gcols.reshape(cin, kh, kw, n, ho, wo), (cin, n, h + 2 * padding, w + 2 * padding),
                          kh, kw, stride, dilation, ho, wo)
            gxt = gxp[:, :, padding:padding + h, padding:padding + w]
        gx = _c(gxt.transpose(1, 0, 2, 3))
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=1)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, bw, "conv2d")


@contextlib.contextmanager
def count_macs():
    """Count conv multiply-accumulates issued inside the block; read ``box["macs"]`` after exit."""
    prev = _state["macs"]
    _state["macs"] = 0
    box = {"macs": 0}
    try:
        yield box
    finally:
        box["macs"] = _state["macs"]
        _state["macs"] = prev + box["macs"]


def pool_avg_h(x: Tensor) -> Tensor:
    """Mean over width: [N,C,H,W] -> [N,C,H,1]."""
    if x.ndim != 4 or x.shape[2] < 1 or x.shape[3] < 1:
        raise ShapeError(f"pool_avg_h expects non-empty [N,C,H,W], got {x.shape}")
    return mean(x, axis=3, keepdims=True)


def pool_avg_w(x: Tensor) -> Tensor:
    """Mean over height: [N,C,H,W] -> [N,C,1,W]."""
    if x.ndim != 4 or x.shape[2] < 1 or x.shape[3] < 1:
        raise ShapeError(f"pool_avg_w expects non-empty [N,C,H,W], got {x.shape}")
    return mean(x, axis=2, keepdims=True)


def pool_max2d(x: Tensor, kernel: int, stride: int | None = None, padding: int = 0) -> Tensor:
    """Max pooling with -inf padding. Ties route the gradient to the lowest linear index."""
    stride = kernel if stride is None else stride
    if kernel < 1 or stride < 1 or padding < 0:
        raise ValueError("pool_max2d: kernel/stride must be positive, padding non-negative")
    if x.ndim != 4:
        raise ShapeError(f"pool_max2d expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    if kernel > h + 2 * padding or kernel > w + 2 * padding:
        raise ValueError(f"pool_max2d: kernel {kernel} larger than padded input {x.shape}")
    ho = (h + 2 * padding - kernel) // stride + 1
    wo = (w + 2 * padding - kernel) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                constant_values=-np.inf) if padding else x.data
    hp, pw = xp.shape[2], xp.shape[3]
    # separable: max along width, then along height. Strict '>' keeps the first
    # maximum in each pass, i.e. the lowest (row, col) which is the lowest linear index.
    hbest = np.full((n, c, hp, wo), -np.inf, dtype=x.dtype)
    harg = np.zeros(hbest.shape, dtype=np.int32)
    for j in range(kernel):
        win = xp[:, :, :, j:j + stride * (wo - 1) + 1:stride]
        better = win > hbest
        np.copyto(hbest, win, where=better)
        np.putmask(harg, better, j)
    best = np.full((n, c, ho, wo), -np.inf, dtype=x.dtype)
    arg_i = np.zeros(best.shape, dtype=np.int32)
    arg_j = np.zeros(best.shape, dtype=np.int32)
    for i in range(kernel):
        rows = slice(i, i + stride * (ho - 1) + 1, stride)
        win = hbest[:, :, rows]
        better = win > best
        np.copyto(best, win, where=better)
        np.putmask(arg_i, better, i)
        np.copyto(arg_j, harg[:, :, rows], where=better)

    def bw(g):
        oi = np.arange(ho, dtype=np.int64).reshape(1, 1, ho, 1) * stride + arg_i
        oj = np.arange(wo, dtype=np.int64).reshape(1, 1, 1, wo) * stride + arg_j
        lin = oi * pw + oj + np.arange(n * c, dtype=np.int64).reshape(n, c, 1, 1) * (hp * pw)
        gp = np.bincount(lin.ravel(), weights=g.ravel(), minlength=n * c * hp * pw)
        gp = gp.astype(g.dtype).reshape(n, c, hp, pw)
        return (_c(gp[:, :, padding:padding + h, padding:padding + w]),)
    return _make(best, (x,), bw, "pool_max2d")


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization of [N,C,H,W]; updates running stats in place when training."""
    c = x.shape[1]
    if training:
        mu = mean(x, axis=(0, 2, 3), keepdims=True)
        xc = x - mu
        var = mean(xc * xc, axis=(0, 2, 3), keepdims=True)
        m = x.data.size // c
        running_mean *= 1 - momentum
        running_mean += momentum * mu.data.reshape(c)
        unbiased = var.data.reshape(c) * (m / max(m - 1, 1))
        running_var *= 1 - momentum
        running_var += momentum * unbiased
        xhat = xc / sqrt(var + eps)
    else:
        mu = running_mean.reshape(1, c, 1, 1).astype(x.dtype)
        inv = (1.0 / np.sqrt(running_var + eps)).reshape(1, c, 1, 1).astype(x.dtype)
        xhat = (x - Tensor(mu)) * Tensor(inv)
    return xhat * gamma.reshape(1, c, 1, 1) + beta.reshape(1, c, 1, 1)


# -- finite-difference checker ------------------------------------------------------

@contextlib.contextmanager
def _frozen_detach(record: bool, values: list):
    prev = _state["freeze"]
    _state["freeze"] = {"record": record, "values": values, "i": 0}
    try:
        yield
    finally:
        _state["freeze"] = prev


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-5, tol: float = 1e-4,
               max_coords: int | None = None, seed: int = 0, freeze_detached: bool = True) -> dict:
    """Compare backward() against central differences.

    ``f`` maps the input tensors to a scalar Tensor. All inputs must be 64-bit.
    ``max_coords`` limits how many coordinates per input are probed (sampled
    without replacement with ``seed``); None probes every coordinate.

    With ``freeze_detached`` every ``detach`` output keeps its value from the
    unperturbed evaluation, so the numeric side differentiates the same
    surrogate that backward() does.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError("grad_check runs in 64-bit mode; convert inputs with .astype(np.float64)")
        t.requires_grad = True
        t.zero_grad()
    frozen: list = []
    if freeze_detached:
        with _frozen_detach(True, frozen):
            out = f(*inputs)
    else:
        out = f(*inputs)
    if out.data.size != 1:
        raise ShapeError("grad_check needs a scalar-valued function")
    out.backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs]

    rng = np.random.default_rng(seed)
    worst = 0.0
    checked = 0
    with no_grad():
        for t, ga in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = rng.choice(flat.size, size=max_coords, replace=False)
            for k in coords:
                orig = flat[k]
                flat[k] = orig + h
                fp = _replay(f, inputs, frozen, freeze_detached)
                flat[k] = orig - h
                fm = _replay(f, inputs, frozen, freeze_detached)
                flat[k] = orig
                num = (fp - fm) / (2 * h)
                an = ga.reshape(-1)[k]
                err = abs(an - num) / max(1e-12, abs(an) + abs(num))
                worst = max(worst, err)
                checked += 1
    return {"max_rel_err": worst, "pass": worst <= tol, "coords": checked}


def _replay(f, inputs, frozen, freeze):
    if not freeze:
        return f(*inputs).item()
    with _frozen_detach(False, frozen):
        return f(*inputs).item()


# -- TNSR file format -----------------------------------------------------------------

_TNSR_MAGIC = b"TNSR"
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def tnsr_bytes(arr) -> bytes:
    arr = arr.data if isinstance(arr, Tensor) else np.asarray(arr)
    if arr.dtype not in _DTYPE_CODES:
        raise TypeError(f"TNSR supports float32/float64, got {arr.dtype}")
    code = _DTYPE_CODES[arr.dtype]
    head = _TNSR_MAGIC + struct.pack("<BBB", 1, code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.asarray(arr, dtype=_CODE_DTYPES[code], order="C").tobytes()


def tnsr_from_buffer(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one TNSR record at ``offset``; returns (array, next offset)."""
    if buf[offset:offset + 4] != _TNSR_MAGIC:
        raise ValueError("not a TNSR record (bad magic)")
    version, code, rank = struct.unpack_from("<BBB", buf, offset + 4)
    if version != 1:
        raise ValueError(f"unsupported TNSR version {version}")
    if code not in _CODE_DTYPES:
        raise ValueError(f"unknown TNSR dtype code {code}")
    pos = offset + 7
    dims = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    dt = _CODE_DTYPES[code]
    count = int(np.prod(dims)) if rank else 1
    nbytes = count * dt.itemsize
    if pos + nbytes > len(buf):
        raise ValueError("truncated TNSR record")
    arr = np.frombuffer(buf, dtype=dt, count=count, offset=pos).reshape(dims).astype(dt.newbyteorder("="))
    return arr, pos + nbytes


def save_tnsr(path, arr) -> None:
    with open(path, "wb") as fh:
        fh.write(tnsr_bytes(arr))


def load_tnsr(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    arr, end = tnsr_from_buffer(buf)
    if end != len(buf):
        raise ValueError(f"{path}: trailing bytes after TNSR record")
    return arr

