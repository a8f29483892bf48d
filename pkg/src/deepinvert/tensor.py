"""Dense n-d tensor with reverse-mode automatic differentiation.

The graph is built per forward pass (define-by-run): every op returns a new
Tensor holding a backward closure that scatters the incoming gradient to its
parents. Calling ``backward()`` on a scalar walks the graph once in reverse
topological order; calling it a second time on the same graph raises.

Default scalar precision is float32; tests switch the whole stack to float64
via ``set_default_dtype`` for finite-difference headroom.
"""

from __future__ import annotations

import contextlib

import numpy as np

_DEFAULT_DTYPE = np.dtype(np.float32)
_GRAD_ENABLED = True


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported default dtype {dt}")
    _DEFAULT_DTYPE = dt


def get_default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily switch the stack-wide scalar precision."""
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (pure inference)."""
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn",
                 "_op", "_backward_run")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward_fn = None
        self._op = "leaf"
        self._backward_run = False

    @staticmethod
    def _from_op(data: np.ndarray, parents, op: str, backward_fn):
        t = Tensor.__new__(Tensor)
        t.data = data
        t.grad = None
        t._backward_run = False
        t._op = op
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            t.requires_grad = True
            t._parents = tuple(parents)
            t._backward_fn = backward_fn
        else:
            t.requires_grad = False
            t._parents = ()
            t._backward_fn = None
        return t

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def copy(self) -> "Tensor":
        t = Tensor(self.data.copy())
        t.requires_grad = self.requires_grad
        return t

    def __repr__(self):
        return f"Tensor(op={self._op}, shape={self.shape}, requires_grad={self.requires_grad})"

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        np.add(self.grad, g, out=self.grad)

    def zero_grad(self) -> None:
        self.grad = None

    # -- backward -----------------------------------------------------------

    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {self.shape}")
        if self._backward_run:
            raise RuntimeError("backward already called on this graph; re-run forward first")
        if not self.requires_grad:
            raise RuntimeError("loss does not require grad; nothing to differentiate")
        self._backward_run = True

        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited and p.requires_grad:
                    stack.append((p, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)
                # free the closure so intermediate buffers can be collected
                node._backward_fn = None
                node._parents = ()
                if node is not self:
                    node.grad = None

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return mul(self, Tensor(np.asarray(-1.0, dtype=self.data.dtype)))

    def __pow__(self, c):
        return pow_const(self, c)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __getitem__(self, idx):
        return getitem(self, idx)

    # method-style aliases used throughout the layer code
    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self):
        return transpose2d(self)

    @property
    def T(self):
        return transpose2d(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def relu(self):
        return relu(self)

    def clamp(self, lo, hi):
        return clamp(self, lo, hi)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_DEFAULT_DTYPE))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise ops ----------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data

    def bwd(g):
        a._accum(_unbroadcast(g, a.data.shape))
        b._accum(_unbroadcast(g, b.data.shape))

    return Tensor._from_op(out_data, (a, b), "add", bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data - b.data

    def bwd(g):
        a._accum(_unbroadcast(g, a.data.shape))
        b._accum(_unbroadcast(-g, b.data.shape))

    return Tensor._from_op(out_data, (a, b), "sub", bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data * b.data

    def bwd(g):
        a._accum(_unbroadcast(g * b.data, a.data.shape))
        b._accum(_unbroadcast(g * a.data, b.data.shape))

    return Tensor._from_op(out_data, (a, b), "mul", bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data / b.data

    def bwd(g):
        a._accum(_unbroadcast(g / b.data, a.data.shape))
        b._accum(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return Tensor._from_op(out_data, (a, b), "div", bwd)


def pow_const(a: Tensor, c) -> Tensor:
    c = float(c)
    out_data = a.data ** c

    def bwd(g):
        a._accum(g * c * a.data ** (c - 1.0))

    return Tensor._from_op(out_data, (a,), f"pow{c}", bwd)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def bwd(g):
        a._accum(g * out_data)

    return Tensor._from_op(out_data, (a,), "exp", bwd)


def log(a: Tensor) -> Tensor:
    out_data = np.log(a.data)

    def bwd(g):
        a._accum(g / a.data)

    return Tensor._from_op(out_data, (a,), "log", bwd)


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def bwd(g):
        a._accum(g / (2.0 * out_data))

    return Tensor._from_op(out_data, (a,), "sqrt", bwd)


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0.0)

    def bwd(g):
        # subgradient at 0 is 0
        a._accum(g * (a.data > 0))

    return Tensor._from_op(out_data, (a,), "relu", bwd)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    out_data = np.clip(a.data, lo, hi)

    def bwd(g):
        a._accum(g * ((a.data > lo) & (a.data < hi)))

    return Tensor._from_op(out_data, (a,), "clamp", bwd)


# -- reductions and shape ops --------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, axes)
        a._accum(np.broadcast_to(g, a.data.shape))

    return Tensor._from_op(np.asarray(out_data), (a,), "sum", bwd)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod(
        [a.data.shape[i] for i in (axis if isinstance(axis, tuple) else (axis,))])
    out_data = a.data.mean(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, axes)
        a._accum(np.broadcast_to(g, a.data.shape) / n)

    return Tensor._from_op(np.asarray(out_data), (a,), "mean", bwd)


def reshape(a: Tensor, shape) -> Tensor:
    out_data = a.data.reshape(shape)

    def bwd(g):
        a._accum(g.reshape(a.data.shape))

    return Tensor._from_op(out_data, (a,), "reshape", bwd)


def transpose2d(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ValueError(f"transpose expects a 2-d tensor, got shape {a.shape}")
    out_data = a.data.T

    def bwd(g):
        a._accum(g.T)

    return Tensor._from_op(out_data, (a,), "transpose", bwd)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]

    def bwd(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            t._accum(piece)

    return Tensor._from_op(out_data, tuple(tensors), "concat", bwd)


def getitem(a: Tensor, idx) -> Tensor:
    out_data = a.data[idx]

    def bwd(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        a._accum(full)

    return Tensor._from_op(np.asarray(out_data), (a,), "getitem", bwd)


def flip(a: Tensor, axis: int) -> Tensor:
    out_data = np.flip(a.data, axis=axis)

    def bwd(g):
        a._accum(np.flip(g, axis=axis))

    return Tensor._from_op(out_data, (a,), "flip", bwd)


def roll(a: Tensor, shift, axis) -> Tensor:
    out_data = np.roll(a.data, shift, axis=axis)

    def bwd(g):
        neg = tuple(-s for s in shift) if isinstance(shift, tuple) else -shift
        a._accum(np.roll(g, neg, axis=axis))

    return Tensor._from_op(out_data, (a,), "roll", bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def bwd(g):
        a._accum(g @ b.data.T)
        b._accum(a.data.T @ g)

    return Tensor._from_op(out_data, (a, b), "matmul", bwd)


# -- image ops -----------------------------------------------------------------


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int):
    n, c, h, w = x.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    sn, sc, sh, sw = x.strides
    view = np.lib.stride_tricks.as_strided(
        x, (n, c, kh, kw, oh, ow),
        (sn, sc, sh, sw, sh * stride, sw * stride),
        writeable=False)
    # (N, OH, OW, C*KH*KW)
    return np.ascontiguousarray(view.transpose(0, 4, 5, 1, 2, 3)).reshape(n, oh, ow, c * kh * kw), oh, ow


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation, NCHW input, (F, C, KH, KW) kernel."""
    if x.data.ndim != 4:
        raise ValueError(f"conv2d input must be NCHW, got shape {x.shape}")
    if w.data.ndim != 4:
        raise ValueError(f"conv2d kernel must be (F,C,KH,KW), got shape {w.shape}")
    n, c, h, wdt = x.data.shape
    f, cw, kh, kw = w.data.shape
    if c != cw:
        raise ValueError(f"conv2d channel mismatch: input has {c}, kernel expects {cw}")
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise ValueError(f"conv2d kernel {kh}x{kw} larger than padded input {xp.shape[2]}x{xp.shape[3]}")
    cols, oh, ow = _im2col(xp, kh, kw, stride)
    wmat = w.data.reshape(f, -1)
    out_data = (cols.reshape(-1, c * kh * kw) @ wmat.T).reshape(n, oh, ow, f).transpose(0, 3, 1, 2)
    out_data = np.ascontiguousarray(out_data)
    if b is not None:
        out_data += b.data.reshape(1, f, 1, 1)

    parents = (x, w) if b is None else (x, w, b)

    def bwd(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, f)
        w._accum((gmat.T @ cols.reshape(-1, c * kh * kw)).reshape(f, c, kh, kw))
        if b is not None:
            b._accum(g.sum(axis=(0, 2, 3)))
        gcols = (gmat @ wmat).reshape(n, oh, ow, c, kh, kw)
        gx = np.zeros_like(xp)
        # scatter each kernel offset back; kh*kw iterations only
        for i in range(kh):
            for j in range(kw):
                gx[:, :, i:i + oh * stride:stride, j:j + ow * stride:stride] += \
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        if padding:
            gx = gx[:, :, padding:-padding, padding:-padding]
        x._accum(gx)

    return Tensor._from_op(out_data, parents, "conv2d", bwd)


def maxpool2d(x: Tensor, k: int) -> Tensor:
    """Max pooling with kernel == stride == k; spatial dims must divide k."""
    n, c, h, w = x.data.shape
    if h % k or w % k:
        raise ValueError(f"maxpool2d kernel {k} does not divide spatial dims {h}x{w}")
    oh, ow = h // k, w // k
    windows = x.data.reshape(n, c, oh, k, ow, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, k * k)
    arg = windows.argmax(axis=-1)
    out_data = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]

    def bwd(g):
        gw = np.zeros((n, c, oh, ow, k * k), dtype=g.dtype)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        x._accum(gw.reshape(n, c, oh, ow, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w))

    return Tensor._from_op(np.ascontiguousarray(out_data), (x,), "maxpool2d", bwd)


def avgpool2d(x: Tensor, k: int) -> Tensor:
    """Average pooling with kernel == stride == k."""
    n, c, h, w = x.data.shape
    if h % k or w % k:
        raise ValueError(f"avgpool2d kernel {k} does not divide spatial dims {h}x{w}")
    oh, ow = h // k, w // k
    out_data = x.data.reshape(n, c, oh, k, ow, k).mean(axis=(3, 5))

    def bwd(g):
        gx = np.broadcast_to(g[:, :, :, None, :, None] / (k * k), (n, c, oh, k, ow, k))
        x._accum(gx.reshape(n, c, h, w))

    return Tensor._from_op(out_data, (x,), "avgpool2d", bwd)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Nearest-neighbor upsampling of an NCHW tensor by an integer factor."""
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    if x.data.ndim != 4:
        raise ValueError(f"upsample_nearest expects NCHW, got shape {x.shape}")
    if factor == 1:
        return reshape(x, x.data.shape)
    n, c, h, w = x.data.shape
    out_data = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def bwd(g):
        x._accum(g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)))

    return Tensor._from_op(out_data, (x,), "upsample_nearest", bwd)


# -- composite losses and activations ------------------------------------------


def log_softmax(logits: Tensor, axis: int = -1) -> Tensor:
    shift = sub(logits, Tensor(logits.data.max(axis=axis, keepdims=True)))
    return sub(shift, log(tsum(exp(shift), axis=axis, keepdims=True)))


def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    return exp(log_softmax(logits, axis))


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of integer labels, natural log."""
    labels = np.asarray(labels)
    n, k = logits.data.shape
    onehot = np.zeros((n, k), dtype=logits.data.dtype)
    onehot[np.arange(n), labels] = 1.0
    lp = log_softmax(logits, axis=1)
    return mul(tsum(mul(lp, Tensor(onehot))), Tensor(np.asarray(-1.0 / n, dtype=logits.data.dtype)))
