"""Dense float tensors with a reverse-mode gradient tape.

Every model computation is assembled from the differentiable primitives in
this module. Storage is float32 by default; matrix products, convolutions and
normalisation statistics accumulate in float64 and round back to storage.

Usage::

    with Tape() as tape:
        y = conv2d(x, w, b, padding=1)
        loss = sum_all(mul(y, y))
    backward(tape, loss)
    w.grad
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

ACC = np.float64
_storage = [np.float32]
_tapes: list["Tape"] = []

# name -> op function; the gradcheck registry is checked against this.
DIFFERENTIABLE_OPS: dict[str, Callable] = {}

# while active, piecewise-linear ops append the sign pattern of their input
_kink_logs: list[list[np.ndarray]] = []
# while active, piecewise-linear ops take their sign pattern from here instead
_kink_replays: list = []


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class GraphError(RuntimeError):
    pass


def storage_dtype():
    return _storage[-1]


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the storage dtype (the gradient checker uses float64)."""
    _storage.append(np.dtype(dtype).type)
    try:
        yield
    finally:
        _storage.pop()


@contextlib.contextmanager
def record_kinks():
    """Collect the activation sign patterns of every relu / leaky_relu call in the block."""
    log: list[np.ndarray] = []
    _kink_logs.append(log)
    try:
        yield log
    finally:
        _kink_logs.pop()


@contextlib.contextmanager
def replay_kinks(patterns: list[np.ndarray]):
    """Evaluate relu / leaky_relu calls with the given sign patterns, in call order.

    The result agrees with the unfrozen graph wherever no activation changes
    sign, so central differences taken this way estimate the true derivative.
    """
    _kink_replays.append(iter(patterns))
    try:
        yield
    finally:
        _kink_replays.pop()


def _kink(mask: np.ndarray) -> np.ndarray:
    if _kink_replays:
        frozen = next(_kink_replays[-1])
        if frozen.shape != mask.shape:
            raise ShapeError(f"replayed sign pattern dims {list(frozen.shape)} vs {list(mask.shape)}")
        mask = frozen
    if _kink_logs:
        _kink_logs[-1].append(mask.copy())
    return mask


def _differentiable(name):
    def deco(fn):
        DIFFERENTIABLE_OPS[name] = fn
        return fn

    return deco


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_produced", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=storage_dtype())
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if 0 in arr.shape:
            raise ShapeError(f"zero extent in dims {list(arr.shape)}")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._produced = False
        self.name = name

    @property
    def dims(self) -> list[int]:
        return list(self.data.shape)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor with dims {self.dims}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(dims={self.dims}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)


class _Node:
    __slots__ = ("op", "inputs", "out", "vjp")

    def __init__(self, op, inputs, out, vjp):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.vjp = vjp


class Tape:
    """Ordered record of differentiable operations.

    Ops executed while the tape is active (``with tape:``) append one node each.
    Nodes are only recorded when at least one input requires a gradient.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._outputs: set[int] = set()

    def __enter__(self):
        _tapes.append(self)
        return self

    def __exit__(self, *exc):
        _tapes.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, op, inputs, out, vjp):
        self.nodes.append(_Node(op, inputs, out, vjp))
        self._outputs.add(id(out))

    def contains(self, t: Tensor) -> bool:
        return id(t) in self._outputs


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(op: str, inputs: Sequence[Tensor], data: np.ndarray, vjp) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=storage_dtype())
    out.grad = None
    out.name = None
    out._produced = False
    out.requires_grad = any(t.requires_grad for t in inputs)
    if out.requires_grad and _tapes:
        out._produced = True
        _tapes[-1].record(op, tuple(inputs), out, vjp)
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Replay ``tape`` in reverse and accumulate ``.grad`` on every leaf."""
    if loss.data.size != 1:
        raise GraphError(f"loss must be scalar, got dims {loss.dims}")
    if not tape.contains(loss):
        raise GraphError("loss tensor was not produced on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        in_grads = node.vjp(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if not t._produced:
                leaves[key] = t
    for key, t in leaves.items():
        g = np.asarray(grads[key], dtype=t.data.dtype).reshape(t.data.shape)
        t.grad = g if t.grad is None else t.grad + g


# ---------------------------------------------------------------------------
# elementwise and shape plumbing


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


@_differentiable("add")
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit("add", (a, b), a.data + b.data,
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


@_differentiable("sub")
def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit("sub", (a, b), a.data - b.data,
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


@_differentiable("mul")
def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _emit("mul", (a, b), ad * bd,
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


@_differentiable("scale")
def scale(a: Tensor, c: float) -> Tensor:
    return _emit("scale", (a,), a.data * c, lambda g: (g * c,))


@_differentiable("sqrt")
def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise NumericError("sqrt of negative entry")
    y = np.sqrt(a.data)
    return _emit("sqrt", (a,), y, lambda g: (g * 0.5 / y,))


@_differentiable("sum_all")
def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    s = np.sum(a.data, dtype=ACC)
    return _emit("sum_all", (a,), np.reshape(s, (1,)),
                 lambda g: (np.broadcast_to(g.reshape(()), shape).astype(g.dtype),))


@_differentiable("mean_all")
def mean_all(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    s = np.sum(a.data, dtype=ACC) / n
    return _emit("mean_all", (a,), np.reshape(s, (1,)),
                 lambda g: (np.full(shape, g.reshape(())[()] / n, dtype=g.dtype),))


@_differentiable("reshape")
def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _emit("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(old),))


@_differentiable("transpose")
def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    inv = tuple(np.argsort(axes))
    return _emit("transpose", (a,), np.ascontiguousarray(a.data.transpose(axes)),
                 lambda g: (g.transpose(inv),))


@_differentiable("concat")
def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _emit("concat", tensors, np.concatenate([t.data for t in tensors], axis=axis), vjp)


@_differentiable("stack")
def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    n = len(tensors)

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _emit("stack", tensors, np.stack([t.data for t in tensors], axis=axis), vjp)


@_differentiable("index")
def index(a: Tensor, i: int) -> Tensor:
    """Select ``a[i]`` along the leading axis."""
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[i] = g
        return (full,)

    return _emit("index", (a,), a.data[i], vjp)


# ---------------------------------------------------------------------------
# linear algebra


def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.matmul(a.astype(ACC, copy=False), b.astype(ACC, copy=False))


@_differentiable("matmul")
def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.dims} x {b.dims}")
    ad, bd = a.data, b.data
    return _emit("matmul", (a, b), _mm(ad, bd),
                 lambda g: (_mm(g, bd.T).astype(ad.dtype), _mm(ad.T, g).astype(bd.dtype)))


@_differentiable("softmax_columns")
def softmax_columns(x: Tensor) -> Tensor:
    """Column-wise softmax: every column is non-negative and sums to one."""
    xd = x.data
    if np.isnan(xd).any():
        raise NumericError("softmax_columns received NaN input")
    z = xd.astype(ACC) - xd.max(axis=0, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=0, keepdims=True)

    def vjp(g):
        g = g.astype(ACC)
        return ((s * (g - (g * s).sum(axis=0, keepdims=True))).astype(xd.dtype),)

    return _emit("softmax_columns", (x,), s, vjp)


@_differentiable("layer_norm")
def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5, axis: int = -1) -> Tensor:
    """Normalise over ``axis`` at every other index, then apply per-channel gain/shift."""
    xd = x.data
    ax = axis % xd.ndim
    c = xd.shape[ax]
    if c == 1 and eps == 0:
        raise NumericError("layer_norm over a single channel with eps=0 is undefined")
    bshape = [1] * xd.ndim
    bshape[ax] = c
    gd = gain.data.reshape(bshape)
    sd = shift.data.reshape(bshape)
    x64 = xd.astype(ACC)
    mu = x64.mean(axis=ax, keepdims=True)
    xc = x64 - mu
    var = (xc * xc).mean(axis=ax, keepdims=True)
    if eps == 0 and np.any(var == 0):
        raise NumericError("layer_norm of a constant vector with eps=0")
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gd + sd
    red = tuple(i for i in range(xd.ndim) if i != ax)

    def vjp(g):
        g = g.astype(ACC)
        gx = g * gd
        dx = inv * (gx - gx.mean(axis=ax, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=ax, keepdims=True))
        dgain = (g * xhat).sum(axis=red)
        dshift = g.sum(axis=red)
        dt = xd.dtype
        return dx.astype(dt), dgain.astype(dt), dshift.astype(dt)

    return _emit("layer_norm", (x, gain, shift), out, vjp)


@_differentiable("relu")
def relu(x: Tensor) -> Tensor:
    mask = _kink(x.data > 0)
    return _emit("relu", (x,), np.where(mask, x.data, 0), lambda g: (g * mask,))


@_differentiable("leaky_relu")
def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    xd = x.data
    neg = _kink(xd < 0)
    factor = np.where(neg, xd.dtype.type(slope), xd.dtype.type(1))
    return _emit("leaky_relu", (x,), xd * factor, lambda g: (g * factor,))


# ---------------------------------------------------------------------------
# convolution


def _as_batch(x: np.ndarray, rank: int):
    if x.ndim == rank - 1:
        return x[None], True
    if x.ndim == rank:
        return x, False
    raise ShapeError(f"expected rank {rank - 1} or {rank}, got dims {list(x.shape)}")


def _im2col(xd, kh, kw, ph, pw, s, channels_last=False):
    """Patch matrix [N*Ho*Wo, kh*kw*C] (float64, channel fastest) with zero padding (ph, pw)."""
    if channels_last:
        n, h, w, c = xd.shape
    else:
        n, c, h, w = xd.shape
    ho = (h + 2 * ph - kh) // s + 1
    wo = (w + 2 * pw - kw) // s + 1
    xp = np.zeros((n, h + 2 * ph, w + 2 * pw, c), dtype=ACC)
    xp[:, ph:ph + h, pw:pw + w] = xd if channels_last else xd.transpose(0, 2, 3, 1)
    cols = np.empty((n, ho, wo, kh, kw, c), dtype=ACC)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j] = xp[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s]
    return cols.reshape(n * ho * wo, kh * kw * c)


@_differentiable("conv2d")
def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding.

    ``x`` is [C_in, H, W] or batched [N, C_in, H, W]; ``weight`` is
    [C_out, C_in, kH, kW].
    """
    xd, squeeze = _as_batch(x.data, 4)
    wd = weight.data
    if wd.ndim != 4:
        raise ShapeError(f"conv2d weight must be rank 4, got dims {weight.dims}")
    n, cin, h, w = xd.shape
    cout, wcin, kh, kw = wd.shape
    if wcin != cin:
        raise ShapeError(f"conv2d channel mismatch: input dims {x.dims}, weight dims {weight.dims}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d kernel must be odd, got {kh}x{kw}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(f"conv2d kernel {kh}x{kw} larger than padded input {list(xd.shape)}")
    p, s = padding, stride
    ho = (h + 2 * p - kh) // s + 1
    wo = (w + 2 * p - kw) // s + 1
    cols = _im2col(xd, kh, kw, p, p, s)
    wmat = wd.transpose(0, 2, 3, 1).reshape(cout, -1).astype(ACC)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data.astype(ACC)
    out = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    if squeeze:
        out = out[0]
    dt = xd.dtype

    def vjp(g):
        g = g[None] if squeeze else g
        g_nhwc = g.transpose(0, 2, 3, 1)
        gmat = np.ascontiguousarray(g_nhwc, dtype=ACC).reshape(n * ho * wo, cout)
        gw = (gmat.T @ cols).reshape(cout, kh, kw, cin).transpose(0, 3, 1, 2).astype(dt)
        gb = None if bias is None else gmat.sum(axis=0).astype(dt)
        if s == 1 and p <= min(kh, kw) - 1:
            # full correlation of the output gradient with the flipped kernel
            gcols = _im2col(g_nhwc, kh, kw, kh - 1 - p, kw - 1 - p, 1, channels_last=True)
            wflip = wd[:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(kh * kw * cout, cin)
            gx = (gcols @ wflip.astype(ACC)).reshape(n, h, w, cin).transpose(0, 3, 1, 2)
        else:
            gcols = (gmat @ wmat).reshape(n, ho, wo, kh, kw, cin)
            gxp = np.zeros((n, h + 2 * p, w + 2 * p, cin), dtype=ACC)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + s * ho:s, j:j + s * wo:s] += gcols[:, :, :, i, j]
            gx = gxp[:, p:p + h, p:p + w].transpose(0, 3, 1, 2)
        gx = gx[0] if squeeze else gx
        return gx.astype(dt), gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit("conv2d", inputs, out, lambda g: vjp(g)[:len(inputs)])


# ---------------------------------------------------------------------------
# patches


def _patch_grid(h, w, ph, pw, s):
    if ph > h or pw > w:
        raise ShapeError(f"patch {pw}x{ph} larger than frame {w}x{h}")
    if (h - ph) % s or (w - pw) % s:
        raise ShapeError(f"frame {w}x{h} not tiled by patch {pw}x{ph} at stride {s}")
    return (h - ph) // s + 1, (w - pw) // s + 1


def _unfold_np(xd, ph, pw, s):
    t, c, h, w = xd.shape
    nh, nw = _patch_grid(h, w, ph, pw, s)
    win = sliding_window_view(xd, (ph, pw), axis=(2, 3))[:, :, ::s, ::s]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(t * nh * nw, c, ph, pw)


def _fold_sum_np(pd, out_shape, s):
    t, c, h, w = out_shape
    _, _, ph, pw = pd.shape
    nh, nw = _patch_grid(h, w, ph, pw, s)
    if pd.shape[0] != t * nh * nw or pd.shape[1] != c:
        raise ShapeError(f"fold: {pd.shape[0]} patches of {pd.shape[1]} channels inconsistent "
                         f"with out_shape {list(out_shape)} at stride {s}")
    grid = pd.reshape(t, nh, nw, c, ph, pw)
    if s == ph and s == pw:
        return grid.transpose(0, 3, 1, 4, 2, 5).reshape(t, c, h, w)
    out = np.zeros(out_shape, dtype=pd.dtype)
    for i in range(nh):
        for j in range(nw):
            out[:, :, i * s:i * s + ph, j * s:j * s + pw] += grid[:, i, j]
    return out


def _fold_counts(h, w, ph, pw, s):
    nh, nw = _patch_grid(h, w, ph, pw, s)
    cnt = np.zeros((h, w))
    for i in range(nh):
        for j in range(nw):
            cnt[i * s:i * s + ph, j * s:j * s + pw] += 1
    return cnt


@_differentiable("unfold")
def unfold(x: Tensor, patch: tuple[int, int], stride: int) -> Tensor:
    """[T,C,H,W] -> [T*N_t, C, Hp, Wp]; frame-major, then row-major over the patch grid.

    ``patch`` is (Wp, Hp).
    """
    pw, ph = patch
    xd = x.data
    if xd.ndim != 4:
        raise ShapeError(f"unfold expects [T,C,H,W], got dims {x.dims}")
    out = _unfold_np(xd, ph, pw, stride)
    shape = xd.shape
    return _emit("unfold", (x,), out, lambda g: (_fold_sum_np(g, shape, stride),))


@_differentiable("fold")
def fold(patches: Tensor, out_shape: Sequence[int], stride: int) -> Tensor:
    """Inverse of :func:`unfold`: scatter-add patches, divide by per-pixel coverage."""
    out_shape = tuple(out_shape)
    pd = patches.data
    _, _, ph, pw = pd.shape
    _, _, h, w = out_shape
    summed = _fold_sum_np(pd, out_shape, stride)
    if stride == ph and stride == pw:
        return _emit("fold", (patches,), summed,
                     lambda g: (_unfold_np(g, ph, pw, stride),))
    cnt = _fold_counts(h, w, ph, pw, stride)
    out = summed / cnt
    return _emit("fold", (patches,), out,
                 lambda g: (_unfold_np(g / cnt, ph, pw, stride),))


@_differentiable("pixel_shuffle")
def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """[C*r^2, H, W] -> [C, rH, rW] (leading batch axis optional)."""
    xd, squeeze = _as_batch(x.data, 4)
    n, cr, h, w = xd.shape
    if cr % (r * r):
        raise ShapeError(f"pixel_shuffle: {cr} channels not divisible by r^2={r * r}")
    c = cr // (r * r)
    out = xd.reshape(n, c, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, h * r, w * r)
    if squeeze:
        out = out[0]

    def vjp(g):
        gb = g[None] if squeeze else g
        gi = gb.reshape(n, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, cr, h, w)
        return (gi[0] if squeeze else gi,)

    return _emit("pixel_shuffle", (x,), out, vjp)


# ---------------------------------------------------------------------------
# warping


@_differentiable("bilinear_warp")
def bilinear_warp(x: Tensor, flow: Tensor) -> Tensor:
    """Sample ``x`` at p + flow(p) with bilinear weights; outside the frame reads zero.

    ``flow`` channel 0 is the horizontal displacement, channel 1 vertical.
    Accepts [C,H,W]/[2,H,W] or batched [N,C,H,W]/[N,2,H,W].
    """
    xd, squeeze = _as_batch(x.data, 4)
    fd, fsq = _as_batch(flow.data, 4)
    if squeeze != fsq or fd.shape[0] != xd.shape[0] or fd.shape[1] != 2 or fd.shape[2:] != xd.shape[2:]:
        raise ShapeError(f"bilinear_warp: feature dims {x.dims} vs flow dims {flow.dims}")
    if not np.all(np.isfinite(fd)):
        raise NumericError("bilinear_warp: non-finite flow")
    n, c, h, w = xd.shape
    f64 = fd.astype(ACC)
    gx = np.arange(w, dtype=ACC)[None, None, :] + f64[:, 0]
    gy = np.arange(h, dtype=ACC)[None, :, None] + f64[:, 1]
    x0 = np.floor(gx)
    y0 = np.floor(gy)
    ax = gx - x0
    ay = gy - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    flat = xd.reshape(n, c, h * w).astype(ACC)

    corners = []
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        xi, yi = x0 + dx, y0 + dy
        valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        idx = np.where(valid, yi * w + xi, 0)
        wx = ax if dx else 1 - ax
        wy = ay if dy else 1 - ay
        vals = np.take_along_axis(flat, idx.reshape(n, 1, h * w), axis=2).reshape(n, c, h, w)
        vals = vals * valid[:, None]
        corners.append((dx, dy, valid, idx, wx, wy, vals))

    out = np.zeros((n, c, h, w), dtype=ACC)
    for dx, dy, valid, idx, wx, wy, vals in corners:
        out += (wx * wy)[:, None] * vals
    dt = xd.dtype

    def vjp(g):
        g = (g[None] if squeeze else g).astype(ACC)
        gflat = np.zeros((n * c, h * w), dtype=ACC)
        gfx = np.zeros((n, h, w), dtype=ACC)
        gfy = np.zeros((n, h, w), dtype=ACC)
        chan = (np.arange(n * c) * (h * w)).reshape(n, c, 1)
        for dx, dy, valid, idx, wx, wy, vals in corners:
            wgt = (wx * wy * valid)[:, None] * g
            tgt = (chan + idx.reshape(n, 1, h * w)).reshape(-1)
            gflat.reshape(-1)[:] += np.bincount(tgt, weights=wgt.reshape(-1), minlength=n * c * h * w)
            gv = (g * vals).sum(axis=1)
            gfx += gv * wy * (1.0 if dx else -1.0)
            gfy += gv * wx * (1.0 if dy else -1.0)
        gxi = gflat.reshape(n, c, h, w)
        gfl = np.stack([gfx, gfy], axis=1)
        if squeeze:
            gxi, gfl = gxi[0], gfl[0]
        return gxi.astype(dt), gfl.astype(dt)

    return _emit("bilinear_warp", (x, flow), out[0] if squeeze else out, vjp)


# ---------------------------------------------------------------------------
# numeric gradient checking


def numeric_grad(f: Callable[[], Tensor], t: Tensor, idx: Iterable[int], h: float = 1e-3) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. flat entries ``idx`` of ``t``."""
    flat = t.data.reshape(-1)
    out = []
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        fp = f().item()
        flat[i] = old - h
        fm = f().item()
        flat[i] = old
        out.append((fp - fm) / (2 * h))
    return np.asarray(out, dtype=ACC)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    a = np.asarray(analytic, dtype=ACC)
    b = np.asarray(numeric, dtype=ACC)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def is_finite(t: Tensor) -> bool:
    return bool(np.all(np.isfinite(t.data)))


def prod(dims) -> int:
    return math.prod(dims)
