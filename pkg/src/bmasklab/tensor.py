"""Dense float64 tensor engine with reverse-mode automatic differentiation.

The engine supports exactly what the mask-head laboratory needs: NCHW
convolutions, the 2x2/stride-2 transposed convolution, nearest-neighbor
upsampling, elementwise arithmetic, reductions and class-channel
gathering. Graphs are rebuilt on every forward pass (define-by-run);
there is no broadcasting beyond what the ops below spell out.

All data is float64. That is deliberate: central finite differences with
h=1e-5 resolve analytic gradients to ~1e-7 relative error in 64-bit,
which keeps the gradient-check suites trustworthy.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, GraphError, ShapeError

_GRAD_ENABLED = [True]


class no_grad:
    """Context manager that disables graph construction (inference mode)."""

    def __enter__(self):
        self._prev = _GRAD_ENABLED[0]
        _GRAD_ENABLED[0] = False

    def __exit__(self, *exc):
        _GRAD_ENABLED[0] = self._prev
        return False


class Tensor:
    """A float64 array with an optional gradient slot.

    Tensors returned by ops remember their parents and a backward rule;
    ``backward`` replays the tape in reverse topological order. Gradient
    arrays are never mutated in place, so views may be shared freely
    between nodes.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._bwd = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, other)

    __rmul__ = __mul__


def _make(data, parents, bwd):
    """Wrap an op result; drop the tape when grads are off or unneeded."""
    out = Tensor(data)
    if _GRAD_ENABLED[0] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._bwd = bwd
    return out


def _same_shape(a, b, op):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shape {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "div")
    out = a.data / b.data
    return _make(out, (a, b), lambda g: (g / b.data, -g * out / b.data))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def add_scalar(a: Tensor, s: float) -> Tensor:
    return _make(a.data + s, (a,), lambda g: (g,))


def mul_scalar(a: Tensor, s: float) -> Tensor:
    return _make(a.data * s, (a,), lambda g: (g * s,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip values; gradient is zero where the input was clipped."""
    inside = (a.data > lo) & (a.data < hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    s = np.empty_like(x)
    nonneg = x >= 0
    s[nonneg] = 1.0 / (1.0 + np.exp(-x[nonneg]))
    ex = np.exp(x[~nonneg])
    s[~nonneg] = ex / (1.0 + ex)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),))


# ---------------------------------------------------------------------------
# reductions / shape


def sum_all(a: Tensor) -> Tensor:
    shape = a.data.shape
    return _make(a.data.sum(), (a,), lambda g: (np.broadcast_to(g, shape),))


def mean_all(a: Tensor) -> Tensor:
    shape = a.data.shape
    n = a.data.size
    return _make(a.data.mean(), (a,), lambda g: (np.broadcast_to(g / n, shape),))


def sum_axes(a: Tensor, axes: tuple) -> Tensor:
    axes = tuple(ax % a.data.ndim for ax in axes)
    shape = a.data.shape

    def bwd(g):
        ge = np.expand_dims(g, axes)
        return (np.broadcast_to(ge, shape),)

    return _make(a.data.sum(axis=axes), (a,), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(tensors, axis: int = 0) -> Tensor:
    datas = [t.data for t in tensors]
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _make(np.concatenate(datas, axis=axis), tuple(tensors), bwd)


def take_rows(t: Tensor, idx) -> Tensor:
    """Permute/select along axis 0; idx must not repeat rows."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size != np.unique(idx).size:
        raise ShapeError("take_rows: duplicate row indices")
    shape = t.data.shape

    def bwd(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return _make(t.data[idx], (t,), bwd)


def select_classes(t: Tensor, idx) -> Tensor:
    """Gather one channel per batch item: (N,K,H,W) + (N,) -> (N,H,W).

    Channels that are not selected receive zero gradient, which is what
    per-class supervision requires.
    """
    idx = np.asarray(idx, dtype=np.int64)
    if t.data.ndim != 4 or idx.ndim != 1 or idx.shape[0] != t.data.shape[0]:
        raise ShapeError(
            f"select_classes: tensor {t.data.shape} with index {idx.shape}"
        )
    if idx.min() < 0 or idx.max() >= t.data.shape[1]:
        raise ShapeError(f"select_classes: class index out of range for K={t.data.shape[1]}")
    rows = np.arange(t.data.shape[0])

    def bwd(g):
        full = np.zeros_like(t.data)
        full[rows, idx] = g
        return (full,)

    return _make(t.data[rows, idx], (t,), bwd)


def upsample_nearest2(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x upsampling of an NCHW tensor."""
    if x.data.ndim != 4:
        raise ShapeError(f"upsample_nearest2: expected NCHW, got {x.data.shape}")
    n, c, h, w = x.data.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def bwd(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _make(out, (x,), bwd)


# ---------------------------------------------------------------------------
# convolutions


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of an NCHW input with an OIKK kernel plus bias.

    Output spatial size is floor((H + 2*pad - K)/stride) + 1. Implemented
    as im2col + one BLAS matmul per batch; the column matrix is kept for
    the backward pass.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: x {x.data.shape}, w {w.data.shape}")
    n, c, h, wd = x.data.shape
    o, i, kh, kw = w.data.shape
    if kh != kw or (kh % 2 == 0 and kh != 1):
        raise ShapeError(f"conv2d: kernel must be square and odd (or 1x1), got {kh}x{kw}")
    if c != i:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {i}")
    if b.data.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {b.data.shape}, expected ({o},)")
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d: stride {stride}, pad {pad}")
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: empty output for input {x.data.shape}, K={kh}, "
                         f"stride={stride}, pad={pad}")
    need_dx = x.requires_grad
    w2 = w.data.reshape(o, -1)

    if kh == 1 and stride == 1 and pad == 0:
        # pointwise conv: no column matrix needed
        x2 = x.data.reshape(n, c, h * wd)
        out = (np.matmul(w2, x2) + b.data[:, None]).reshape(n, o, h, wd)

        def bwd1(g):
            g2 = g.reshape(n, o, h * wd)
            dw = np.matmul(g2, x2.transpose(0, 2, 1)).sum(axis=0).reshape(w.data.shape)
            db = g2.sum(axis=(0, 2))
            dx = np.matmul(w2.T, g2).reshape(n, c, h, wd) if need_dx else None
            return (dx, dw, db)

        return _make(out, (x, w, b), bwd1)

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]              # (N, C, OH, OW, K, K)
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, oh * ow)
    out = (np.matmul(w2, cols) + b.data[:, None]).reshape(n, o, oh, ow)

    def bwd(g):
        g2 = g.reshape(n, o, oh * ow)
        dw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.data.shape)
        db = g2.sum(axis=(0, 2))
        if not need_dx:
            return (None, dw, db)
        dcols = np.matmul(w2.T, g2).reshape(n, c, kh, kw, oh, ow)
        dxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
        for ki in range(kh):
            for kj in range(kw):
                dxp[:, :, ki:ki + stride * oh:stride,
                    kj:kj + stride * ow:stride] += dcols[:, :, ki, kj]
        dx = dxp[:, :, pad:pad + h, pad:pad + wd] if pad else dxp
        return (dx, dw, db)

    return _make(out, (x, w, b), bwd)


def conv_transpose2d(x: Tensor, w: Tensor, stride: int = 2) -> Tensor:
    """Transposed convolution, fixed to 2x2 kernels with stride 2.

    This is the only configuration the predictors use; kernel positions
    never overlap, so the op is a per-pixel matmul followed by a pixel
    shuffle. Weight layout is (C_in, C_out, 2, 2).
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv_transpose2d: x {x.data.shape}, w {w.data.shape}")
    n, c, h, wd = x.data.shape
    ci, co, kh, kw = w.data.shape
    if (kh, kw) != (2, 2) or stride != 2:
        raise ConfigError(f"conv_transpose2d supports only 2x2/stride 2, "
                          f"got {kh}x{kw}/stride {stride}")
    if c != ci:
        raise ShapeError(f"conv_transpose2d: input has {c} channels, kernel expects {ci}")

    x2 = x.data.transpose(0, 2, 3, 1).reshape(-1, c)
    w2 = w.data.reshape(c, co * 4)
    y = (x2 @ w2).reshape(n, h, wd, co, 2, 2)
    out = y.transpose(0, 3, 1, 4, 2, 5).reshape(n, co, 2 * h, 2 * wd)

    def bwd(g):
        g2 = (g.reshape(n, co, h, 2, wd, 2)
               .transpose(0, 2, 4, 1, 3, 5)
               .reshape(-1, co * 4))
        dx = (g2 @ w2.T).reshape(n, h, wd, c).transpose(0, 3, 1, 2)
        dw = (x2.T @ g2).reshape(w.data.shape)
        return (dx, dw)

    return _make(out, (x, w), bwd)


# ---------------------------------------------------------------------------
# backward


def backward(loss: Tensor, params=None) -> None:
    """Populate gradients of everything reachable from ``loss``.

    ``params`` (a ParamSet or iterable of (name, Tensor)) is optional;
    when given, parameters that the loss does not depend on get explicit
    zero gradients, per the optimizer contract.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward: loss must be scalar, got shape {loss.data.shape}")

    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    # Interior nodes start from a clean slate; leaves keep accumulating
    # across calls (sgd_step clears them).
    for node in topo:
        if node._bwd is not None:
            node.grad = None
    loss.grad = np.ones_like(loss.data)

    for node in reversed(topo):
        if node._bwd is None or node.grad is None:
            continue
        pgrads = node._bwd(node.grad)
        for parent, pg in zip(node._parents, pgrads):
            if pg is None or not parent.requires_grad:
                continue
            parent.grad = pg if parent.grad is None else parent.grad + pg

    if params is not None:
        items = params.items() if hasattr(params, "items") else params
        for _, p in items:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
