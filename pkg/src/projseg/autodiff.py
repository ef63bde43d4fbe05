"""Reverse-mode automatic differentiation on dense float64 numpy arrays.

A ``Tensor`` wraps an ndarray together with the bookkeeping needed to run
backpropagation: the parent tensors that produced it and a closure that
pushes its output gradient back onto those parents.  The recorded graph is
the tape; ``Tensor.backward()`` replays it once in reverse topological
order, accumulating gradients additively across fan-out.

Conventions kept throughout the package:
  * element type is float64, row-major
  * shapes must match exactly for elementwise binary ops; the only
    broadcasts allowed are python scalars and 0-d tensors
  * image tensors are (C, H, W) or batched (N, C, H, W)
  * convolution means cross-correlation (no kernel flip)
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


class NumericsError(FloatingPointError):
    """Raised when an operation produces NaN/Inf from finite inputs."""


def _finite_or_raise(arr, op):
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"{op} produced non-finite values")
    return arr


class Tensor:
    """Dense float64 array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=()):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=np.float64)
        if _parents == () and not np.all(np.isfinite(arr)):
            raise NumericsError("tensor created from non-finite data")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad) or any(
            p.requires_grad for p in _parents
        )
        # parents/backward are only kept when a gradient can flow; forward
        # evaluation on plain data builds no graph at all
        self._parents = tuple(_parents) if self.requires_grad else ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self):
        """Backpropagate from a scalar output through the recorded graph."""
        if self.data.size != 1:
            raise ShapeError(
                f"backward() requires a scalar output, got shape {self.data.shape}"
            )
        topo = []
        visited = set()
        stack = [(self, False)]
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
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()
        # the recorded graph is single-use; severing the node/closure
        # links (which are reference cycles) lets plain refcounting free
        # every intermediate buffer as soon as the caller drops the
        # output, instead of stranding step-sized graphs until a full
        # cycle collection.  Leaf grads survive, interior nodes are spent.
        for node in topo:
            if node._parents:
                node._parents = ()
                node._backward = None
                node.grad = None

    # ---- elementwise arithmetic ------------------------------------------

    def __add__(self, other):
        return _add(self, other)

    def __radd__(self, other):
        return _add(self, other)

    def __sub__(self, other):
        return _add(self, _neg(_wrap(other)))

    def __rsub__(self, other):
        return _add(_neg(self), other)

    def __neg__(self):
        return _neg(self)

    def __mul__(self, other):
        return _mul(self, other)

    def __rmul__(self, other):
        return _mul(self, other)

    def __truediv__(self, other):
        return _div(self, _wrap(other))

    def __rtruediv__(self, other):
        return _div(_wrap(other), self)

    def __pow__(self, exponent):
        return _pow(self, exponent)

    def __getitem__(self, idx):
        out = Tensor(self.data[idx], _parents=(self,))
        if out.requires_grad:
            src = self

            def bw():
                g = np.zeros_like(src.data)
                g[idx] = out.grad
                src._accum(g)

            out._backward = bw
        return out

    # ---- reductions and shape ops ----------------------------------------

    def sum(self, axis=None, keepdims=False):
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims), _parents=(self,))
        if out.requires_grad:
            src, shp = self, self.data.shape

            def bw():
                g = out.grad
                if axis is not None and not keepdims:
                    g = np.expand_dims(g, axis)
                src._accum(np.broadcast_to(g, shp))

            out._backward = bw
        return out

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod(
            [self.data.shape[a] for a in np.atleast_1d(axis)]
        )
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = Tensor(self.data.reshape(shape), _parents=(self,))
        if out.requires_grad:
            src, shp = self, self.data.shape
            out._backward = lambda: src._accum(out.grad.reshape(shp))
        return out

    def transpose(self, axes):
        out = Tensor(self.data.transpose(axes), _parents=(self,))
        if out.requires_grad:
            src = self
            inv = tuple(np.argsort(axes))
            out._backward = lambda: src._accum(out.grad.transpose(inv))
        return out


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _binary_shapes(a, b, op):
    # exact match, or one side is a scalar (0-d / size-1)
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _reduce_to(g, shape):
    """Sum a gradient down to a scalar operand's shape."""
    if g.shape == tuple(shape):
        return g
    return np.sum(g).reshape(shape)


def _add(a, b):
    a, b = _wrap(a), _wrap(b)
    _binary_shapes(a.data, b.data, "add")
    out = Tensor(a.data + b.data, _parents=(a, b))
    if out.requires_grad:
        def bw():
            if a.requires_grad:
                a._accum(_reduce_to(out.grad, a.data.shape))
            if b.requires_grad:
                b._accum(_reduce_to(out.grad, b.data.shape))
        out._backward = bw
    return out


def _neg(a):
    out = Tensor(-a.data, _parents=(a,))
    if out.requires_grad:
        out._backward = lambda: a._accum(-out.grad)
    return out


def _mul(a, b):
    a, b = _wrap(a), _wrap(b)
    _binary_shapes(a.data, b.data, "mul")
    out = Tensor(a.data * b.data, _parents=(a, b))
    if out.requires_grad:
        def bw():
            if a.requires_grad:
                a._accum(_reduce_to(out.grad * b.data, a.data.shape))
            if b.requires_grad:
                b._accum(_reduce_to(out.grad * a.data, b.data.shape))
        out._backward = bw
    return out


def _div(a, b):
    a, b = _wrap(a), _wrap(b)
    _binary_shapes(a.data, b.data, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        data = _finite_or_raise(a.data / b.data, "div")
    out = Tensor(data, _parents=(a, b))
    if out.requires_grad:
        def bw():
            if a.requires_grad:
                a._accum(_reduce_to(out.grad / b.data, a.data.shape))
            if b.requires_grad:
                b._accum(_reduce_to(-out.grad * a.data / (b.data * b.data),
                                    b.data.shape))
        out._backward = bw
    return out


def _pow(a, exponent):
    if not isinstance(exponent, (int, float)):
        raise TypeError("only scalar exponents are supported")
    data = _finite_or_raise(a.data ** exponent, "pow")
    out = Tensor(data, _parents=(a,))
    if out.requires_grad:
        out._backward = lambda: a._accum(
            out.grad * exponent * a.data ** (exponent - 1)
        )
    return out


def sqrt(a):
    a = _wrap(a)
    data = _finite_or_raise(np.sqrt(a.data), "sqrt")
    out = Tensor(data, _parents=(a,))
    if out.requires_grad:
        def bw():
            a._accum(out.grad * 0.5 / _finite_or_raise(data, "sqrt backward"))
        out._backward = bw
    return out


def exp(a):
    a = _wrap(a)
    data = _finite_or_raise(np.exp(a.data), "exp")
    out = Tensor(data, _parents=(a,))
    if out.requires_grad:
        out._backward = lambda: a._accum(out.grad * data)
    return out


def log(a):
    a = _wrap(a)
    data = _finite_or_raise(np.log(a.data), "log")
    out = Tensor(data, _parents=(a,))
    if out.requires_grad:
        out._backward = lambda: a._accum(out.grad / a.data)
    return out


def relu(a):
    a = _wrap(a)
    out = Tensor(np.maximum(a.data, 0.0), _parents=(a,))
    if out.requires_grad:
        mask = a.data > 0

        def bw():
            a._accum(out.grad * mask)

        out._backward = bw
    return out


def sigmoid(a):
    """Elementwise logistic function, numerically stable on both tails."""
    a = _wrap(a)
    x = a.data
    data = np.empty_like(x)
    pos = x >= 0
    data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    data[~pos] = ex / (1.0 + ex)
    out = Tensor(data, _parents=(a,))
    if out.requires_grad:
        out._backward = lambda: a._accum(out.grad * data * (1.0 - data))
    return out


def softmax(a, axis):
    """Softmax along ``axis``, stabilized by max subtraction."""
    a = _wrap(a)
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(data, _parents=(a,))
    if out.requires_grad:
        def bw():
            g = out.grad
            dot = (g * data).sum(axis=axis, keepdims=True)
            a._accum((g - dot) * data)

        out._backward = bw
    return out


def stack(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    out = Tensor(np.stack([t.data for t in tensors], axis=axis),
                 _parents=tuple(tensors))
    if out.requires_grad:
        def bw():
            parts = np.split(out.grad, len(tensors), axis=axis)
            for t, g in zip(tensors, parts):
                if t.requires_grad:
                    t._accum(np.squeeze(g, axis=axis))

        out._backward = bw
    return out


def concat(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis),
                 _parents=tuple(tensors))
    if out.requires_grad:
        sizes = [t.data.shape[axis] for t in tensors]
        splits = np.cumsum(sizes)[:-1]

        def bw():
            parts = np.split(out.grad, splits, axis=axis)
            for t, g in zip(tensors, parts):
                if t.requires_grad:
                    t._accum(g)

        out._backward = bw
    return out


def bias_add(x, bias):
    """Add a per-channel bias (C,) to (..., C, H, W)."""
    x, bias = _wrap(x), _wrap(bias)
    if bias.ndim != 1 or x.data.shape[-3] != bias.data.shape[0]:
        raise ShapeError(
            f"bias_add: bias {bias.shape} does not match channels of {x.shape}"
        )
    out = Tensor(x.data + bias.data[:, None, None], _parents=(x, bias))
    if out.requires_grad:
        def bw():
            if x.requires_grad:
                x._accum(out.grad)
            if bias.requires_grad:
                axes = tuple(i for i in range(out.grad.ndim) if i != out.grad.ndim - 3)
                bias._accum(out.grad.sum(axis=axes))

        out._backward = bw
    return out


# ---- convolution stack ----------------------------------------------------


def _as_batched(x):
    """Return (4-d view, had_batch_dim) for (C,H,W) or (N,C,H,W) input."""
    if x.ndim == 3:
        return x[None], False
    if x.ndim == 4:
        return x, True
    raise ShapeError(f"expected (C,H,W) or (N,C,H,W), got {x.shape}")


def _im2col(xp, kh, kw):
    """(N,C,Hp,Wp) -> column matrix (N*Ho*Wo, C*kh*kw) plus output extents."""
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    n, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return cols, ho, wo


def conv2d(x, kernel, bias=None, padding="same"):
    """2-d cross-correlation with zero padding.

    x       : Tensor (C_in,H,W) or (N,C_in,H,W)
    kernel  : Tensor (C_out,C_in,kh,kw)
    bias    : Tensor (C_out,) or None
    padding : "same" (odd kernels only) or "valid"
    """
    x, kernel = _wrap(x), _wrap(kernel)
    if bias is not None:
        bias = _wrap(bias)
    xb, batched = _as_batched(x.data)
    if kernel.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be 4-d, got {kernel.shape}")
    co, ci, kh, kw = kernel.data.shape
    if ci != xb.shape[1]:
        raise ShapeError(
            f"conv2d: input has {xb.shape[1]} channels, kernel expects {ci}"
        )
    if bias is not None and bias.data.shape != (co,):
        raise ShapeError(f"conv2d: bias shape {bias.data.shape} != ({co},)")
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError("conv2d: same-padding requires odd kernel extents")
        ph, pw = kh // 2, kw // 2
    elif padding == "valid":
        ph = pw = 0
        if xb.shape[2] < kh or xb.shape[3] < kw:
            raise ShapeError("conv2d: input smaller than kernel in valid mode")
    else:
        raise ValueError(f"conv2d: unknown padding {padding!r}")

    n = xb.shape[0]
    xp = np.pad(xb, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols, ho, wo = _im2col(xp, kh, kw)
    out2 = cols @ kernel.data.reshape(co, -1).T
    if bias is not None:
        out2 += bias.data
    data = out2.reshape(n, ho, wo, co).transpose(0, 3, 1, 2)
    if not batched:
        data = data[0]

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    out = Tensor(data, _parents=parents)
    if out.requires_grad:
        def bw():
            g = out.grad if batched else out.grad[None]
            g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, co)
            if kernel.requires_grad:
                gk = (g2.T @ cols).reshape(co, ci, kh, kw)
                kernel._accum(gk)
            if bias is not None and bias.requires_grad:
                bias._accum(g2.sum(axis=0))
            if x.requires_grad:
                # full correlation of the padded gradient with the flipped,
                # channel-transposed kernel recovers the input gradient
                kf = kernel.data.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1]
                gp = np.pad(g, ((0, 0), (0, 0),
                                (kh - 1 - ph, kh - 1 - ph),
                                (kw - 1 - pw, kw - 1 - pw)))
                gcols, gh, gw = _im2col(gp, kh, kw)
                gx = (gcols @ kf.reshape(ci, -1).T)
                gx = gx.reshape(n, gh, gw, ci).transpose(0, 3, 1, 2)
                x._accum(gx if batched else gx[0])

        out._backward = bw
    return out


def maxpool2d(x, window=2, stride=2):
    """2x2 max pooling with stride 2; ties route the gradient to the first
    occurrence in row-major window order."""
    if window != 2 or stride != 2:
        raise ValueError("maxpool2d: only window 2, stride 2 is supported")
    x = _wrap(x)
    xb, batched = _as_batched(x.data)
    n, c, h, w = xb.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2d: spatial extents must be even, got {h}x{w}")
    win = xb.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    arg = win.argmax(axis=-1)
    data = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    out = Tensor(data if batched else data[0], _parents=(x,))
    if out.requires_grad:
        def bw():
            g = out.grad if batched else out.grad[None]
            gw = np.zeros((n, c, h // 2, w // 2, 4))
            np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
            gx = gw.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
            gx = gx.reshape(n, c, h, w)
            x._accum(gx if batched else gx[0])

        out._backward = bw
    return out


def transposed_conv2d(x, kernel):
    """Stride-2 transposed convolution with a 2x2 kernel: the exact adjoint
    of a stride-2 valid convolution with the same kernel.

    x      : Tensor (C_in,H,W) or (N,C_in,H,W)
    kernel : Tensor (C_in,C_out,2,2)
    output : (C_out,2H,2W) or (N,C_out,2H,2W)
    """
    x, kernel = _wrap(x), _wrap(kernel)
    xb, batched = _as_batched(x.data)
    if kernel.ndim != 4 or kernel.data.shape[2:] != (2, 2):
        raise ShapeError(f"transposed_conv2d: kernel must be (C_in,C_out,2,2), "
                         f"got {kernel.shape}")
    ci, co = kernel.data.shape[:2]
    if ci != xb.shape[1]:
        raise ShapeError(
            f"transposed_conv2d: input has {xb.shape[1]} channels, kernel expects {ci}"
        )
    n, _, h, w = xb.shape
    # stride equals kernel size, so contributions never overlap
    out6 = np.einsum("ncij,ckab->nkiajb", xb, kernel.data, optimize=True)
    data = out6.reshape(n, co, 2 * h, 2 * w)
    out = Tensor(data if batched else data[0], _parents=(x, kernel))
    if out.requires_grad:
        def bw():
            g = out.grad if batched else out.grad[None]
            g6 = g.reshape(n, co, h, 2, w, 2)
            if x.requires_grad:
                gx = np.einsum("nkiajb,ckab->ncij", g6, kernel.data, optimize=True)
                x._accum(gx if batched else gx[0])
            if kernel.requires_grad:
                gk = np.einsum("ncij,nkiajb->ckab", xb, g6, optimize=True)
                kernel._accum(gk)

        out._backward = bw
    return out


# ---- gradient verification -------------------------------------------------


def grad_check(scalar_fn, point, step=1e-5):
    """Compare reverse-mode gradients against central differences.

    ``scalar_fn`` maps a Tensor to a scalar Tensor.  Returns the maximum
    relative error over all coordinates of ``point``.
    """
    p = Tensor(np.array(point.data if isinstance(point, Tensor) else point,
                        dtype=np.float64, copy=True), requires_grad=True)
    out = scalar_fn(p)
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise ShapeError("grad_check: function must return a scalar Tensor")
    out.backward()
    analytic = np.zeros_like(p.data) if p.grad is None else p.grad

    def probe(x):
        # off-graph evaluation: some functions return plain arrays here
        v = scalar_fn(Tensor(x))
        return float(v.data) if isinstance(v, Tensor) else float(v)

    base = p.data
    numeric = np.zeros_like(base)
    for idx in np.ndindex(base.shape):
        xp = base.copy()
        xp[idx] += step
        xm = base.copy()
        xm[idx] -= step
        numeric[idx] = (probe(xp) - probe(xm)) / (2.0 * step)

    denom = np.maximum(np.abs(analytic), np.abs(numeric))
    err = np.abs(analytic - numeric)
    rel = np.where(denom > 1e-10, err / np.maximum(denom, 1e-300), err)
    return float(rel.max()) if rel.size else 0.0
