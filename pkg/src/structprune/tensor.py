"""Dense float64 tensors with a recording tape for reverse-mode gradients.

Every op takes :class:`Tensor` (or array-like) inputs and returns a new
``Tensor``. If any input belongs to a :class:`Tape`, the op is recorded there
together with a vector-Jacobian product closure; ``Tape.backward`` replays the
record in reverse. Tensors without a tape are constants.

Convolution is lowered to GEMM through ``im2col``. Rows of the lowered matrix
are ordered channel-major, then kernel row, then kernel column, so row
``c*kh*kw + i*kw + j`` of the column matrix pairs with weight ``W[:, c, i, j]``.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, ShapeError

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "gemm",
    "im2col",
    "col2im",
    "conv2d",
    "linear",
    "relu",
    "maxpool2d",
    "reshape",
    "transpose",
    "add",
    "sub",
    "mul",
    "neg",
    "tsum",
    "sum_squares",
    "softmax_cross_entropy",
    "conv_output_size",
]


class Tensor:
    __slots__ = ("data", "tape", "name")
    __array_priority__ = 100

    def __init__(self, data, tape=None, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, tracked={self.tape is not None})"

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
        return neg(self)

    def __matmul__(self, other):
        return gemm(self, other)

    def sum(self):
        return tsum(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


class Tape:
    """Ordered record of primitive ops, replayed backwards by ``backward``."""

    def __init__(self):
        self.nodes = []
        self.leaves = []

    def watch(self, value, name=None):
        """Register ``value`` as a differentiable leaf and return its tensor."""
        data = value.data if isinstance(value, Tensor) else value
        leaf = Tensor(np.array(data, dtype=np.float64), tape=self, name=name)
        self.leaves.append(leaf)
        return leaf

    def record(self, data, inputs, vjp):
        out = Tensor(data, tape=self)
        self.nodes.append((out, inputs, vjp))
        return out

    def clear(self):
        """Drop the record. Tensors and their tape reference each other, so
        clearing promptly frees the intermediate arrays without waiting for
        the cycle collector."""
        self.nodes.clear()
        self.leaves.clear()

    def backward(self, loss):
        """Return ``{leaf: gradient}`` for every watched leaf.

        Leaves that do not influence ``loss`` get zero gradients.
        """
        if not isinstance(loss, Tensor) or loss.tape is not self:
            raise ContractError("loss was not produced on this tape")
        if loss.data.size != 1:
            raise ContractError(f"loss must be a scalar, got shape {loss.shape}")
        grads = {id(loss): np.ones_like(loss.data)}
        for out, inputs, vjp in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for t, gi in zip(inputs, vjp(g)):
                if gi is None or t.tape is not self:
                    continue
                key = id(t)
                grads[key] = grads[key] + gi if key in grads else gi
        return {leaf: grads.get(id(leaf), np.zeros_like(leaf.data)) for leaf in self.leaves}


def backward(tape, loss):
    return tape.backward(loss)


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, inputs, vjp):
    tape = None
    for t in inputs:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif t.tape is not tape:
            raise ContractError("inputs belong to different tapes")
    if tape is None:
        return Tensor(data)
    return tape.record(data, inputs, vjp)


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b):
    a, b = _lift(a), _lift(b)
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b):
    a, b = _lift(a), _lift(b)
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
    )


def mul(a, b):
    a, b = _lift(a), _lift(b)
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def neg(a):
    a = _lift(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def tsum(a):
    a = _lift(a)
    return _result(np.sum(a.data), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def sum_squares(a):
    """Squared Frobenius norm, ``sum(a * a)``."""
    a = _lift(a)
    return _result(np.sum(a.data * a.data), (a,), lambda g: (2.0 * g * a.data,))


def reshape(a, shape):
    a = _lift(a)
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a):
    a = _lift(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")
    return _result(a.data.T, (a,), lambda g: (g.T,))


def gemm(a, b):
    """Matrix product of an m x k and a k x n matrix."""
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"gemm expects matrices, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"gemm inner dimensions differ: {a.shape} @ {b.shape}")
    return _result(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def relu(a):
    a = _lift(a)
    live = a.data > 0
    return _result(np.where(live, a.data, 0.0), (a,), lambda g: (g * live,))


def conv_output_size(size, kernel, stride, pad):
    span = size + 2 * pad - kernel
    if span < 0 or span % stride:
        raise ShapeError(
            f"extent {size} with kernel {kernel}, stride {stride}, pad {pad} "
            "does not give an integral output size"
        )
    return span // stride + 1


def _im2col_batch(x, kh, kw, stride, pad, rows=None):
    """Batched im2col: (C*kh*kw) x (N*H_out*W_out). With ``rows``, only those
    im2col rows are materialised (compact column-pruned layers)."""
    n, c, h, w = x.shape
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(w, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    if rows is not None:
        ch, i, j = np.unravel_index(rows, (c, kh, kw))
        # advanced indices split by slices: the gathered axis comes first
        return win[:, ch, :, :, i, j].reshape(len(rows), n * ho * wo), ho, wo
    # (n, c, ho, wo, kh, kw) -> (c, kh, kw, n, ho, wo)
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, n * ho * wo)
    return cols, ho, wo


def im2col(x, kernel, stride=1, pad=0):
    """Lower a C x H x W input to a (C*kh*kw) x (H_out*W_out) matrix.

    Column ``j`` is the receptive field of output position ``j`` (row-major
    over the output grid). Padded cells contribute zeros.
    """
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if data.ndim != 3:
        raise ShapeError(f"im2col expects C x H x W, got shape {data.shape}")
    kh, kw = kernel
    cols, _, _ = _im2col_batch(data[None], kh, kw, stride, pad)
    return cols


def col2im(cols, x_shape, kernel, stride=1, pad=0):
    """Adjoint of im2col: scatter-add columns back onto an input of shape
    ``x_shape`` (C x H x W, or N x C x H x W for the batched layout)."""
    if len(x_shape) == 3:
        return col2im(cols, (1, *x_shape), kernel, stride, pad)[0]
    n, c, h, w = x_shape
    kh, kw = kernel
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(w, kw, stride, pad)
    blocks = cols.reshape(c, kh, kw, n, ho, wo)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += (
                blocks[:, i, j].transpose(1, 0, 2, 3)
            )
    if pad:
        out = out[:, :, pad:-pad, pad:-pad]
    return out


def conv2d(x, weight, bias=None, stride=1, pad=0, kernel=None, columns=None):
    """2-D convolution as ``W_mat @ im2col(x) + bias``.

    ``x`` is C x H x W or N x C x H x W. ``weight`` is either the dense
    Cout x Cin x kh x kw tensor, or a Cout x K matrix over a subset of im2col
    rows given by ``columns`` (with ``kernel`` naming kh, kw). The second form
    is how column-pruned layers are stored once shrunk.
    """
    x, weight = _lift(x), _lift(weight)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4:
        raise ShapeError(f"conv2d expects a 3-D or 4-D input, got shape {x.shape}")
    n, cin = xd.shape[:2]
    if weight.ndim == 4:
        cout, wcin, kh, kw = weight.shape
        if wcin != cin:
            raise ShapeError(f"weight expects {wcin} input channels, input has {cin}")
    elif weight.ndim == 2:
        if kernel is None:
            raise ShapeError("a matrix-form weight needs an explicit kernel size")
        kh, kw = kernel
        cout = weight.shape[0]
        width = cin * kh * kw if columns is None else len(columns)
        if weight.shape[1] != width:
            raise ShapeError(f"weight has {weight.shape[1]} columns, expected {width}")
    else:
        raise ShapeError(f"bad conv weight shape {weight.shape}")
    if columns is not None:
        columns = np.asarray(columns, dtype=np.intp)
        if columns.size and columns.max() >= cin * kh * kw:
            raise ShapeError("column index outside the im2col row range")

    cols, ho, wo = _im2col_batch(xd, kh, kw, stride, pad, rows=columns)
    wmat = weight.data.reshape(cout, -1)
    y = (wmat @ cols).reshape(cout, n, ho, wo).transpose(1, 0, 2, 3)
    inputs = [x, weight]
    if bias is not None:
        bias = _lift(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"bias shape {bias.shape} does not match {cout} filters")
        y = y + bias.data[None, :, None, None]
        inputs.append(bias)
    y = np.ascontiguousarray(y)
    if squeeze:
        y = y[0]

    def vjp(g):
        g4 = g[None] if squeeze else g
        gmat = g4.transpose(1, 0, 2, 3).reshape(cout, -1)
        gw = (gmat @ cols.T).reshape(weight.shape)
        gx = None
        if x.tape is not None:
            gcols = wmat.T @ gmat
            if columns is not None:
                scattered = np.zeros((cin * kh * kw, gcols.shape[1]))
                scattered[columns] = gcols
                gcols = scattered
            gx = col2im(gcols, xd.shape, (kh, kw), stride, pad)
            if squeeze:
                gx = gx[0]
        out = [gx, gw]
        if bias is not None:
            out.append(g4.sum(axis=(0, 2, 3)))
        return tuple(out)

    return _result(y, tuple(inputs), vjp)


def linear(x, weight, bias=None, columns=None):
    """Fully connected layer ``x[:, columns] @ W.T + b`` on an N x D input."""
    x, weight = _lift(x), _lift(weight)
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError(f"linear expects matrices, got {x.shape} and {weight.shape}")
    xs = x.data if columns is None else x.data[:, columns]
    if xs.shape[1] != weight.shape[1]:
        raise ShapeError(f"input width {xs.shape[1]} does not match weight {weight.shape}")
    y = xs @ weight.data.T
    inputs = [x, weight]
    if bias is not None:
        bias = _lift(bias)
        y = y + bias.data
        inputs.append(bias)

    def vjp(g):
        gx = g @ weight.data
        if columns is not None:
            full = np.zeros_like(x.data)
            full[:, columns] = gx
            gx = full
        out = [gx, g.T @ xs]
        if bias is not None:
            out.append(g.sum(axis=0))
        return tuple(out)

    return _result(y, tuple(inputs), vjp)


def maxpool2d(x, size=2):
    """Non-overlapping max pooling over N x C x H x W; trailing rows/cols that
    do not fill a window are dropped. Ties route the gradient to the first max."""
    x = _lift(x)
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d expects N x C x H x W, got shape {x.shape}")
    n, c, h, w = x.shape
    ho, wo = h // size, w // size
    if ho == 0 or wo == 0:
        raise ShapeError(f"pool size {size} larger than input {h}x{w}")
    crop = x.data[:, :, : ho * size, : wo * size]
    win = crop.reshape(n, c, ho, size, wo, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, size * size)
    arg = np.argmax(win, axis=-1)
    y = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def vjp(g):
        gw = np.zeros_like(win)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gw = gw.reshape(n, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * size, wo * size)
        gx = np.zeros_like(x.data)
        gx[:, :, : ho * size, : wo * size] = gw
        return (gx,)

    return _result(y, (x,), vjp)


def softmax_cross_entropy(logits, labels):
    """Mean softmax cross-entropy of N x K logits against integer labels."""
    logits = _lift(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ShapeError(f"logits must be N x K, got shape {logits.shape}")
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ContractError(f"labels must lie in [0, {k})")
    labels = labels.astype(np.intp)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = np.mean(lse - z[rows, labels])

    def vjp(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return _result(loss, (logits,), vjp)
