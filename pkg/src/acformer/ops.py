"""Differentiable primitives.

Every function takes ``Tensor`` (or array-like) operands and returns a new
``Tensor``. Backward rules are closures over the forward values they need.
Elementwise ops broadcast numpy-style; the gradient is summed back to each
operand's shape.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ConfigurationError, ShapeError, Tensor, as_tensor, current_tape


def _result(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor._wrap(data)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(op, inputs, out, backward_fn)
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for dim, size in enumerate(shape):
        if size == 1 and grad.shape[dim] != 1:
            grad = grad.sum(axis=dim, keepdims=True)
    return grad


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        "add", a.data + b.data, (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        "sub", a.data - b.data, (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _result(
        "mul", ad * bd, (a, b),
        lambda g: (unbroadcast(g * bd, a.shape), unbroadcast(g * ad, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _result(
        "div", out, (a, b),
        lambda g: (unbroadcast(g / bd, a.shape), unbroadcast(-g * out / bd, b.shape)),
    )


def neg(x) -> Tensor:
    x = as_tensor(x)
    return _result("neg", -x.data, (x,), lambda g: (-g,))


def power(x, exponent: float) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _result(
        "power", xd ** exponent, (x,),
        lambda g: (g * exponent * xd ** (exponent - 1),),
    )


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _result("exp", out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _result("log", np.log(xd), (x,), lambda g: (g / xd,))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return _result("sqrt", out, (x,), lambda g: (0.5 * g / out,))


def abs(x) -> Tensor:
    x = as_tensor(x)
    sign = np.sign(x.data)
    return _result("abs", np.abs(x.data), (x,), lambda g: (g * sign,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _result("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return _result("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _result("tanh", out, (x,), lambda g: (g * (1.0 - out * out),))


# -- reductions and shape ----------------------------------------------------

def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    shape = x.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _result("sum", x.data.sum(axis=axes, keepdims=keepdims), (x,), backward)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(sum(x, axis=axes, keepdims=keepdims), 1.0 / count)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _result("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    return _result(
        "transpose", np.transpose(x.data, axes), (x,),
        lambda g: (np.transpose(g, inverse),),
    )


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _result("getitem", np.array(x.data[index]), (x,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _result(
        "concat", np.concatenate([t.data for t in tensors], axis=axis), tensors,
        lambda g: tuple(np.split(g, cuts, axis=axis)),
    )


# -- linear algebra ----------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return _result("matmul", ad @ bd, (a, b), backward)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result("softmax", out, (x,), backward)


def glu(x, axis: int = -1) -> Tensor:
    """Split ``x`` in half along ``axis`` into (a, b) and return a * sigmoid(b)."""
    x = as_tensor(x)
    n = x.shape[axis]
    if n % 2:
        raise ConfigurationError(f"glu needs an even split dimension, got {n}")
    a, b = np.split(x.data, 2, axis=axis)
    s = _sigmoid(b)

    def backward(g):
        return (np.concatenate([g * s, g * a * s * (1.0 - s)], axis=axis),)

    return _result("glu", a * s, (x,), backward)


# -- convolutions ------------------------------------------------------------

def _overlap_add(patches: np.ndarray, stride: int, length: int) -> np.ndarray:
    """Scatter ``patches[..., i, k]`` into ``out[..., i*stride + k]``."""
    *lead, n, k = patches.shape
    out = np.zeros((*lead, length))
    span = stride * (n - 1) + 1
    for j in range(k):
        out[..., j:j + span:stride] += patches[..., j]
    return out


def _windows(x: np.ndarray, k: int, stride: int, n: int) -> np.ndarray:
    return sliding_window_view(x, k, axis=-1)[..., ::stride, :][..., :n, :]


def conv1d(x, w, b=None, stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """Cross-correlation of ``x`` (N, Cin, L) with ``w`` (Cout, Cin/groups, K)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 3:
        raise ShapeError(f"conv1d expects x (N, Cin, L) and w (Cout, Cin/groups, K); got {x.shape}, {w.shape}")
    if stride < 1:
        raise ConfigurationError(f"stride must be positive, got {stride}")
    n, cin, length = x.shape
    cout, cig, k = w.shape
    if cin % groups or cout % groups or cin // groups != cig:
        raise ShapeError(f"conv1d channel mismatch: x {x.shape}, w {w.shape}, groups={groups}")
    padded = length + 2 * padding
    if padded < k:
        raise ConfigurationError(f"kernel longer than input ({k} > {padded})")
    lout = (padded - k) // stride + 1
    cog = cout // groups
    xd = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    win = _windows(xd, k, stride, lout).reshape(n, groups, cig, lout, k)
    # im2col: (G, N*Lout, Cin_g*K) @ (G, Cin_g*K, Cout_g)
    cols = win.transpose(1, 0, 3, 2, 4).reshape(groups, n * lout, cig * k)
    wm = w.data.reshape(groups, cog, cig * k)
    out = (cols @ wm.transpose(0, 2, 1)).reshape(groups, n, lout, cog).transpose(1, 0, 3, 2).reshape(n, cout, lout)
    inputs = (x, w)
    if b is not None:
        b = as_tensor(b)
        out = out + b.data[:, None]
        inputs = (x, w, b)

    def backward(g):
        gm = g.reshape(n, groups, cog, lout).transpose(1, 0, 3, 2).reshape(groups, n * lout, cog)
        gw = (gm.transpose(0, 2, 1) @ cols).reshape(w.shape)
        gcols = (gm @ wm).reshape(groups, n, lout, cig, k)
        gwin = gcols.transpose(1, 0, 3, 2, 4).reshape(n, cin, lout, k)
        gx = _overlap_add(gwin, stride, padded)[:, :, padding:padding + length]
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2))

    return _result("conv1d", out, inputs, backward)


def conv_transpose1d(h, w, b=None, stride: int = 1, groups: int = 1) -> Tensor:
    """Transposed convolution of ``h`` (N, Cin, L) with ``w`` (Cin, Cout/groups, K).

    Output length is ``(L - 1) * stride + K``; no padding or trimming.
    """
    h, w = as_tensor(h), as_tensor(w)
    if h.ndim != 3 or w.ndim != 3:
        raise ShapeError(f"conv_transpose1d expects h (N, Cin, L) and w (Cin, Cout/groups, K); got {h.shape}, {w.shape}")
    if stride < 1:
        raise ConfigurationError(f"stride must be positive, got {stride}")
    n, cin, length = h.shape
    cin_w, cog, k = w.shape
    if cin_w != cin or cin % groups:
        raise ShapeError(f"conv_transpose1d channel mismatch: h {h.shape}, w {w.shape}, groups={groups}")
    cig = cin // groups
    cout = cog * groups
    lout = (length - 1) * stride + k
    hm = h.data.reshape(n, groups, cig, length).transpose(1, 0, 3, 2).reshape(groups, n * length, cig)
    wm = w.data.reshape(groups, cig, cog * k)
    patches = (hm @ wm).reshape(groups, n, length, cog, k).transpose(1, 0, 3, 2, 4)
    out = _overlap_add(patches, stride, lout).reshape(n, cout, lout)
    inputs = (h, w)
    if b is not None:
        b = as_tensor(b)
        out = out + b.data[:, None]
        inputs = (h, w, b)

    def backward(g):
        gwin = _windows(g.reshape(n, groups, cog, lout), k, stride, length)
        gm = gwin.transpose(1, 0, 3, 2, 4).reshape(groups, n * length, cog * k)
        gh = (gm @ wm.transpose(0, 2, 1)).reshape(groups, n, length, cig).transpose(1, 0, 3, 2).reshape(h.shape)
        gw = (hm.transpose(0, 2, 1) @ gm).reshape(w.shape)
        if b is None:
            return gh, gw
        return gh, gw, g.sum(axis=(0, 2))

    return _result("conv_transpose1d", out, inputs, backward)


def conv1d_valid(x, w, stride: int = 1) -> Tensor:
    """Single-channel valid convolution: x (Lin,), w (K,) -> (floor((Lin-K)/stride)+1,)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 1 or w.ndim != 1:
        raise ShapeError(f"conv1d_valid expects 1-D operands, got {x.shape}, {w.shape}")
    if x.shape[0] < w.shape[0]:
        raise ConfigurationError(f"kernel longer than input ({w.shape[0]} > {x.shape[0]})")
    out = conv1d(reshape(x, (1, 1, -1)), reshape(w, (1, 1, -1)), stride=stride)
    return reshape(out, (-1,))


def conv1d_same(x, w) -> Tensor:
    """Zero-padded single-channel convolution that preserves length; kernel length must be odd."""
    x, w = as_tensor(x), as_tensor(w)
    k = w.shape[0]
    if k % 2 == 0:
        raise ConfigurationError(f"same-padding convolution needs an odd kernel, got {k}")
    out = conv1d(reshape(x, (1, 1, -1)), reshape(w, (1, 1, -1)), padding=(k - 1) // 2)
    return reshape(out, (-1,))


def transposed_conv1d(h, w, stride: int = 1) -> Tensor:
    """h (L, M), w (K, M) -> out ((L-1)*stride + K,) with out[i*stride + j] += sum_m h[i,m] w[j,m]."""
    h, w = as_tensor(h), as_tensor(w)
    if h.ndim != 2 or w.ndim != 2 or h.shape[1] != w.shape[1]:
        raise ShapeError(f"transposed_conv1d expects h (L, M) and w (K, M); got {h.shape}, {w.shape}")
    hm = reshape(transpose(h), (1, h.shape[1], h.shape[0]))
    wm = reshape(transpose(w), (w.shape[1], 1, w.shape[0]))
    return reshape(conv_transpose1d(hm, wm, stride=stride), (-1,))

