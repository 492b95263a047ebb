"""Differentiable tensor ops.

Every op accepts ``Var`` or array-likes, returns a ``Var`` and registers an
analytic backward rule. Plain arrays are treated as constants.
"""
from __future__ import annotations

import builtins

import numpy as np

from .autodiff import ContractError, Var, as_var, make

EPS_LOG = 1e-12


def _pair(a, b):
    if isinstance(a, Var) and not isinstance(b, Var):
        return a, as_var(b, a.dtype)
    if isinstance(b, Var) and not isinstance(a, Var):
        return as_var(a, b.dtype), b
    return as_var(a), as_var(b)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a, b, name):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ContractError(f"{name}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Var:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "add")
    return make(a.value + b.value, (a, b),
                lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Var:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "sub")
    return make(a.value - b.value, (a, b),
                lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Var:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "mul")
    av, bv = a.value, b.value
    return make(av * bv, (a, b),
                lambda g: (_unbroadcast(g * bv, a.shape) if a.requires_grad else None,
                           _unbroadcast(g * av, b.shape) if b.requires_grad else None), "mul")


def div(a, b) -> Var:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "div")
    av, bv = a.value, b.value
    out = av / bv
    return make(out, (a, b),
                lambda g: (_unbroadcast(g / bv, a.shape) if a.requires_grad else None,
                           _unbroadcast(-g * out / bv, b.shape) if b.requires_grad else None), "div")


def neg(a) -> Var:
    a = as_var(a)
    return make(-a.value, (a,), lambda g: (-g,), "neg")


def square(a) -> Var:
    a = as_var(a)
    av = a.value
    return make(av * av, (a,), lambda g: (2.0 * av * g,), "square")


def power(a, p: float) -> Var:
    a = as_var(a)
    av = a.value
    out = av ** p
    return make(out, (a,), lambda g: (g * p * av ** (p - 1),), "power")


def sqrt(a) -> Var:
    a = as_var(a)
    out = np.sqrt(a.value)
    return make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def exp(a) -> Var:
    a = as_var(a)
    out = np.exp(a.value)
    return make(out, (a,), lambda g: (g * out,), "exp")


def log(a, floor: bool = True) -> Var:
    """Natural log; ``floor`` adds ``EPS_LOG`` inside the argument."""
    a = as_var(a)
    av = a.value
    if floor:
        av = av + EPS_LOG
    elif np.any(av <= 0):
        raise ContractError("log of a nonpositive value without floor")
    return make(np.log(av), (a,), lambda g: (g / av,), "log")


def relu(a) -> Var:
    a = as_var(a)
    mask = a.value > 0
    return make(np.where(mask, a.value, 0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


def clamp(a, lo=None, hi=None) -> Var:
    a = as_var(a)
    out = np.clip(a.value, lo, hi)
    mask = np.ones(a.shape, dtype=bool)
    if lo is not None:
        mask &= a.value >= lo
    if hi is not None:
        mask &= a.value <= hi
    return make(out, (a,), lambda g: (g * mask,), "clamp")


def maximum_const(a, floor: float) -> Var:
    """Elementwise max against a constant floor (gradient passes where a >= floor)."""
    return clamp(a, lo=floor)


_ELEMENTWISE = {
    "add": add, "sub": sub, "mul": mul, "div": div,
    "relu": relu, "exp": exp, "log": log, "square": square,
    "neg": neg, "sqrt": sqrt,
}


def elementwise(kind: str, a, b=None) -> Var:
    """Dispatch by op name: ``elementwise("add", x, y)``, ``elementwise("relu", x)``."""
    if kind == "clamp":
        lo, hi = b if b is not None else (None, None)
        return clamp(a, lo, hi)
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ContractError(f"unknown elementwise op {kind!r}") from None
    return fn(a) if b is None else fn(a, b)


# ------------------------------------------------------------------ structure

def reshape(a, shape) -> Var:
    a = as_var(a)
    old = a.shape
    return make(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes) -> Var:
    a = as_var(a)
    inv = np.argsort(axes)
    return make(np.ascontiguousarray(a.value.transpose(axes)), (a,),
                lambda g: (np.ascontiguousarray(g.transpose(inv)),), "transpose")


def swap_last(a) -> Var:
    a = as_var(a)
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def rot90(a, quarter_turns: int) -> Var:
    """Counter-clockwise rotation of the trailing two axes."""
    a = as_var(a)
    k = quarter_turns % 4
    if k == 0:
        return a
    out = np.ascontiguousarray(np.rot90(a.value, k, axes=(-2, -1)))
    return make(out, (a,), lambda g: (np.ascontiguousarray(np.rot90(g, -k, axes=(-2, -1))),), "rot90")


def stack(items, axis=0) -> Var:
    vs = [as_var(x) for x in items]
    out = np.stack([v.value for v in vs], axis=axis)
    return make(out, vs, lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(vs))), "stack")


def diagonal(a) -> Var:
    """Diagonal of the trailing square matrix, batched over leading axes."""
    a = as_var(a)
    n = a.shape[-1]
    if a.shape[-2] != n:
        raise ContractError(f"diagonal needs square trailing axes, got {a.shape}")
    out = np.diagonal(a.value, axis1=-2, axis2=-1).copy()

    def bw(g):
        full = np.zeros_like(a.value)
        idx = np.arange(n)
        full[..., idx, idx] = g
        return (full,)
    return make(out, (a,), bw, "diagonal")


# ----------------------------------------------------------------- reductions

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise ContractError(f"axis {ax} out of range for rank {ndim}")
    return tuple(sorted(ax % ndim for ax in axis))


def _expand(g, shape, axes, keepdims):
    if not keepdims:
        for ax in axes:
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum(a, axis=None, keepdims=False) -> Var:  # noqa: A001
    a = as_var(a)
    axes = _norm_axes(axis, a.ndim)
    if a.value.size == 0:
        raise ContractError("sum over an empty tensor")
    shape = a.shape
    return make(a.value.sum(axis=axes, keepdims=keepdims), (a,),
                lambda g: (_expand(g, shape, axes, keepdims).copy(),), "sum")


def mean(a, axis=None, keepdims=False) -> Var:
    a = as_var(a)
    axes = _norm_axes(axis, a.ndim)
    if a.value.size == 0:
        raise ContractError("mean over an empty tensor")
    count = int(np.prod([a.shape[ax] for ax in axes]))
    shape = a.shape
    return make(a.value.mean(axis=axes, keepdims=keepdims), (a,),
                lambda g: (_expand(g / count, shape, axes, keepdims).copy(),), "mean")


def max(a, axis=None, keepdims=False) -> Var:  # noqa: A001
    """Max reduction; the gradient goes to the first maximal element."""
    a = as_var(a)
    if a.value.size == 0:
        raise ContractError("max over an empty tensor")
    axes = _norm_axes(axis, a.ndim)
    out = a.value.max(axis=axes, keepdims=True)
    # first-occurrence mask along the flattened reduced axes
    moved = np.moveaxis(a.value, axes, tuple(range(a.ndim - len(axes), a.ndim)))
    flat = moved.reshape(moved.shape[: a.ndim - len(axes)] + (-1,))
    first = np.zeros_like(flat, dtype=bool)
    np.put_along_axis(first, flat.argmax(axis=-1)[..., None], True, axis=-1)
    first = np.moveaxis(first.reshape(moved.shape), tuple(range(a.ndim - len(axes), a.ndim)), axes)
    result = out if keepdims else out.reshape([s for i, s in enumerate(a.shape) if i not in axes])

    def bw(g):
        gk = g if keepdims else g.reshape(out.shape)
        return (first * gk,)
    return make(result, (a,), bw, "max")


def median(x, axis=-1) -> np.ndarray:
    """Lower median: element ``(k - 1) // 2`` of the sorted values. Not differentiable."""
    x = np.asarray(x.value if isinstance(x, Var) else x)
    k = x.shape[axis]
    if k == 0:
        raise ContractError("median of an empty axis")
    return np.take(np.sort(x, axis=axis), (k - 1) // 2, axis=axis)


def reductions(kind: str, a, axes=None):
    fns = {"sum": sum, "mean": mean, "max": max}
    if kind == "median":
        return median(a, -1 if axes is None else axes)
    if kind not in fns:
        raise ContractError(f"unknown reduction {kind!r}")
    return fns[kind](a, axes)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Var:
    """Matrix product over the trailing two axes (leading axes broadcast)."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ContractError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    av, bv = a.value, b.value

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, b.shape)
        return ga, gb
    return make(av @ bv, (a, b), bw, "matmul")


def softmax(a, axis=1) -> Var:
    a = as_var(a)
    z = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return make(out, (a,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),), "softmax")


def log_softmax(a, axis=1) -> Var:
    a = as_var(a)
    z = a.value - a.value.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)
    return make(out, (a,), lambda g: (g - sm * g.sum(axis=axis, keepdims=True),), "log_softmax")


# ------------------------------------------------------------------ 2-d maps

def _windows(xp, kh, kw, stride):
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Var:
    """2-d cross-correlation, NCHW layout, weight ``cout x cin x kh x kw``."""
    x, weight = _pair(x, weight)
    b, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ContractError(f"conv2d: input {x.shape} vs weight {weight.shape} channel mismatch")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ContractError(f"conv2d: non-positive output extent for input {x.shape}, kernel {kh}x{kw}")
    xp = np.pad(x.value, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.value
    win = _windows(xp, kh, kw, stride)[:, :, :oh, :ow]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b * oh * ow, cin * kh * kw)
    wflat = weight.value.reshape(cout, -1)
    out = (cols @ wflat.T).reshape(b, oh, ow, cout).transpose(0, 3, 1, 2)
    parents = [x, weight]
    if bias is not None:
        bias = as_var(bias, x.dtype)
        out = out + bias.value.reshape(1, cout, 1, 1)
        parents.append(bias)
    out = np.ascontiguousarray(out)

    def bw(g):
        gflat = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gx = gw = None
        if weight.requires_grad:
            gw = (gflat.T @ cols).reshape(weight.shape)
        if x.requires_grad:
            dcols = (gflat @ wflat).reshape(b, oh, ow, cin, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)) if bias.requires_grad else None)
        return grads
    return make(out, parents, bw, "conv2d")


def _resize(x: Var, mh: np.ndarray, mw: np.ndarray, op: str) -> Var:
    """Apply separable linear maps ``mh`` (out_h x h) and ``mw`` (out_w x w)."""
    mh = mh.astype(x.dtype)
    mw = mw.astype(x.dtype)
    out = np.einsum("oh,bchw,pw->bcop", mh, x.value, mw, optimize=True)
    return make(out, (x,), lambda g: (np.einsum("oh,bcop,pw->bchw", mh, g, mw, optimize=True),), op)


def pool_matrix(size: int, out: int) -> np.ndarray:
    """Row i averages input cells floor(i*size/out) .. ceil((i+1)*size/out) - 1."""
    m = np.zeros((out, size))
    for i in range(out):
        start = (i * size) // out
        end = -((-(i + 1) * size) // out)
        m[i, start:end] = 1.0 / (end - start)
    return m


def bilinear_matrix(size: int, out: int) -> np.ndarray:
    """Half-pixel-centred (align-corners false) linear interpolation weights."""
    m = np.zeros((out, size))
    scale = size / out
    for i in range(out):
        src = builtins.max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), size - 1)
        i1 = min(i0 + 1, size - 1)
        lam = src - i0
        m[i, i0] += 1.0 - lam
        m[i, i1] += lam
    return m


def adaptive_avg_pool(x, out_h: int, out_w: int) -> Var:
    x = as_var(x)
    h, w = x.shape[-2:]
    if out_h <= 0 or out_w <= 0:
        raise ContractError(f"adaptive_avg_pool: zero target extent ({out_h}, {out_w})")
    if out_h > h or out_w > w:
        raise ContractError(f"adaptive_avg_pool: target ({out_h}, {out_w}) exceeds input {x.shape}")
    if (out_h, out_w) == (h, w):
        return x
    return _resize(x, pool_matrix(h, out_h), pool_matrix(w, out_w), "adaptive_avg_pool")


def upsample_bilinear(x, out_h: int, out_w: int) -> Var:
    x = as_var(x)
    h, w = x.shape[-2:]
    if out_h < h or out_w < w:
        raise ContractError(f"upsample_bilinear: target ({out_h}, {out_w}) smaller than input {x.shape}")
    if (out_h, out_w) == (h, w):
        return x
    return _resize(x, bilinear_matrix(h, out_h), bilinear_matrix(w, out_w), "upsample_bilinear")


def batch_norm(x, scale, shift, running_mean: np.ndarray, running_var: np.ndarray,
               channel_axis: int = 1, train: bool = True, momentum: float = 0.1,
               eps: float = 1e-5) -> Var:
    """Normalise per channel over every other axis.

    In train mode the running buffers are updated in place (unbiased variance).
    """
    x = as_var(x)
    scale, shift = as_var(scale, x.dtype), as_var(shift, x.dtype)
    ca = channel_axis % x.ndim
    axes = tuple(i for i in range(x.ndim) if i != ca)
    bshape = [1] * x.ndim
    bshape[ca] = x.shape[ca]
    count = x.value.size // x.shape[ca]
    if train:
        mu = x.value.mean(axis=axes)
        var = x.value.var(axis=axes)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (count / builtins.max(count - 1, 1))
    else:
        mu, var = running_mean.astype(x.dtype), running_var.astype(x.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.value - mu.reshape(bshape)) * inv.reshape(bshape)
    sv = scale.value.reshape(bshape)
    out = xhat * sv + shift.value.reshape(bshape)

    def bw(g):
        gscale = (g * xhat).sum(axis=axes) if scale.requires_grad else None
        gshift = g.sum(axis=axes) if shift.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * sv
            if train:
                gx = inv.reshape(bshape) * (
                    gxhat - gxhat.mean(axis=axes, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True))
            else:
                gx = gxhat * inv.reshape(bshape)
        return gx, gscale, gshift
    return make(out.astype(x.dtype), (x, scale, shift), bw, "batch_norm")
