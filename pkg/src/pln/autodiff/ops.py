"""Differentiable primitives.

Every op takes and returns :class:`Tensor` objects; the backward closure
returns one gradient (or ``None``) per input. Spatial ops accept an optional
leading batch axis: ``(C, H, W)`` or ``(B, C, H, W)``.
"""
from __future__ import annotations

import warnings
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, as_tensor, result

BCE_EPS = 1e-7


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# dense algebra


def affine(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ W + b`` over the last axis of ``x``."""
    if x.shape[-1] != W.shape[0] or W.data.ndim != 2:
        raise ShapeError(f"affine: x{x.shape} incompatible with W{W.shape}")
    if b is not None and b.shape != (W.shape[1],):
        raise ShapeError(f"affine: bias {b.shape} does not match W{W.shape}")
    xd, Wd = x.data, W.data
    out = xd @ Wd
    if b is not None:
        out = out + b.data

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ Wd.T
        gW = xd.reshape(-1, xd.shape[-1]).T @ g2
        gb = g2.sum(axis=0) if b is not None else None
        return gx, gW, gb

    inputs = (x, W) if b is None else (x, W, b)
    return result("affine", inputs, out, backward)


def elementwise(a: Tensor, b: Tensor, mode: str) -> Tensor:
    """Per-element ``mul``, ``add`` or ``max`` of two equal-shaped tensors.

    ``max`` sends the gradient to ``a`` when the operands tie.
    """
    if a.shape != b.shape:
        raise ShapeError(f"elementwise {mode}: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    if mode == "mul":
        out = ad * bd

        def backward(g):
            return g * bd, g * ad
    elif mode == "add":
        out = ad + bd

        def backward(g):
            return g, g
    elif mode == "max":
        pick_a = ad >= bd
        out = np.where(pick_a, ad, bd)

        def backward(g):
            return np.where(pick_a, g, 0.0), np.where(pick_a, 0.0, g)
    else:
        raise ValueError(f"unknown elementwise mode {mode!r}")
    return result(f"elementwise_{mode}", (a, b), out, backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return elementwise(a, b, "mul")


def add(a: Tensor, b: Tensor) -> Tensor:
    return elementwise(a, b, "add")


def maximum(a: Tensor, b: Tensor) -> Tensor:
    return elementwise(a, b, "max")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} differ")
    return result("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return result("scale", (x,), x.data * c, lambda g: (g * c,))


def mask(x: Tensor, m: np.ndarray) -> Tensor:
    """Multiply by a constant (non-differentiable) array broadcastable to ``x``."""
    m = np.asarray(m, dtype=x.dtype)
    if np.broadcast_shapes(x.shape, m.shape) != x.shape:
        raise ShapeError(f"mask {m.shape} does not broadcast to {x.shape}")
    return result("mask", (x,), x.data * m, lambda g: (g * m,))


def add_const(x: Tensor, c: np.ndarray) -> Tensor:
    c = np.asarray(c, dtype=x.dtype)
    if np.broadcast_shapes(x.shape, c.shape) != x.shape:
        raise ShapeError(f"constant {c.shape} does not broadcast to {x.shape}")
    return result("add_const", (x,), x.data + c, lambda g: (g,))


def broadcast_to(x: Tensor, shape: tuple) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    src = x.shape
    return result("broadcast_to", (x,), out, lambda g: (_unbroadcast(g, src),))


def reshape(x: Tensor, shape: tuple) -> Tensor:
    src = x.shape
    return result("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return result("transpose", (x,), np.transpose(x.data, axes), lambda g: (np.transpose(g, inv),))


def getitem(x: Tensor, index) -> Tensor:
    src_shape, dt = x.shape, x.dtype
    basic = all(isinstance(i, (slice, int, type(Ellipsis))) for i in
                (index if isinstance(index, tuple) else (index,)))

    def backward(g):
        gx = np.zeros(src_shape, dtype=dt)
        if basic:
            gx[index] = g
        else:
            np.add.at(gx, index, g)
        return (gx,)

    return result("getitem", (x,), x.data[index], backward)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = list(xs)
    out = np.concatenate([t.data for t in xs], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def backward(g):
        return np.split(g, bounds, axis=axis)

    return result("concat", xs, out, backward)


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    out = np.stack([t.data for t in xs], axis=axis)

    def backward(g):
        return [np.take(g, i, axis=axis) for i in range(len(xs))]

    return result("stack", xs, out, backward)


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    src = x.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, src).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), src).copy(),)

    return result("sum", (x,), np.asarray(x.data.sum(axis=axis)), backward)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(sum(x, axis), 1.0 / n)


def add_n(xs: Sequence[Tensor]) -> Tensor:
    xs = list(xs)
    shape = xs[0].shape
    if any(t.shape != shape for t in xs):
        raise ShapeError("add_n: shapes differ")
    out = np.add.reduce([t.data for t in xs])
    return result("add_n", xs, np.asarray(out), lambda g: [g] * len(xs))


# ---------------------------------------------------------------------------
# nonlinearities


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def activation(x: Tensor, mode: str) -> Tensor:
    xd = x.data
    if mode == "sigmoid":
        s = _sigmoid(xd)

        def backward(g):
            return (g * s * (1.0 - s),)

        return result("sigmoid", (x,), s, backward)
    if mode == "relu":
        pos = xd > 0
        return result("relu", (x,), np.where(pos, xd, 0.0).astype(xd.dtype), lambda g: (g * pos,))
    if mode == "tanh":
        t = np.tanh(xd)
        return result("tanh", (x,), t, lambda g: (g * (1.0 - t * t),))
    raise ValueError(f"unknown activation {mode!r}")


def sigmoid(x: Tensor) -> Tensor:
    return activation(x, "sigmoid")


def relu(x: Tensor) -> Tensor:
    return activation(x, "relu")


def tanh(x: Tensor) -> Tensor:
    return activation(x, "tanh")


# ---------------------------------------------------------------------------
# spatial ops


def _as_batched(x: np.ndarray, op: str) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"{op}: expected (C,H,W) or (B,C,H,W), got {x.shape}")


def _correlate(xl: np.ndarray, Wt: np.ndarray) -> np.ndarray:
    """Valid cross-correlation, channel-last.

    ``xl`` is padded input (B,Hp,Wp,C), ``Wt`` is (k,k,C,O); returns (B,H,W,O).
    Accumulates one matmul per kernel offset, which avoids materialising the
    full im2col matrix.
    """
    B, Hp, Wp, C = xl.shape
    k, _, _, O = Wt.shape
    H, W = Hp - k + 1, Wp - k + 1
    out = np.zeros((B * H * W, O), dtype=np.result_type(xl, Wt))
    for i in range(k):
        for j in range(k):
            out += xl[:, i:i + H, j:j + W, :].reshape(-1, C) @ Wt[i, j]
    return out.reshape(B, H, W, O)


def _pad_hw(xl: np.ndarray, p: int) -> np.ndarray:
    return np.pad(xl, ((0, 0), (p, p), (p, p), (0, 0))) if p else xl


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, padding: int = 0) -> Tensor:
    """Stride-1 cross-correlation with zero padding."""
    xd, single = _as_batched(x.data, "conv2d")
    Wd = kernel.data
    if Wd.ndim != 4 or Wd.shape[2] != Wd.shape[3]:
        raise ShapeError(f"conv2d: kernel must be (C_out,C_in,k,k), got {Wd.shape}")
    O, C, k, _ = Wd.shape
    if xd.shape[1] != C:
        raise ShapeError(f"conv2d: input has {xd.shape[1]} channels, kernel expects {C}")
    if not 0 <= padding <= k - 1:
        raise ShapeError(f"conv2d: padding {padding} outside [0, {k - 1}]")
    if xd.shape[2] + 2 * padding < k or xd.shape[3] + 2 * padding < k:
        raise ShapeError("conv2d: kernel larger than padded input")
    if bias is not None and bias.shape != (O,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match {O} output channels")
    p = padding
    xl = _pad_hw(np.ascontiguousarray(xd.transpose(0, 2, 3, 1)), p)
    out = _correlate(xl, np.ascontiguousarray(Wd.transpose(2, 3, 1, 0)))
    if bias is not None:
        out += bias.data
    out = out.transpose(0, 3, 1, 2)

    def backward(g):
        gb4 = g[None] if single else g
        B, _, H, W = gb4.shape
        gl = np.ascontiguousarray(gb4.transpose(0, 2, 3, 1))
        g2 = gl.reshape(-1, O)
        gW = np.empty((k, k, C, O), dtype=Wd.dtype)
        for i in range(k):
            for j in range(k):
                gW[i, j] = xl[:, i:i + H, j:j + W, :].reshape(-1, C).T @ g2
        gbias = g2.sum(axis=0) if bias is not None else None
        # input grad = full correlation of g with the flipped kernel
        flipped = np.ascontiguousarray(Wd[:, :, ::-1, ::-1].transpose(2, 3, 0, 1))  # k,k,O,C
        gx = _correlate(_pad_hw(gl, k - 1 - p), flipped).transpose(0, 3, 1, 2)
        if single:
            gx = gx[0]
        gW = gW.transpose(3, 2, 0, 1)
        return (gx, gW) if bias is None else (gx, gW, gbias)

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return result("conv2d", inputs, out[0] if single else out, backward)


def pool2d(x: Tensor, mode: str, window: int, stride: int) -> Tensor:
    """Windowed max or mean over the last two axes.

    Max routes the gradient to the first maximal element of each window.
    """
    if mode not in ("max", "mean"):
        raise ValueError(f"unknown pool mode {mode!r}")
    xd = x.data
    if xd.ndim < 2:
        raise ShapeError("pool2d needs at least two axes")
    H, W = xd.shape[-2:]
    if window > H or window > W or window < 1 or stride < 1:
        raise ShapeError(f"pool2d: window {window} does not fit input {H}x{W}")
    lead = xd.shape[:-2]
    x3 = xd.reshape((-1, H, W))
    L = x3.shape[0]
    win = sliding_window_view(x3, (window, window), axis=(1, 2))[:, ::stride, ::stride]
    Ho, Wo = win.shape[1:3]
    flat = win.reshape(L, Ho, Wo, window * window)
    if mode == "max":
        arg = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
        rows = np.arange(Ho)[None, :, None] * stride + arg // window
        cols = np.arange(Wo)[None, None, :] * stride + arg % window
        idx = (np.arange(L)[:, None, None] * H + rows) * W + cols

        def backward(g):
            gx = np.bincount(idx.ravel(), weights=g.reshape(L, Ho, Wo).ravel(), minlength=L * H * W)
            return (gx.astype(xd.dtype).reshape(xd.shape),)
    else:
        out = flat.mean(axis=-1)
        area = float(window * window)

        def backward(g):
            g3 = g.reshape(L, Ho, Wo) / area
            gx = np.zeros((L, H, W), dtype=xd.dtype)
            for di in range(window):
                for dj in range(window):
                    gx[:, di:di + stride * Ho:stride, dj:dj + stride * Wo:stride] += g3
            return (gx.reshape(xd.shape),)

    return result(f"pool2d_{mode}", (x,), out.reshape(lead + (Ho, Wo)), backward)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour upsampling of the last two axes by a factor of 2."""
    xd = x.data
    out = np.repeat(np.repeat(xd, 2, axis=-2), 2, axis=-1)
    H, W = xd.shape[-2:]

    def backward(g):
        return (g.reshape(g.shape[:-2] + (H, 2, W, 2)).sum(axis=(-3, -1)),)

    return result("upsample2x", (x,), out, backward)


def range_max(clips: Tensor) -> Tensor:
    """Max over every contiguous clip range.

    ``clips`` is ``(..., N, d)``; the output is ``(..., N, N, d)`` with cell
    ``[i, j]`` equal to the elementwise max of clips ``i..j`` (inclusive) for
    ``i <= j`` and exactly zero below the diagonal. Ties route the gradient to
    the earliest clip.
    """
    cd = clips.data
    if cd.ndim < 2:
        raise ShapeError("range_max needs (..., N, d) input")
    N, d = cd.shape[-2:]
    lead = cd.shape[:-2]
    c3 = cd.reshape((-1, N, d))
    L = c3.shape[0]
    out = np.zeros((L, N, N, d), dtype=cd.dtype)
    arg = np.zeros((L, N, N, d), dtype=np.int64)
    diag = np.arange(N)
    out[:, diag, diag] = c3
    arg[:, diag, diag] = diag[None, :, None]
    for k in range(1, N):
        i = np.arange(N - k)
        j = i + k
        prev = out[:, i, j - 1]
        cur = c3[:, j]
        take = cur > prev
        out[:, i, j] = np.where(take, cur, prev)
        arg[:, i, j] = np.where(take, j[None, :, None], arg[:, i, j - 1])
    iu, ju = np.triu_indices(N)
    src = arg[:, iu, ju]  # L,P,d
    flat_idx = (np.arange(L)[:, None, None] * N + src) * d + np.arange(d)[None, None, :]

    def backward(g):
        g4 = g.reshape(L, N, N, d)[:, iu, ju]
        gc = np.bincount(flat_idx.ravel(), weights=g4.ravel(), minlength=L * N * d)
        return (gc.astype(cd.dtype).reshape(cd.shape),)

    return result("range_max", (clips,), out.reshape(lead + (N, N, d)), backward)


# ---------------------------------------------------------------------------
# recurrent cell


def lstm_cell(x_t: Tensor, h_prev: Tensor, c_prev: Tensor, params: dict) -> tuple[Tensor, Tensor]:
    """One LSTM step with gate order (input, forget, cell, output).

    ``params`` holds ``W`` of shape ``(d_in + d_h, 4 d_h)`` and ``b`` of shape
    ``(4 d_h,)``. Works on a single vector or a ``(B, d)`` batch.
    """
    W, b = params["W"], params["b"]
    d_h = h_prev.shape[-1]
    if c_prev.shape != h_prev.shape:
        raise ShapeError("lstm_cell: h and c shapes differ")
    if W.shape != (x_t.shape[-1] + d_h, 4 * d_h) or b.shape != (4 * d_h,):
        raise ShapeError(f"lstm_cell: W{W.shape}/b{b.shape} inconsistent with d_in={x_t.shape[-1]}, d_h={d_h}")
    if x_t.shape[:-1] != h_prev.shape[:-1]:
        raise ShapeError("lstm_cell: batch shapes of x and h differ")
    z = affine(concat([x_t, h_prev], axis=-1), W, b)
    i = sigmoid(getitem(z, (..., slice(0, d_h))))
    f = sigmoid(getitem(z, (..., slice(d_h, 2 * d_h))))
    g = tanh(getitem(z, (..., slice(2 * d_h, 3 * d_h))))
    o = sigmoid(getitem(z, (..., slice(3 * d_h, 4 * d_h))))
    c = add(mul(f, c_prev), mul(i, g))
    h = mul(o, tanh(c))
    return h, c


# ---------------------------------------------------------------------------
# loss


def bce(p: Tensor, y, mask_arr) -> Tensor:
    """Masked binary cross-entropy averaged over the mask-true cells.

    Probabilities are clamped to ``[eps, 1 - eps]``; the clamp has zero
    derivative outside that interval. An empty mask yields 0 and a warning.
    """
    yd = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=p.dtype)
    md = np.asarray(mask_arr.data if isinstance(mask_arr, Tensor) else mask_arr).astype(bool)
    if yd.shape != p.shape or md.shape != p.shape:
        raise ShapeError(f"bce: p{p.shape}, y{yd.shape}, mask{md.shape} must match")
    V = int(md.sum())
    if V == 0:
        warnings.warn("bce: mask selects no cells; loss defined as 0", RuntimeWarning, stacklevel=2)
        return result("bce", (p,), np.zeros((), dtype=p.dtype), lambda g: (np.zeros_like(p.data),))
    pd = p.data
    pc = np.clip(pd, BCE_EPS, 1.0 - BCE_EPS)
    terms = yd * np.log(pc) + (1.0 - yd) * np.log(1.0 - pc)
    loss = -np.where(md, terms, 0.0).sum() / V
    inside = (pd >= BCE_EPS) & (pd <= 1.0 - BCE_EPS)

    def backward(g):
        dp = -(yd / pc - (1.0 - yd) / (1.0 - pc)) / V
        return (g * np.where(md & inside, dp, 0.0),)

    return result("bce", (p,), np.asarray(loss, dtype=p.dtype), backward)


__all__ = [
    "affine", "elementwise", "mul", "add", "maximum", "sub", "scale", "mask", "add_const",
    "broadcast_to", "reshape", "transpose", "getitem", "concat", "stack", "sum", "mean", "add_n",
    "activation", "sigmoid", "relu", "tanh", "conv2d", "pool2d", "upsample2x", "range_max",
    "lstm_cell", "bce", "as_tensor",
]
