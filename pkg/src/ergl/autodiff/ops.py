"""Differentiable primitives.

Elementwise binary ops follow numpy broadcasting; their adjoints are summed
back to each operand's shape.  Everything else has an explicit shape rule and
raises :class:`DimensionError` when it is violated.
"""

from __future__ import annotations

import numpy as np

from ..exceptions import ContractError, DimensionError
from .tensor import Tensor, as_tensor, get_default_dtype, make_result


def _lift(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else get_default_dtype()
    return Tensor(np.asarray(x, dtype=dtype), dtype=dtype)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are not compatible") from None


# -- elementwise ---------------------------------------------------------

def add(a, b):
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _broadcast_shape(a, b, "add")
    return make_result(
        "add", a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b):
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _broadcast_shape(a, b, "sub")
    return make_result(
        "sub", a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b):
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _broadcast_shape(a, b, "mul")
    return make_result(
        "mul", a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b):
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data
    return make_result(
        "div", out, (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def neg(a):
    return make_result("neg", -a.data, (a,), lambda g: (-g,))


def power(a, p):
    p = float(p)
    return make_result("power", a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a):
    out = np.exp(a.data)
    return make_result("exp", out, (a,), lambda g: (g * out,))


def log(a):
    return make_result("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    out = np.sqrt(a.data)
    return make_result("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def relu(a):
    mask = a.data > 0
    return make_result("relu", a.data * mask, (a,), lambda g: (g * mask,))


def sigmoid(a):
    x = a.data
    # branch-free stable logistic
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    return make_result("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a):
    out = np.tanh(a.data)
    return make_result("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


# -- linear algebra ------------------------------------------------------

def matmul(a, b):
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul batch extents differ: {a.shape} @ {b.shape}") from None

    def back(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return make_result("matmul", out, (a, b), back)


# -- reductions ----------------------------------------------------------

def _norm_axis(axis, ndim, op):
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    norm = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise DimensionError(f"{op}: axis {ax} out of range for rank {ndim}")
        norm.append(ax % ndim)
    return tuple(sorted(set(norm)))


def _expand_back(g, shape, axes, keepdims):
    if not keepdims:
        for ax in axes:
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    axes = _norm_axis(axis, a.ndim, "sum")
    out = np.asarray(a.data.sum(axis=axes, keepdims=keepdims))
    return make_result(
        "sum", out, (a,),
        lambda g: (np.array(_expand_back(g, a.shape, axes, keepdims)),),
    )


def mean(a, axis=None, keepdims=False):
    axes = _norm_axis(axis, a.ndim, "mean")
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = np.asarray(a.data.mean(axis=axes, keepdims=keepdims))
    return make_result(
        "mean", out, (a,),
        lambda g: (np.array(_expand_back(g, a.shape, axes, keepdims)) / count,),
    )


def max(a, axis, keepdims=False):  # noqa: A001
    axes = _norm_axis(axis, a.ndim, "max")
    kept = a.data.max(axis=axes, keepdims=True)
    mask = a.data == kept
    # split ties evenly so the adjoint stays a valid subgradient
    mask = mask / mask.sum(axis=axes, keepdims=True)
    out = kept if keepdims else np.squeeze(kept, axis=axes)

    def back(g):
        gk = g if keepdims else np.expand_dims(g, axes)
        return (gk * mask,)

    return make_result("max", np.asarray(out), (a,), back)


# -- shape manipulation --------------------------------------------------

def reshape(a, shape):
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}") from None
    return make_result("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(ax % a.ndim for ax in axes) != list(range(a.ndim)):
        raise DimensionError(f"invalid permutation {axes} for rank {a.ndim}")
    inv = np.argsort([ax % a.ndim for ax in axes])
    return make_result(
        "transpose", np.asarray(a.data.transpose(axes), order="C"), (a,),
        lambda g: (g.transpose(inv),),
    )


def swapaxes(a, i, j):
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def expand_dims(a, axis):
    return reshape(a, np.expand_dims(a.data, axis).shape)


def broadcast_to(a, shape):
    shape = tuple(shape)
    try:
        out = np.array(np.broadcast_to(a.data, shape), order="C")
    except ValueError:
        raise DimensionError(f"cannot broadcast {a.shape} to {shape}") from None
    return make_result("broadcast_to", out, (a,), lambda g: (_unbroadcast(g, a.shape),))


def getitem(a, index):
    out = np.array(a.data[index])

    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return make_result("getitem", out, (a,), back)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat of an empty list")
    nd = tensors[0].ndim
    ax = _norm_axis(axis, nd, "concat")[0]
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[k] != tensors[0].shape[k] for k in range(nd) if k != ax):
            raise DimensionError(
                f"concat along axis {ax}: shapes {[t.shape for t in tensors]} disagree off-axis"
            )
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def back(g):
        return tuple(
            np.take(g, np.arange(bounds[k], bounds[k + 1]), axis=ax) for k in range(len(tensors))
        )

    return make_result("concat", out, tuple(tensors), back)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"stack needs equal shapes, got {sorted(shapes)}")
    return concat([expand_dims(t, axis) for t in tensors], axis=axis)


# -- normalised exponentials --------------------------------------------

def softmax(a, axis=-1):
    axis = _norm_axis(axis, a.ndim, "softmax")[0]
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result("softmax", out, (a,), back)


def log_softmax(a, axis=-1):
    axis = _norm_axis(axis, a.ndim, "log_softmax")[0]
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def back(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return make_result("log_softmax", out, (a,), back)


# -- convolution and pooling --------------------------------------------

def _im2col(x):
    """(B, C, H, W) -> (9*C, B*H*W) patches of the zero-padded input, tap-major rows."""
    B, C, H, W = x.shape
    xp = np.zeros((C, B, H + 2, W + 2), dtype=x.dtype)
    xp[:, :, 1:-1, 1:-1] = x.transpose(1, 0, 2, 3)
    cols = np.empty((9, C, B, H, W), dtype=x.dtype)
    for i in range(3):
        for j in range(3):
            cols[3 * i + j] = xp[:, :, i:i + H, j:j + W]
    return cols.reshape(9 * C, B * H * W)


def _from_rows(m, B, H, W):
    """(O, B*H*W) -> (B, O, H, W)."""
    return np.ascontiguousarray(m.reshape(-1, B, H, W).transpose(1, 0, 2, 3))


def conv2d(x, kernel, bias=None, padding=1):
    """Same-padded 3x3 cross-correlation, NCHW layout, stride 1."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    B, C, H, W = x.shape
    O, Ck, kh, kw = kernel.shape
    if (kh, kw) != (3, 3):
        raise DimensionError(f"conv2d kernel must be 3x3, got {kh}x{kw}")
    if Ck != C:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    if padding != 1:
        raise DimensionError("conv2d supports padding=1 (same) only")
    cols = _im2col(x.data)
    # kernel as (O, 9*C), columns tap-major to match the patch rows
    wmat = kernel.data.transpose(0, 2, 3, 1).reshape(O, 9 * C)
    out = wmat @ cols
    if bias is not None:
        out = out + bias.data[:, None]
    out = _from_rows(out, B, H, W)
    inputs = (x, kernel) if bias is None else (x, kernel, bias)

    def back(g):
        gm = g.transpose(1, 0, 2, 3).reshape(O, B * H * W)
        gx = gk = gb = None
        if kernel.requires_grad:
            gk = np.ascontiguousarray((gm @ cols.T).reshape(O, 3, 3, C).transpose(0, 3, 1, 2))
        if x.requires_grad:
            # adjoint of a same-padded correlation: correlate with the flipped kernel
            flipped = kernel.data[:, :, ::-1, ::-1].transpose(1, 2, 3, 0).reshape(C, 9 * O)
            gx = _from_rows(flipped @ _im2col(g), B, H, W)
        if bias is not None and bias.requires_grad:
            gb = gm.sum(axis=1)
        return (gx, gk) if bias is None else (gx, gk, gb)

    return make_result("conv2d", out, inputs, back)


def _pool_view(x, k, op):
    if x.ndim != 4:
        raise DimensionError(f"{op} expects NCHW input, got {x.shape}")
    B, C, H, W = x.shape
    Ho, Wo = H // k, W // k
    if Ho < 1 or Wo < 1:
        raise DimensionError(f"{op}: input {H}x{W} smaller than the {k}x{k} window")
    crop = x.data[:, :, :Ho * k, :Wo * k]
    return crop.reshape(B, C, Ho, k, Wo, k), (B, C, H, W, Ho, Wo)


def avg_pool2d(x, k=2):
    """Non-overlapping k x k mean pooling; odd remainders are dropped."""
    v, (B, C, H, W, Ho, Wo) = _pool_view(x, k, "avg_pool2d")
    out = v.mean(axis=(3, 5))

    def back(g):
        full = np.zeros_like(x.data)
        rep = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
        full[:, :, :Ho * k, :Wo * k] = rep
        return (full,)

    return make_result("avg_pool2d", out, (x,), back)


def max_pool2d(x, k=2):
    v, (B, C, H, W, Ho, Wo) = _pool_view(x, k, "max_pool2d")
    out = v.max(axis=(3, 5))
    mask = v == out[:, :, :, None, :, None]
    mask = mask / mask.sum(axis=(3, 5), keepdims=True)

    def back(g):
        full = np.zeros_like(x.data)
        local = (mask * g[:, :, :, None, :, None]).reshape(B, C, Ho * k, Wo * k)
        full[:, :, :Ho * k, :Wo * k] = local
        return (full,)

    return make_result("max_pool2d", out, (x,), back)


# -- normalisation -------------------------------------------------------

def batch_norm(x, gamma, beta, running_mean, running_var, training, axis=1,
               momentum=0.9, eps=1e-5):
    """Batch normalisation over every axis except ``axis`` (the feature axis).

    ``running_mean``/``running_var`` are numpy arrays updated in place in
    training mode as ``r = momentum * r + (1 - momentum) * batch_stat``.
    """
    x = as_tensor(x)
    axis = axis % x.ndim
    red = tuple(k for k in range(x.ndim) if k != axis)
    bshape = [1] * x.ndim
    bshape[axis] = x.shape[axis]
    if gamma.shape != (x.shape[axis],) or beta.shape != (x.shape[axis],):
        raise DimensionError(
            f"batch_norm parameters {gamma.shape}/{beta.shape} do not match feature extent {x.shape[axis]}"
        )
    g_ = gamma.data.reshape(bshape)
    b_ = beta.data.reshape(bshape)

    if training:
        m = int(np.prod([x.shape[k] for k in red]))
        if m < 2:
            raise ContractError("batch_norm in train mode needs more than one value per feature")
        mu = x.data.mean(axis=red, keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=red, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        out = xhat * g_ + b_
        if running_mean is not None:
            unbiased = var.reshape(-1) * m / (m - 1)
            running_mean *= momentum
            running_mean += (1 - momentum) * mu.reshape(-1)
            running_var *= momentum
            running_var += (1 - momentum) * unbiased

        def back(g):
            gx = gg = gb = None
            if gamma.requires_grad:
                gg = (g * xhat).sum(axis=red)
            if beta.requires_grad:
                gb = g.sum(axis=red)
            if x.requires_grad:
                gxh = g * g_
                gx = inv * (gxh - gxh.mean(axis=red, keepdims=True)
                            - xhat * (gxh * xhat).mean(axis=red, keepdims=True))
            return gx, gg, gb
    else:
        rm = np.asarray(running_mean, dtype=x.data.dtype).reshape(bshape)
        rv = np.asarray(running_var, dtype=x.data.dtype).reshape(bshape)
        inv = 1.0 / np.sqrt(rv + eps)
        xhat = (x.data - rm) * inv
        out = xhat * g_ + b_

        def back(g):
            gg = (g * xhat).sum(axis=red) if gamma.requires_grad else None
            gb = g.sum(axis=red) if beta.requires_grad else None
            gx = g * g_ * inv if x.requires_grad else None
            return gx, gg, gb

    return make_result("batch_norm", out.astype(x.data.dtype, copy=False), (x, gamma, beta), back)


__all__ = [name for name in dir() if not name.startswith("_") and name not in {
    "annotations", "np", "Tensor", "as_tensor",
    "get_default_dtype", "make_result", "ContractError", "DimensionError",
}]
