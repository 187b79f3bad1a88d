"""Forward/backward kernels for the layers used by AdeNet and LeNet-5.

Tensors are plain ``numpy.ndarray`` objects in (n, c, h, w) order; dense
layers take (n, d). Every forward kernel returns ``(y, ctx)`` where ``ctx``
is a :class:`LayerContext` holding what the matching backward pass needs.
:func:`layer_vjp` consumes a context exactly once.

Kernels are dtype-preserving: float32 inputs stay float32, float64 inputs
(used by gradient checks) stay float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


class NonFiniteError(FloatingPointError):
    """Raised when a kernel sees or produces NaN/Inf."""


@dataclass
class LayerContext:
    kind: str
    out_shape: tuple
    cache: dict[str, Any] = field(default_factory=dict)
    consumed: bool = False


def _check_finite(name: str, *arrays: np.ndarray) -> None:
    for a in arrays:
        if not np.isfinite(a).all():
            raise NonFiniteError(f"{name}: non-finite values encountered")


def _check_4d(name: str, x: np.ndarray) -> None:
    if x.ndim != 4:
        raise ValueError(f"{name}: expected (n, c, h, w) input, got shape {x.shape}")
    if x.shape[0] == 0:
        raise ValueError(f"{name}: empty batch")


# --------------------------------------------------------------------------
# convolution


def conv2d_forward(x, w, b, padding: int = 1):
    """Stride-1 cross-correlation with a zero border of width ``padding``.

    ``padding=1`` with a 3x3 kernel gives same-padding; ``padding=0`` gives
    the valid convolution LeNet-5 uses. Columns are gathered channels-last
    so the im2col copy and the col2im scatter both run over contiguous
    memory.
    """
    _check_4d("conv2d", x)
    n, c, h, wd = x.shape
    co, ci, kh, kw = w.shape
    if ci != c:
        raise ValueError(f"conv2d: input has {c} channels, weights expect {ci}")
    if b.shape != (co,):
        raise ValueError(f"conv2d: bias shape {b.shape} does not match {co} filters")
    _check_finite("conv2d", x, w, b)
    p = padding
    ho, wo = h + 2 * p - kh + 1, wd + 2 * p - kw + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: input {h}x{wd} too small for {kh}x{kw} kernel")
    xp = np.zeros((n, h + 2 * p, wd + 2 * p, c), dtype=x.dtype)
    xp[:, p:p + h, p:p + wd, :] = x.transpose(0, 2, 3, 1)
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # n, ho, wo, c, kh, kw
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * c)
    wmat = w.transpose(0, 2, 3, 1).reshape(co, -1)
    y = cols @ wmat.T
    y += b
    y = np.ascontiguousarray(y.reshape(n, ho, wo, co).transpose(0, 3, 1, 2))
    _check_finite("conv2d", y)
    ctx = LayerContext("conv2d", y.shape, {"cols": cols, "wmat": wmat, "w_shape": w.shape,
                                           "x_shape": x.shape, "padding": p})
    return y, ctx


def _conv2d_backward(ctx, dy):
    cols, wmat, p = ctx.cache["cols"], ctx.cache["wmat"], ctx.cache["padding"]
    n, c, h, wd = ctx.cache["x_shape"]
    co, _, kh, kw = ctx.cache["w_shape"]
    _, _, ho, wo = dy.shape
    dy_mat = dy.transpose(0, 2, 3, 1).reshape(-1, co)
    dw = (dy_mat.T @ cols).reshape(co, kh, kw, c).transpose(0, 3, 1, 2)
    db = dy_mat.sum(axis=0)
    dcols = (dy_mat @ wmat).reshape(n, ho, wo, kh, kw, c)
    dxp = np.zeros((n, h + 2 * p, wd + 2 * p, c), dtype=dy.dtype)
    for u in range(kh):
        for v in range(kw):
            dxp[:, u:u + ho, v:v + wo, :] += dcols[:, :, :, u, v, :]
    dx = np.ascontiguousarray(dxp[:, p:p + h, p:p + wd, :].transpose(0, 3, 1, 2))
    return dx, {"w": np.ascontiguousarray(dw), "b": db}


# --------------------------------------------------------------------------
# batch normalization


def batchnorm_forward(x, gamma, beta, running_mean, running_var, mode="train",
                      eps=BN_EPS, momentum=BN_MOMENTUM):
    """Per-channel batch normalization over (n, h, w).

    In train mode the running statistics arrays are updated in place:
    ``running = momentum * running + (1 - momentum) * batch_stat`` using the
    biased batch variance.
    """
    _check_4d("batchnorm", x)
    c = x.shape[1]
    for name, arr in (("gamma", gamma), ("beta", beta),
                      ("running_mean", running_mean), ("running_var", running_var)):
        if arr.shape != (c,):
            raise ValueError(f"batchnorm: {name} has shape {arr.shape}, expected ({c},)")
    if not eps > 0:
        raise ValueError("batchnorm: eps must be positive")
    if mode not in ("train", "infer"):
        raise ValueError(f"batchnorm: unknown mode {mode!r}")
    _check_finite("batchnorm", x, gamma, beta)

    if mode == "train":
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        running_mean *= momentum
        running_mean += (1 - momentum) * mean
        running_var *= momentum
        running_var += (1 - momentum) * var
    else:
        mean = running_mean.astype(x.dtype, copy=False)
        var = running_var.astype(x.dtype, copy=False)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    y = xhat * gamma[None, :, None, None] + beta[None, :, None, None]
    _check_finite("batchnorm", y)
    ctx = LayerContext("batchnorm", y.shape, {
        "xhat": xhat, "inv_std": inv_std, "gamma": gamma, "mode": mode,
        "mean": mean, "var": var, "eps": eps, "beta": beta,
    })
    return y, ctx


def batchnorm_inverse(y, ctx):
    """Undo a batch-norm forward using the statistics recorded in ``ctx``."""
    g = ctx.cache["gamma"][None, :, None, None]
    bt = ctx.cache["beta"][None, :, None, None]
    xhat = (y - bt) / g
    return xhat / ctx.cache["inv_std"][None, :, None, None] + ctx.cache["mean"][None, :, None, None]


def _batchnorm_backward(ctx, dy):
    xhat, inv_std, gamma = ctx.cache["xhat"], ctx.cache["inv_std"], ctx.cache["gamma"]
    dgamma = (dy * xhat).sum(axis=(0, 2, 3))
    dbeta = dy.sum(axis=(0, 2, 3))
    scale = (gamma * inv_std)[None, :, None, None]
    if ctx.cache["mode"] == "infer":
        return dy * scale, {"gamma": dgamma, "beta": dbeta}
    m = dy.shape[0] * dy.shape[2] * dy.shape[3]
    dx = scale * (dy - (dbeta / m)[None, :, None, None]
                  - xhat * (dgamma / m)[None, :, None, None])
    return dx, {"gamma": dgamma, "beta": dbeta}


# --------------------------------------------------------------------------
# activations and pooling


def relu_forward(x):
    y = np.maximum(x, 0)
    return y, LayerContext("relu", y.shape, {"mask": x > 0})


def _relu_backward(ctx, dy):
    return dy * ctx.cache["mask"], {}


def _pool_windows(name, x):
    """The four strided views of each 2x2 window, in row-major window order."""
    _check_4d(name, x)
    h, w = x.shape[2:]
    if h < 2 or w < 2:
        raise ValueError(f"{name}: spatial dims {h}x{w} are smaller than the 2x2 window")
    ho, wo = h // 2, w // 2
    return [x[:, :, u:2 * ho:2, v:2 * wo:2] for u in (0, 1) for v in (0, 1)]


def maxpool2_forward(x):
    """2x2/stride-2 max pool; odd trailing rows/columns are dropped."""
    views = _pool_windows("maxpool2", x)
    y = views[0].copy()
    idx = np.zeros(y.shape, dtype=np.int8)
    for i in (1, 2, 3):
        # strict comparison: the earliest row-major maximum keeps the gradient
        better = views[i] > y
        y[better] = views[i][better]
        idx[better] = i
    return y, LayerContext("maxpool2", y.shape, {"idx": idx, "x_shape": x.shape})


def _maxpool2_backward(ctx, dy):
    idx = ctx.cache["idx"]
    dx = np.zeros(ctx.cache["x_shape"], dtype=dy.dtype)
    ho, wo = idx.shape[2:]
    for i, (u, v) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
        dx[:, :, u:2 * ho:2, v:2 * wo:2] = np.where(idx == i, dy, 0)
    return dx, {}


def avgpool2_forward(x):
    """2x2/stride-2 average pool with floor semantics."""
    a, b, c, d = _pool_windows("avgpool2", x)
    y = (a + b + c + d) * 0.25
    return y, LayerContext("avgpool2", y.shape, {"x_shape": x.shape})


def _avgpool2_backward(ctx, dy):
    n, c, h, w = ctx.cache["x_shape"]
    ho, wo = dy.shape[2:]
    dx = np.zeros((n, c, h, w), dtype=dy.dtype)
    for u in (0, 1):
        for v in (0, 1):
            dx[:, :, u:2 * ho:2, v:2 * wo:2] = dy * 0.25
    return dx, {}


def global_avg_pool_forward(x):
    _check_4d("global_avg_pool", x)
    if x.shape[2] * x.shape[3] < 1:
        raise ValueError("global_avg_pool: empty spatial extent")
    y = x.mean(axis=(2, 3), keepdims=True)
    return y, LayerContext("global_avg_pool", y.shape, {"x_shape": x.shape})


def _gap_backward(ctx, dy):
    n, c, h, w = ctx.cache["x_shape"]
    dx = np.broadcast_to(dy / (h * w), (n, c, h, w)).copy()
    return dx, {}


def flatten_forward(x):
    y = x.reshape(x.shape[0], -1)
    return y, LayerContext("flatten", y.shape, {"x_shape": x.shape})


def _flatten_backward(ctx, dy):
    return dy.reshape(ctx.cache["x_shape"]), {}


# --------------------------------------------------------------------------
# dense + loss


def dense_forward(x, w, b):
    if x.ndim != 2:
        raise ValueError(f"dense: expected (n, d) input, got shape {x.shape}")
    if x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ValueError(f"dense: cannot multiply {x.shape} by {w.shape} with bias {b.shape}")
    _check_finite("dense", x, w, b)
    y = x @ w + b
    _check_finite("dense", y)
    return y, LayerContext("dense", y.shape, {"x": x, "w": w})


def _dense_backward(ctx, dy):
    x, w = ctx.cache["x"], ctx.cache["w"]
    return dy @ w.T, {"w": x.T @ dy, "b": dy.sum(axis=0)}


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_xent(logits, labels, class_weights=None):
    """Softmax cross-entropy averaged over the batch.

    Returns ``(loss, probs, dlogits)``. With class weights the per-sample
    terms are scaled by the weight of the sample's class and still divided by
    the batch size, so ``dlogits`` is the exact gradient of ``loss``.
    """
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"softmax_xent: {labels.shape[0] if labels.ndim else 0} labels for {n} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError("softmax_xent: label out of range")
    if not np.isfinite(logits).all():
        raise NonFiniteError("softmax_xent: non-finite logits")
    if class_weights is None:
        sw = np.ones(n, dtype=logits.dtype)
    else:
        cw = np.asarray(class_weights, dtype=logits.dtype)
        if cw.shape != (k,) or (cw < 0).any():
            raise ValueError("softmax_xent: class weights must be non-negative, one per class")
        sw = cw[labels]
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    probs = np.exp(logp)
    rows = np.arange(n)
    loss = float(-(sw * logp[rows, labels]).sum() / n)
    dlogits = probs.copy()
    dlogits[rows, labels] -= 1
    dlogits *= (sw / n)[:, None]
    return loss, probs, dlogits


# --------------------------------------------------------------------------
# dispatch

_BACKWARD = {
    "conv2d": _conv2d_backward,
    "batchnorm": _batchnorm_backward,
    "relu": _relu_backward,
    "maxpool2": _maxpool2_backward,
    "avgpool2": _avgpool2_backward,
    "global_avg_pool": _gap_backward,
    "flatten": _flatten_backward,
    "dense": _dense_backward,
}


def layer_vjp(ctx: LayerContext, dy: np.ndarray):
    """Vector-Jacobian product for the layer that produced ``ctx``.

    Returns ``(dx, param_grads)``; ``param_grads`` is empty for layers
    without parameters.
    """
    if ctx.consumed:
        raise RuntimeError(f"{ctx.kind}: context already consumed by a backward pass")
    if dy.shape != ctx.out_shape:
        raise ValueError(f"{ctx.kind}: gradient shape {dy.shape} != forward output {ctx.out_shape}")
    ctx.consumed = True
    dx, grads = _BACKWARD[ctx.kind](ctx, dy)
    ctx.cache.clear()
    return dx, grads
