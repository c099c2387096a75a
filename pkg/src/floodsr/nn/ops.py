"""Layer-level operations for the U-Net and autoencoder.

The operator set is deliberately small: 2-D cross-correlation, nearest
upsampling, group normalization, SiLU, dense layers, softmax and
scaled-dot-product self-attention over flattened spatial positions.
Each op carries a hand-written backward pass registered on the graph.
"""

from __future__ import annotations

import numpy as np

from ..errors import ContractError, DimensionError
from .convkernels import active_backend
from .tensor import _acc, _check_same_dtype, concat, matmul, node, reshape, transpose


def conv2d(x, w, b=None, stride=1, pad=0):
    """2-D cross-correlation of [N,C,H,W] with [O,C,k,k] kernels.

    Output spatial size is floor((H + 2*pad - k)/stride) + 1. Odd square
    kernels only; the kernel channel count must match the input.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise DimensionError("conv2d expects x[N,C,H,W] and w[O,C,k,k]")
    n, c, h, wd = x.data.shape
    o, cw, kh, kw = w.data.shape
    if kh != kw:
        raise ContractError("conv2d kernels must be square")
    if kh % 2 != 1:
        raise ContractError("conv2d kernel size must be odd")
    if pad > kh - 1:
        # pad beyond k-1 never occurs in this operator set
        raise ContractError("conv2d requires pad <= k-1")
    if cw != c:
        raise DimensionError(f"kernel expects {cw} channels, input has {c}")
    if stride < 1 or pad < 0:
        raise ContractError("conv2d needs stride >= 1 and pad >= 0")
    _check_same_dtype(x, w)
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError("conv2d output would be empty")

    kernels = active_backend()
    out = kernels.forward(x.data, w.data, stride, pad)
    if b is not None:
        if b.data.shape != (o,):
            raise DimensionError(f"bias must have shape ({o},)")
        out += b.data.reshape(1, o, 1, 1)

    parents = (x, w) if b is None else (x, w, b)

    def bwd(g):
        if w.requires_grad:
            _acc(w, kernels.grad_w(x.data, g, w.data.shape, stride, pad))
        if b is not None and b.requires_grad:
            _acc(b, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            _acc(x, kernels.grad_x(g, w.data, stride, pad, h, wd))

    return node(out, parents, bwd, "conv2d")


def nearest_upsample2x(x):
    """Nearest-neighbour 2x spatial upsampling of [N,C,H,W]."""
    if x.data.ndim != 4:
        raise DimensionError("nearest_upsample2x expects [N,C,H,W]")
    n, c, h, w = x.data.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def bwd(g):
        if x.requires_grad:
            _acc(x, g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))

    return node(out, (x,), bwd, "nearest_upsample2x")


def group_norm(x, gamma, beta, groups, eps=1e-5):
    """Group normalization over [N,C,H,W] with per-channel scale and shift."""
    if x.data.ndim != 4:
        raise DimensionError("group_norm expects [N,C,H,W]")
    n, c, h, w = x.data.shape
    if c % groups != 0:
        raise ContractError(f"channels {c} not divisible by {groups} groups")
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise DimensionError("gamma/beta must be per-channel vectors")
    m = (c // groups) * h * w
    xg = x.data.reshape(n, groups, m)
    mean = xg.mean(axis=2, keepdims=True)
    xc = xg - mean
    var = np.einsum("ngm,ngm->ng", xc, xc) / m
    inv = (1.0 / np.sqrt(var + x.data.dtype.type(eps)))[:, :, None]
    xhat_g = xc * inv
    xhat = xhat_g.reshape(n, c, h, w)
    out = xhat * gamma.data.reshape(1, c, 1, 1) + beta.data.reshape(1, c, 1, 1)

    def bwd(g):
        if gamma.requires_grad:
            _acc(gamma, np.einsum("nchw,nchw->c", g, xhat))
        if beta.requires_grad:
            _acc(beta, np.einsum("nchw->c", g))
        if x.requires_grad:
            dxhat = (g * gamma.data.reshape(1, c, 1, 1)).reshape(n, groups, m)
            term1 = dxhat.mean(axis=2, keepdims=True)
            term2 = (np.einsum("ngm,ngm->ng", dxhat, xhat_g) / m)[:, :, None]
            dx = inv * (dxhat - term1 - xhat_g * term2)
            _acc(x, dx.reshape(n, c, h, w))

    return node(out, (x, gamma, beta), bwd, "group_norm")


def _sigmoid(z):
    # exp overflow for very negative z saturates to 0 through 1/inf
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-z))


def silu(x):
    """SiLU activation x * sigmoid(x)."""
    s = _sigmoid(x.data)
    out = x.data * s

    def bwd(g):
        if x.requires_grad:
            _acc(x, g * (s * (1.0 + x.data * (1.0 - s))))

    return node(out, (x,), bwd, "silu")


def softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        if x.requires_grad:
            _acc(x, y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return node(y, (x,), bwd, "softmax")


def linear(x, w, b=None):
    """Dense layer: x[N,in] @ w[out,in]^T (+ b[out])."""
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise DimensionError("linear expects x[N,in] and w[out,in]")
    if x.data.shape[1] != w.data.shape[1]:
        raise DimensionError(f"linear: {x.data.shape} incompatible with {w.data.shape}")
    _check_same_dtype(x, w)
    out = x.data @ w.data.T
    if b is not None:
        if b.data.shape != (w.data.shape[0],):
            raise DimensionError("linear bias shape mismatch")
        out = out + b.data

    parents = (x, w) if b is None else (x, w, b)

    def bwd(g):
        if x.requires_grad:
            _acc(x, g @ w.data)
        if w.requires_grad:
            _acc(w, g.T @ x.data)
        if b is not None and b.requires_grad:
            _acc(b, g.sum(axis=0))

    return node(out, parents, bwd, "linear")


def self_attention(x, wq, wk, wv, wo):
    """Single-head scaled-dot-product attention over flattened positions.

    x: [N,C,H,W]; wq/wk/wv/wo: 1x1 conv kernels [C,C,1,1]. Returns the
    attended features (no residual add; callers add the skip themselves).
    """
    n, c, h, w = x.data.shape
    q = conv2d(x, wq)
    k = conv2d(x, wk)
    v = conv2d(x, wv)
    # [N,C,H,W] -> [N, HW, C]
    qf = reshape(transpose(q, (0, 2, 3, 1)), (n, h * w, c))
    kf = reshape(transpose(k, (0, 2, 3, 1)), (n, h * w, c))
    vf = reshape(transpose(v, (0, 2, 3, 1)), (n, h * w, c))
    scores = matmul(qf, transpose(kf, (0, 2, 1))) * (1.0 / np.sqrt(c))
    attn = softmax(scores, axis=-1)
    ctx = matmul(attn, vf)
    ctx = transpose(reshape(ctx, (n, h, w, c)), (0, 3, 1, 2))
    return conv2d(ctx, wo)


def concat_channels(tensors):
    """Concatenate [N,C,H,W] tensors along the channel axis."""
    batches = {t.data.shape[0] for t in tensors}
    spatial = {t.data.shape[2:] for t in tensors}
    if len(batches) != 1 or len(spatial) != 1:
        raise DimensionError(
            f"channel concat needs aligned batches/space, got {batches} x {spatial}"
        )
    return concat(tensors, axis=1)
