"""Differentiable 3D layers on top of :mod:`volseg.tensor`.

Convolutions are cross-correlations over NCDHW tensors. Rather than building a
full im2col matrix, each kernel offset contributes one matmul over a strided
view of the padded input, which keeps peak memory at one input-sized slice.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .tensor import ShapeError, Tensor, _record

__all__ = [
    "ConvParams",
    "BatchNormParams",
    "conv3d",
    "conv_transpose3d",
    "maxpool3d",
    "batchnorm3d",
    "leaky_relu",
    "sigmoid",
    "concat_channels",
    "loss",
    "bce_with_logits",
    "soft_dice",
]


@dataclass
class ConvParams:
    """Weights ``[out, in, kd, kh, kw]`` and bias ``[out]`` of a 3D convolution."""

    weight: Tensor
    bias: Tensor
    stride: int = 1
    padding: Literal["same", "valid"] = "same"

    def __post_init__(self):
        w = self.weight.shape
        if len(w) != 5:
            raise ShapeError(f"conv weight must be 5-D [out, in, kd, kh, kw], got {w}")
        if self.bias.shape != (w[0],):
            raise ShapeError(f"bias shape {self.bias.shape} does not match out_channels {w[0]}")
        if self.stride < 1:
            raise ValueError(f"stride must be positive, got {self.stride}")
        if self.padding not in ("same", "valid"):
            raise ValueError(f"padding must be 'same' or 'valid', got {self.padding!r}")

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel(self) -> tuple[int, int, int]:
        return tuple(self.weight.shape[2:])


@dataclass
class BatchNormParams:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray = None
    running_var: np.ndarray = None
    epsilon: float = 1e-5
    momentum: float = 0.9
    mode: Literal["train", "infer"] = "train"

    def __post_init__(self):
        c = self.gamma.shape[0]
        if self.gamma.shape != (c,) or self.beta.shape != (c,):
            raise ShapeError("gamma and beta must both have shape (channels,)")
        if self.running_mean is None:
            self.running_mean = np.zeros(c, dtype=self.gamma.dtype)
        if self.running_var is None:
            self.running_var = np.ones(c, dtype=self.gamma.dtype)

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def _check_5d(x: Tensor, op: str) -> None:
    if x.data.ndim != 5:
        raise ShapeError(f"{op} expects an NCDHW tensor, got shape {x.shape}")


def _offsets(kernel):
    kd, kh, kw = kernel
    for i in range(kd):
        for j in range(kh):
            for k in range(kw):
                yield i, j, k


def conv3d(x: Tensor, p: ConvParams) -> Tensor:
    _check_5d(x, "conv3d")
    n, c, d, h, w = x.shape
    if c != p.in_channels:
        raise ShapeError(f"conv3d: input has {c} channels, weights expect {p.in_channels}")
    kd, kh, kw = p.kernel
    s = p.stride
    if p.padding == "same":
        pads = [((k - 1) // 2, k // 2) for k in (kd, kh, kw)]
    else:
        if d < kd or h < kh or w < kw:
            raise ShapeError(f"conv3d: input {(d, h, w)} smaller than kernel {p.kernel} with valid padding")
        pads = [(0, 0)] * 3
    xp = np.pad(x.data, [(0, 0), (0, 0)] + pads) if any(a or b for a, b in pads) else x.data
    od = (xp.shape[2] - kd) // s + 1
    oh = (xp.shape[3] - kh) // s + 1
    ow = (xp.shape[4] - kw) // s + 1
    wt = p.weight.data
    out = np.zeros((p.out_channels, n, od, oh, ow), dtype=np.result_type(x.data, wt))

    def window(arr, i, j, k):
        return arr[:, :, i:i + s * (od - 1) + 1:s, j:j + s * (oh - 1) + 1:s, k:k + s * (ow - 1) + 1:s]

    for i, j, k in _offsets(p.kernel):
        out += np.tensordot(wt[:, :, i, j, k], window(xp, i, j, k), axes=([1], [1]))
    out = out.transpose(1, 0, 2, 3, 4) + p.bias.data.reshape(1, -1, 1, 1, 1)

    def backward_fn(g):
        g_oc = g.transpose(1, 0, 2, 3, 4)  # (O, N, D, H, W)
        gw = np.empty_like(wt)
        gxp = np.zeros_like(xp) if x.requires_grad else None
        for i, j, k in _offsets(p.kernel):
            gw[:, :, i, j, k] = np.tensordot(g_oc, window(xp, i, j, k), axes=([1, 2, 3, 4], [0, 2, 3, 4]))
            if gxp is not None:
                contrib = np.tensordot(wt[:, :, i, j, k], g_oc, axes=([0], [0]))  # (C, N, D, H, W)
                window(gxp, i, j, k)[...] += contrib.transpose(1, 0, 2, 3, 4)
        gx = None
        if gxp is not None:
            (d0, _), (h0, _), (w0, _) = pads
            gx = gxp[:, :, d0:d0 + d, h0:h0 + h, w0:w0 + w]
        gb = g.sum(axis=(0, 2, 3, 4))
        return gx, gw, gb

    return _record("conv3d", (x, p.weight, p.bias), np.ascontiguousarray(out), backward_fn)


def conv_transpose3d(x: Tensor, p: ConvParams) -> Tensor:
    """Stride-2, 2x2x2 transposed convolution that doubles every spatial extent.

    ``p.weight`` is ``[out, in, 2, 2, 2]``. Because stride equals kernel size
    the scatter regions never overlap, so each input voxel paints its own
    2x2x2 output block.
    """
    _check_5d(x, "conv_transpose3d")
    n, c, d, h, w = x.shape
    if c != p.in_channels:
        raise ShapeError(f"conv_transpose3d: input has {c} channels, weights expect {p.in_channels}")
    if p.kernel != (2, 2, 2) or p.stride != 2:
        raise ShapeError("conv_transpose3d supports kernel (2,2,2) with stride 2 only")
    wt = p.weight.data
    o = p.out_channels
    # (N, C, D, H, W) x (O, C, 2, 2, 2) -> (N, D, H, W, O, 2, 2, 2)
    blocks = np.tensordot(x.data, wt, axes=([1], [1])).transpose(0, 4, 1, 5, 2, 6, 3, 7)
    out = blocks.reshape(n, o, 2 * d, 2 * h, 2 * w) + p.bias.data.reshape(1, -1, 1, 1, 1)

    def backward_fn(g):
        gb = g.reshape(n, o, d, 2, h, 2, w, 2)  # n o d i h j w k
        gx = np.tensordot(gb, wt, axes=([1, 3, 5, 7], [0, 2, 3, 4])).transpose(0, 4, 1, 2, 3)
        gw = np.tensordot(gb, x.data, axes=([0, 2, 4, 6], [0, 2, 3, 4]))  # o i j k c
        gw = gw.transpose(0, 4, 1, 2, 3)
        return gx, gw, g.sum(axis=(0, 2, 3, 4))

    return _record("conv_transpose3d", (x, p.weight, p.bias), np.ascontiguousarray(out), backward_fn)


def maxpool3d(x: Tensor) -> Tensor:
    """2x2x2 max pooling, stride 2.

    Gradient goes to the block's argmax; ties resolve to the lowest linear index.
    """
    _check_5d(x, "maxpool3d")
    n, c, d, h, w = x.shape
    for name, ext in zip("DHW", (d, h, w)):
        if ext % 2:
            raise ShapeError(f"maxpool3d: axis {name} has odd extent {ext}")
    blocks = x.data.reshape(n, c, d // 2, 2, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 6, 3, 5, 7)
    blocks = blocks.reshape(n, c, d // 2, h // 2, w // 2, 8)
    idx = np.argmax(blocks, axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward_fn(g):
        gblocks = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gblocks, idx[..., None], g[..., None], axis=-1)
        gx = gblocks.reshape(n, c, d // 2, h // 2, w // 2, 2, 2, 2).transpose(0, 1, 2, 5, 3, 6, 4, 7)
        return (gx.reshape(n, c, d, h, w),)

    return _record("maxpool3d", (x,), np.ascontiguousarray(out), backward_fn)


def batchnorm3d(x: Tensor, p: BatchNormParams) -> Tensor:
    """Per-channel normalization over (N, D, H, W).

    With batch size 1 the train-mode statistics are purely spatial.
    """
    _check_5d(x, "batchnorm3d")
    if x.shape[1] != p.channels:
        raise ShapeError(f"batchnorm3d: input has {x.shape[1]} channels, params have {p.channels}")
    axes = (0, 2, 3, 4)
    bshape = (1, -1, 1, 1, 1)
    xd = x.data
    if p.mode == "train":
        mu = xd.mean(axis=axes, dtype=np.float64)
        var = np.mean((xd - mu.reshape(bshape)) ** 2, axis=axes)
        m = p.momentum
        p.running_mean[...] = m * p.running_mean + (1 - m) * mu
        p.running_var[...] = m * p.running_var + (1 - m) * var
    elif p.mode == "infer":
        mu = p.running_mean.astype(np.float64)
        var = p.running_var.astype(np.float64)
    else:
        raise ValueError(f"unknown batchnorm mode {p.mode!r}")
    inv_std = (1.0 / np.sqrt(var + p.epsilon)).astype(xd.dtype)
    xhat = (xd - mu.astype(xd.dtype).reshape(bshape)) * inv_std.reshape(bshape)
    gamma = p.gamma.data.reshape(bshape)
    out = xhat * gamma + p.beta.data.reshape(bshape)
    training = p.mode == "train"

    def backward_fn(g):
        gg = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gxhat = g * gamma
        if training:
            count = xd.size // xd.shape[1]
            mean_g = gxhat.sum(axis=axes).reshape(bshape) / count
            mean_gx = (gxhat * xhat).sum(axis=axes).reshape(bshape) / count
            gx = (gxhat - mean_g - xhat * mean_gx) * inv_std.reshape(bshape)
        else:
            gx = gxhat * inv_std.reshape(bshape)
        return gx, gg, gbeta

    return _record("batchnorm3d", (x, p.gamma, p.beta), out, backward_fn)


def leaky_relu(x: Tensor, alpha: float = 0.3) -> Tensor:
    if not 0.0 <= alpha < 1.0:
        raise ValueError(f"alpha must lie in [0, 1), got {alpha}")
    pos = x.data > 0
    a = x.dtype.type(alpha)
    out = np.where(pos, x.data, a * x.data)
    return _record("leaky_relu", (x,), out, lambda g: (np.where(pos, g, a * g),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # exp only ever sees non-positive arguments
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype, copy=False)


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _record("sigmoid", (x,), y, lambda g: (g * y * (1 - y),))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != b.data.ndim or a.data.ndim < 2:
        raise ShapeError(f"concat_channels: incompatible ranks {a.shape} and {b.shape}")
    if a.shape[:1] + a.shape[2:] != b.shape[:1] + b.shape[2:]:
        raise ShapeError(f"concat_channels: non-channel extents differ, {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return _record("concat", (a, b), out, lambda g: (g[:, :ca], g[:, ca:]))


def bce_with_logits(logits: Tensor, target: Tensor) -> Tensor:
    """Mean binary cross-entropy in the log-sum-exp form."""
    z, t = logits.data, target.data.astype(logits.dtype)
    per_voxel = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    val = np.asarray(per_voxel.sum(dtype=np.float64) / z.size, dtype=z.dtype)
    n = z.size
    return _record("bce_with_logits", (logits,), val, lambda g: ((_sigmoid(z) - t) * (g / n),))


def soft_dice(logits: Tensor, target: Tensor, smooth: float = 1.0) -> Tensor:
    """``1 - (2*sum(p*t) + s) / (sum(p) + sum(t) + s)`` with ``p = sigmoid(logits)``."""
    z, t = logits.data, target.data.astype(logits.dtype)
    p = _sigmoid(z)
    inter = float(np.sum(p * t, dtype=np.float64))
    denom = float(np.sum(p, dtype=np.float64) + np.sum(t, dtype=np.float64)) + smooth
    num = 2.0 * inter + smooth
    val = np.asarray(1.0 - num / denom, dtype=z.dtype)

    def backward_fn(g):
        dp = -(2.0 * t * denom - num) / denom**2
        return ((g * dp * p * (1 - p)).astype(z.dtype),)

    return _record("soft_dice", (logits,), val, backward_fn)


_LOSSES = {"bce_with_logits": bce_with_logits, "soft_dice": soft_dice}


def loss(kind: str, logits: Tensor, target: Tensor) -> Tensor:
    if logits.shape != target.shape:
        raise ShapeError(f"loss: logits {logits.shape} vs target {target.shape}")
    try:
        fn = _LOSSES[kind]
    except KeyError:
        raise ValueError(f"unknown loss kind {kind!r}; choose from {sorted(_LOSSES)}") from None
    return fn(logits, target)
