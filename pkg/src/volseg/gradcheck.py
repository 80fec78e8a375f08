"""Finite-difference check of every differentiable op at float64."""

from __future__ import annotations

import numpy as np

from . import nn
from .tensor import Tensor, add, grad_check, mean, mul, randn_tensor, scale, sum
from .unet import UNetConfig, build_unet

__all__ = ["TOLERANCE", "run_suite", "OPS"]

TOLERANCE = 1e-4


def _rand(shape, seed, scale_=1.0):
    return randn_tensor(shape, seed, scale_, dtype=np.float64)


def _spatial(rng):
    return tuple(int(rng.integers(2, 5)) for _ in range(3))


def _conv3d(rng, seed):
    n, cin, cout = int(rng.integers(1, 3)), int(rng.integers(1, 3)), int(rng.integers(1, 3))
    k = int(rng.choice([1, 2, 3]))
    padding = "same" if rng.random() < 0.7 else "valid"
    stride = int(rng.choice([1, 2])) if padding == "valid" else 1
    spatial = tuple(max(k, s) for s in _spatial(rng))
    x = _rand((n, cin) + spatial, seed)
    w = _rand((cout, cin, k, k, k), seed + 1, 0.5)
    b = _rand((cout,), seed + 2)
    return lambda x, w, b: nn.conv3d(x, nn.ConvParams(w, b, stride=stride, padding=padding)), [x, w, b]


def _conv_t(rng, seed):
    cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    x = _rand((1, cin) + _spatial(rng), seed)
    w = _rand((cout, cin, 2, 2, 2), seed + 1)
    b = _rand((cout,), seed + 2)
    return lambda x, w, b: nn.conv_transpose3d(x, nn.ConvParams(w, b, stride=2)), [x, w, b]


def _maxpool(rng, seed):
    shape = (1, int(rng.integers(1, 3))) + tuple(2 * int(rng.integers(1, 3)) for _ in range(3))
    # distinct values spaced well above epsilon keep the argmax stable
    perm = np.random.default_rng(seed).permutation(int(np.prod(shape))).astype(np.float64)
    return nn.maxpool3d, [Tensor(perm.reshape(shape) * 0.01)]


def _batchnorm(mode):
    def make(rng, seed):
        c = int(rng.integers(1, 4))
        x = _rand((1, c) + _spatial(rng), seed)
        gamma = _rand((c,), seed + 1)
        beta = _rand((c,), seed + 2)
        rm = np.random.default_rng(seed).normal(size=c)
        rv = np.random.default_rng(seed + 1).uniform(0.5, 2.0, size=c)

        def fn(x, g, b):
            return nn.batchnorm3d(x, nn.BatchNormParams(g, b, rm.copy(), rv.copy(), mode=mode))
        return fn, [x, gamma, beta]
    return make


def _leaky(rng, seed):
    x = _rand((1, 2) + _spatial(rng), seed)
    x.data[np.abs(x.data) < 1e-3] = 0.5  # keep clear of the kink
    return lambda x: nn.leaky_relu(x, 0.3), [x]


def _sigmoid(rng, seed):
    x = Tensor(np.random.default_rng(seed).uniform(-3, 3, size=(1, 1) + _spatial(rng)))
    return nn.sigmoid, [x]


def _concat(rng, seed):
    sp = _spatial(rng)
    a = _rand((1, int(rng.integers(1, 4))) + sp, seed)
    b = _rand((1, int(rng.integers(1, 4))) + sp, seed + 1)
    return nn.concat_channels, [a, b]


def _loss(kind):
    def make(rng, seed):
        shape = (1, 1) + _spatial(rng)
        z = _rand(shape, seed, 2.0)
        t = Tensor((np.random.default_rng(seed).random(shape) < 0.4).astype(np.float64))
        return lambda z: nn.loss(kind, z, t), [z]
    return make


def _elementwise(rng, seed):
    shape = _spatial(rng)
    a, b = _rand(shape, seed), _rand(shape, seed + 1)
    return lambda a, b: mean(add(scale(mul(a, b), 1.5), a)) + sum(b), [a, b]


def _model(rng, seed):
    model = build_unet(UNetConfig(channel_schedule=[2, 4]), seed=seed, dtype=np.float64)
    for name, p in model.params.items():
        if name.endswith(("bias", "beta", "gamma")):
            p.data[...] = np.random.default_rng(seed).normal(0.0, 0.3, p.shape) + (1.0 if "gamma" in name else 0.0)
    x = _rand((1, 1, 4, 4, 4), seed + 7)
    params = list(model.params.values())
    return lambda x, *ps: model.forward(x), [x] + params


OPS = {
    "elementwise": _elementwise,
    "conv3d": _conv3d,
    "conv_transpose3d": _conv_t,
    "maxpool3d": _maxpool,
    "batchnorm3d_train": _batchnorm("train"),
    "batchnorm3d_infer": _batchnorm("infer"),
    "leaky_relu": _leaky,
    "sigmoid": _sigmoid,
    "concat_channels": _concat,
    "bce_with_logits": _loss("bce_with_logits"),
    "soft_dice": _loss("soft_dice"),
    "unet_2level": _model,
}


def run_suite(seed: int = 0, cases: int = 5, ops=None, epsilon: float = 1e-5) -> dict[str, float]:
    """Worst relative gradient error per op over ``cases`` random shapes each."""
    rng = np.random.default_rng(seed)
    worst = {}
    for name in ops or OPS:
        errs = []
        for case in range(cases):
            fn, inputs = OPS[name](rng, seed * 1000 + case * 10)
            errs.append(grad_check(fn, inputs, epsilon=epsilon, seed=case))
        worst[name] = max(errs)
    return worst
