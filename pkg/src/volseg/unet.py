"""Configurable 3D U-Net and its on-disk model format."""

from __future__ import annotations

import io
import json
import os
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import nn
from .tensor import ShapeError, Tensor, no_grad, randn_tensor, splitmix64

__all__ = [
    "UNetConfig",
    "UNet3D",
    "ModelFormatError",
    "PRESETS",
    "build_unet",
    "param_count",
    "save_model",
    "load_model",
]

PRESETS: dict[str, list[int]] = {
    "paper": [10, 32, 64, 128, 256, 512],
    "desk": [8, 16, 32],
}

MAGIC = b"VSEG"
FORMAT_VERSION = 1


class ModelFormatError(ValueError):
    """Model file is unreadable, truncated, or self-inconsistent."""


@dataclass
class UNetConfig:
    channel_schedule: list[int] = field(default_factory=lambda: list(PRESETS["desk"]))
    levels: int | None = None
    in_channels: int = 1
    out_channels: int = 1
    alpha: float = 0.3
    skips: bool = True

    def __post_init__(self):
        self.channel_schedule = [int(c) for c in self.channel_schedule]
        if self.levels is None:
            self.levels = len(self.channel_schedule)
        self.validate()

    @classmethod
    def preset(cls, name: str, **overrides) -> "UNetConfig":
        try:
            schedule = PRESETS[name]
        except KeyError:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
        return cls(channel_schedule=list(schedule), **overrides)

    def validate(self) -> None:
        if self.levels < 2:
            raise ValueError(f"levels must be >= 2, got {self.levels}")
        if len(self.channel_schedule) != self.levels:
            raise ValueError(
                f"channel_schedule has {len(self.channel_schedule)} entries but levels={self.levels}"
            )
        if any(c < 1 for c in self.channel_schedule):
            raise ValueError("channel counts must be positive")
        if any(b <= a for a, b in zip(self.channel_schedule, self.channel_schedule[1:])):
            raise ValueError(f"channel_schedule must be strictly increasing: {self.channel_schedule}")
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError(f"alpha must lie in [0, 1), got {self.alpha}")

    def to_dict(self) -> dict:
        return asdict(self)


def _layer_shapes(cfg: UNetConfig) -> "OrderedDict[str, tuple[int, ...]]":
    """Trainable parameter paths and shapes, in construction order."""
    sched = cfg.channel_schedule
    shapes: OrderedDict[str, tuple[int, ...]] = OrderedDict()

    def block(prefix: str, cin: int, cout: int) -> None:
        shapes[f"{prefix}.conv.weight"] = (cout, cin, 3, 3, 3)
        shapes[f"{prefix}.conv.bias"] = (cout,)
        shapes[f"{prefix}.bn.gamma"] = (cout,)
        shapes[f"{prefix}.bn.beta"] = (cout,)

    cin = cfg.in_channels
    for i, c in enumerate(sched):
        block(f"enc.{i}", cin, c)
        cin = c
    for i in reversed(range(cfg.levels - 1)):
        c = sched[i]
        shapes[f"dec.{i}.up.weight"] = (c, sched[i + 1], 2, 2, 2)
        shapes[f"dec.{i}.up.bias"] = (c,)
        block(f"dec.{i}", 2 * c if cfg.skips else c, c)
    shapes["head.weight"] = (cfg.out_channels, sched[0], 1, 1, 1)
    shapes["head.bias"] = (cfg.out_channels,)
    return shapes


def param_count(cfg: UNetConfig) -> int:
    """Number of trainable scalars in a model built from ``cfg``."""
    return int(sum(np.prod(s) for s in _layer_shapes(cfg).values()))


def _layer_seed(seed: int, index: int) -> int:
    return int(splitmix64((seed + index) & 0xFFFFFFFFFFFFFFFF, 1)[0])


class UNet3D:
    """Encoder/decoder with one conv-BN-LeakyReLU block per level.

    Encoder level ``i`` ends in a 2x2x2 max pool except at the bottleneck.
    Each decoder level upsamples with a transposed convolution, concatenates
    the matching encoder output (when ``skips``), and applies a block. A 1x1x1
    head produces logits; the sigmoid is left to the loss and to
    :meth:`predict_proba`.
    """

    def __init__(self, cfg: UNetConfig, params: "OrderedDict[str, Tensor]",
                 buffers: "OrderedDict[str, np.ndarray]"):
        self.config = cfg
        self.params = params
        self.buffers = buffers
        self.mode = "train"
        self._bn = {}
        for path in params:
            if path.endswith(".bn.gamma"):
                prefix = path[: -len(".bn.gamma")]
                self._bn[prefix] = nn.BatchNormParams(
                    gamma=params[f"{prefix}.bn.gamma"],
                    beta=params[f"{prefix}.bn.beta"],
                    running_mean=buffers[f"{prefix}.bn.running_mean"],
                    running_var=buffers[f"{prefix}.bn.running_var"],
                )

    # -- modes ------------------------------------------------------------
    def train(self) -> "UNet3D":
        self.mode = "train"
        return self

    def eval(self) -> "UNet3D":
        self.mode = "infer"
        return self

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def astype(self, dtype) -> "UNet3D":
        params = OrderedDict((k, Tensor(v.data.astype(dtype), requires_grad=v.requires_grad))
                             for k, v in self.params.items())
        buffers = OrderedDict((k, v.astype(dtype)) for k, v in self.buffers.items())
        m = UNet3D(self.config, params, buffers)
        m.mode = self.mode
        return m

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict((k, v.data) for k, v in self.params.items())
        state.update(self.buffers)
        return state

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    # -- forward ----------------------------------------------------------
    def _conv(self, prefix: str, x: Tensor, **kw) -> Tensor:
        p = nn.ConvParams(self.params[f"{prefix}.weight"], self.params[f"{prefix}.bias"], **kw)
        return nn.conv3d(x, p)

    def _block(self, prefix: str, x: Tensor) -> Tensor:
        x = self._conv(f"{prefix}.conv", x)
        bn = self._bn[prefix]
        bn.mode = self.mode
        x = nn.batchnorm3d(x, bn)
        return nn.leaky_relu(x, self.config.alpha)

    def check_input(self, x: Tensor) -> None:
        if x.data.ndim != 5 or x.shape[1] != self.config.in_channels:
            raise ShapeError(
                f"expected input N x {self.config.in_channels} x D x H x W, got {x.shape}"
            )
        factor = 2 ** (self.config.levels - 1)
        for name, ext in zip("DHW", x.shape[2:]):
            if ext % factor:
                raise ShapeError(
                    f"axis {name} has extent {ext}, which is not divisible by {factor} "
                    f"(2**(levels-1) for levels={self.config.levels})"
                )

    def forward(self, x: Tensor) -> Tensor:
        self.check_input(x)
        if x.dtype != self.dtype:
            x = Tensor(x.data.astype(self.dtype), requires_grad=x.requires_grad)
        levels = self.config.levels
        skips = []
        for i in range(levels):
            x = self._block(f"enc.{i}", x)
            if i < levels - 1:
                skips.append(x)
                x = nn.maxpool3d(x)
        for i in reversed(range(levels - 1)):
            up = nn.ConvParams(self.params[f"dec.{i}.up.weight"], self.params[f"dec.{i}.up.bias"], stride=2)
            x = nn.conv_transpose3d(x, up)
            if self.config.skips:
                x = nn.concat_channels(x, skips[i])
            x = self._block(f"dec.{i}", x)
        return self._conv("head", x)

    __call__ = forward

    def predict_proba(self, volume: np.ndarray) -> np.ndarray:
        """Sigmoid probabilities for one ``D x H x W`` array, in inference mode."""
        prev = self.mode
        self.eval()
        try:
            with no_grad():
                logits = self.forward(Tensor(np.asarray(volume, dtype=self.dtype)[None, None]))
                return nn.sigmoid(logits).data[0, 0]
        finally:
            self.mode = prev


def build_unet(cfg: UNetConfig, seed: int = 0, dtype=np.float32) -> UNet3D:
    """Fresh model with He initialization (leaky-ReLU gain), zero biases, unit BN scale."""
    cfg.validate()
    gain2 = 2.0 / (1.0 + cfg.alpha**2)
    params: OrderedDict[str, Tensor] = OrderedDict()
    buffers: OrderedDict[str, np.ndarray] = OrderedDict()
    for idx, (path, shape) in enumerate(_layer_shapes(cfg).items()):
        if path.endswith(".weight"):
            fan_in = int(np.prod(shape[1:]))
            if ".up." in path:
                fan_in = shape[1]  # each output voxel sees one input voxel per channel
            t = randn_tensor(shape, _layer_seed(seed, idx), scale=np.sqrt(gain2 / fan_in), dtype=dtype)
        elif path.endswith(".gamma"):
            t = Tensor(np.ones(shape, dtype=dtype))
        else:
            t = Tensor(np.zeros(shape, dtype=dtype))
        t.requires_grad = True
        params[path] = t
        if path.endswith(".bn.gamma"):
            prefix = path[: -len(".gamma")]
            buffers[f"{prefix}.running_mean"] = np.zeros(shape, dtype=dtype)
            buffers[f"{prefix}.running_var"] = np.ones(shape, dtype=dtype)
    return UNet3D(cfg, params, buffers)


# ---------------------------------------------------------------------------
# Persistence
#
# Layout: b"VSEG" | u32 version | u32 manifest length | manifest JSON (utf-8)
#         | little-endian float32 payload.
# The manifest lists every tensor's path, shape, byte offset and byte length.


def _expected_entries(cfg: UNetConfig) -> "OrderedDict[str, tuple[int, ...]]":
    entries = _layer_shapes(cfg)
    for path, shape in list(entries.items()):
        if path.endswith(".bn.gamma"):
            prefix = path[: -len(".gamma")]
            entries[f"{prefix}.running_mean"] = shape
            entries[f"{prefix}.running_var"] = shape
    return entries


def save_model(model: UNet3D, path: str | os.PathLike) -> None:
    state = model.state_dict()
    tensors = []
    offset = 0
    payload = io.BytesIO()
    for name, arr in state.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        tensors.append({"path": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        payload.write(raw)
        offset += len(raw)
    manifest = json.dumps({"config": model.config.to_dict(), "tensors": tensors}, sort_keys=True).encode()
    blob = MAGIC + struct.pack("<II", FORMAT_VERSION, len(manifest)) + manifest + payload.getvalue()
    _atomic_write(path, blob)


def load_model(path: str | os.PathLike) -> UNet3D:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise ModelFormatError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    if len(blob) < 12:
        raise ModelFormatError(f"{path}: truncated header")
    version, mlen = struct.unpack("<II", blob[4:12])
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"{path}: format version {version}, this reader supports {FORMAT_VERSION}")
    if len(blob) < 12 + mlen:
        raise ModelFormatError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(blob[12:12 + mlen].decode())
        cfg = UNetConfig(**manifest["config"])
    except (ValueError, TypeError, KeyError) as exc:
        raise ModelFormatError(f"{path}: unreadable manifest ({exc})") from exc
    payload = blob[12 + mlen:]

    expected = _expected_entries(cfg)
    listed = {t["path"]: t for t in manifest["tensors"]}
    if set(listed) != set(expected):
        raise ModelFormatError(f"{path}: manifest tensor paths do not match the config")
    arrays = {}
    for name, entry in listed.items():
        shape = tuple(entry["shape"])
        if shape != expected[name]:
            raise ModelFormatError(
                f"{path}: manifest shape {shape} for {name} disagrees with config shape {expected[name]}"
            )
        nbytes = 4 * int(np.prod(shape))
        if entry["nbytes"] != nbytes:
            raise ModelFormatError(f"{path}: {name} lists {entry['nbytes']} bytes, shape needs {nbytes}")
        end = entry["offset"] + nbytes
        if end > len(payload):
            raise ModelFormatError(f"{path}: payload truncated ({len(payload)} bytes, {name} ends at {end})")
        arrays[name] = np.frombuffer(payload, dtype="<f4", count=nbytes // 4,
                                     offset=entry["offset"]).reshape(shape).astype(np.float32)

    params = OrderedDict()
    buffers = OrderedDict()
    for name in _layer_shapes(cfg):
        params[name] = Tensor(arrays[name], requires_grad=True)
    for name in expected:
        if name not in params:
            buffers[name] = arrays[name].copy()
    return UNet3D(cfg, params, buffers)


def _atomic_write(path, data: bytes) -> None:
    tmp = f"{os.fspath(path)}.tmp-{os.getpid()}"
    try:
        with open(tmp, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)
