"""Adam and the supervised train/evaluate loop (batch size 1)."""

from __future__ import annotations

import contextlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from typing import Iterator, Literal, Mapping, Sequence

import numpy as np

from . import nn
from .metrics import MetricsReport, report_volume
from .tensor import Tensor, Tape, use_tape
from .volume import Mask, Volume, atomic_write_bytes, binarize

__all__ = [
    "AdamState",
    "TrainConfig",
    "Dataset",
    "EpochRecord",
    "NumericError",
    "adam_step",
    "train",
    "evaluate_split",
    "single_threaded",
    "write_history",
]

log = logging.getLogger(__name__)


class NumericError(FloatingPointError):
    """A loss or gradient went non-finite."""


@dataclass
class AdamState:
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray | None], state: AdamState) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``.

    Parameters whose gradient is ``None`` are treated as having zero gradient.
    All gradients are checked before anything is modified.
    """
    for name, g in grads.items():
        if g is None:
            continue
        if g.shape != params[name].shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter is {params[name].shape}")
        if not np.all(np.isfinite(g)):
            bad = int(np.count_nonzero(~np.isfinite(g)))
            raise NumericError(f"non-finite gradient for {name} ({bad} of {g.size} entries) "
                               f"at step {state.step_count + 1}")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p.data -= (state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)).astype(p.dtype)


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 1
    loss_kind: Literal["bce_with_logits", "soft_dice"] = "bce_with_logits"
    threshold: float = 0.5
    seed: int = 0
    lr: float = 1e-2
    shuffle: bool = False
    precision: Literal["float32", "float64"] = "float32"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size != 1:
            raise ValueError("only batch_size=1 is supported")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must lie in (0, 1), got {self.threshold}")
        if self.loss_kind not in ("bce_with_logits", "soft_dice"):
            raise ValueError(f"unknown loss_kind {self.loss_kind!r}")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got {self.precision!r}")


@dataclass
class Dataset:
    """Ordered (volume, mask) pairs of one split."""

    samples: list[tuple[Volume, Mask]]
    split: Literal["train", "test"] = "train"
    ids: list[str] | None = None

    def __post_init__(self):
        for i, (vol, mask) in enumerate(self.samples):
            if vol.dims != mask.dims:
                raise ValueError(f"{self.split} sample {i}: volume dims {vol.dims} differ from mask dims {mask.dims}")
        if self.ids is None:
            self.ids = [str(i) for i in range(len(self.samples))]

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    train_iou: float
    test_iou: float | None


@contextlib.contextmanager
def single_threaded() -> Iterator[None]:
    """Pin BLAS to one thread so reductions happen in a fixed order."""
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover - threadpoolctl ships with the declared deps
        yield
        return
    with threadpool_limits(limits=1):
        yield


def evaluate_split(model, ds: Dataset, threshold: float = 0.5) -> tuple[float, list[MetricsReport]]:
    """Mean per-sample IoU of thresholded sigmoid predictions, plus the reports.

    ``model`` only needs a ``predict_proba(array) -> array`` method.
    """
    if len(ds) == 0:
        raise ValueError("evaluate_split needs a non-empty dataset")
    reports = []
    for sid, (vol, mask) in zip(ds.ids, ds.samples):
        prob = model.predict_proba(vol.data)
        if prob.shape != mask.dims:
            raise ValueError(f"sample {sid}: prediction shape {prob.shape} differs from mask {mask.dims}")
        reports.append(report_volume(binarize(prob, threshold), mask, sid))
    return float(np.mean([r.iou for r in reports])), reports


def train(model, train_set: Dataset, test_set: Dataset | None, cfg: TrainConfig,
          adam: AdamState | None = None) -> tuple[object, list[EpochRecord]]:
    """Epochs x samples of single-sample Adam steps; IoU on both splits after each epoch."""
    cfg.validate()
    if len(train_set) == 0:
        raise ValueError("training set is empty")
    for split in (train_set, test_set):
        if split is None:
            continue
        for sid, (vol, _) in zip(split.ids, split.samples):
            try:
                model.check_input(Tensor(np.zeros((1, 1) + vol.dims, dtype=np.float32)))
            except ValueError as exc:
                raise ValueError(f"{split.split} sample {sid}: {exc}") from exc

    adam = adam or AdamState(lr=cfg.lr)
    dtype = np.dtype(cfg.precision)
    order_rng = np.random.default_rng(cfg.seed)
    history: list[EpochRecord] = []
    tape = Tape()
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        model.train()
        order = np.arange(len(train_set))
        if cfg.shuffle:
            order = order_rng.permutation(order)
        losses = []
        for idx in order:
            vol, mask = train_set.samples[idx]
            x = Tensor(vol.data.astype(dtype)[None, None])
            y = Tensor(mask.data.astype(dtype)[None, None])
            tape.reset()
            model.zero_grad()
            with use_tape(tape):
                logits = model.forward(x)
                loss = nn.loss(cfg.loss_kind, logits, y)
                value = loss.item()
                if not np.isfinite(value):
                    raise NumericError(f"non-finite loss at epoch {epoch}, sample {train_set.ids[idx]}")
                tape.backward(loss)
            adam_step(model.params, {k: p.grad for k, p in model.params.items()}, adam)
            losses.append(value)
        tape.reset()
        train_iou, _ = evaluate_split(model, train_set, cfg.threshold)
        test_iou = evaluate_split(model, test_set, cfg.threshold)[0] if test_set is not None and len(test_set) else None
        rec = EpochRecord(epoch, float(np.mean(losses)), train_iou, test_iou)
        history.append(rec)
        log.info("epoch %d loss %.5f train_iou %.4f test_iou %s (%.1fs)", epoch, rec.loss, train_iou,
                 "n/a" if test_iou is None else f"{test_iou:.4f}", time.perf_counter() - t0)
    model.train()
    return model, history


def history_lines(history: Sequence[EpochRecord]) -> str:
    return "".join(json.dumps(asdict(r), sort_keys=True) + "\n" for r in history)


def write_history(history: Sequence[EpochRecord], path: str | os.PathLike) -> None:
    """JSON lines, one ``{epoch, loss, train_iou, test_iou}`` record per epoch."""
    atomic_write_bytes(path, history_lines(history).encode())


def read_history(path: str | os.PathLike) -> list[EpochRecord]:
    with open(path) as fh:
        return [EpochRecord(**json.loads(line)) for line in fh if line.strip()]
