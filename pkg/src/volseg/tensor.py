"""Dense tensors with a reverse-mode autodiff tape.

A :class:`Tensor` wraps a contiguous numpy array (``float32`` for training,
``float64`` for gradient checking). Every differentiable op records one node on
the active :class:`Tape`; :func:`backward` replays the tape in reverse.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "GraphError",
    "get_tape",
    "no_grad",
    "randn_tensor",
    "splitmix64",
    "add",
    "sub",
    "mul",
    "scale",
    "sum",
    "mean",
    "backward",
    "grad_check",
]


class ShapeError(ValueError):
    """Raised when tensor extents are invalid or incompatible."""


class GraphError(RuntimeError):
    """Raised on misuse of the autodiff tape."""


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """N-dimensional array with optional gradient tracking.

    5-D tensors use ``(batch, channel, depth, height, width)`` order.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def astype(self, dtype) -> "Tensor":
        """Detached copy in another precision."""
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def sum(self) -> "Tensor":
        return sum(self)

    def mean(self) -> "Tensor":
        return mean(self)


class _Node:
    __slots__ = ("kind", "inputs", "output", "backward_fn")

    def __init__(self, kind: str, inputs: tuple[Tensor, ...], output: Tensor, backward_fn: BackwardFn):
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of differentiable ops.

    Nodes are appended in execution order, so reverse order is a valid
    topological order. A tape is consumed by :meth:`backward`; differentiating
    the same graph again raises until :meth:`reset`. Recording onto a consumed
    tape starts a fresh graph.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False
        self.enabled = True

    def __len__(self) -> int:
        return len(self.nodes)

    def reset(self) -> None:
        for node in self.nodes:
            node.output._node = None
        self.nodes = []
        self.consumed = False

    def record(self, kind: str, inputs: tuple[Tensor, ...], output: Tensor, backward_fn: BackwardFn) -> Tensor:
        if not self.enabled or not any(t.requires_grad for t in inputs):
            return output
        if self.consumed:
            # a new graph starts; the old one can no longer be differentiated
            self.reset()
        node = _Node(kind, inputs, output, backward_fn)
        output.requires_grad = True
        output._node = node
        self.nodes.append(node)
        return output

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if self.consumed:
            raise GraphError("backward() called twice without reset()")
        if loss._node is None or not any(n is loss._node for n in reversed(self.nodes)):
            raise GraphError("loss was not recorded on this tape (reset or never tracked)")
        seed = np.ones_like(loss.data)
        loss.grad = seed.copy()
        grads: dict[int, np.ndarray] = {id(loss): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.backward_fn(g)
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._node is None:
                    inp.grad = gi.astype(inp.dtype, copy=True) if inp.grad is None else inp.grad + gi
                else:
                    key = id(inp)
                    grads[key] = gi if key not in grads else grads[key] + gi
        self.consumed = True

    @contextlib.contextmanager
    def paused(self) -> Iterator[None]:
        prev = self.enabled
        self.enabled = False
        try:
            yield
        finally:
            self.enabled = prev


_default_tape = Tape()
_active: list[Tape] = [_default_tape]


def get_tape() -> Tape:
    """The tape ops currently record to."""
    return _active[-1]


@contextlib.contextmanager
def use_tape(tape: Tape) -> Iterator[Tape]:
    _active.append(tape)
    try:
        yield tape
    finally:
        _active.pop()


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    with get_tape().paused():
        yield


def _record(kind: str, inputs: tuple[Tensor, ...], out_data: np.ndarray, backward_fn: BackwardFn) -> Tensor:
    return get_tape().record(kind, inputs, Tensor(out_data), backward_fn)


# ---------------------------------------------------------------------------
# Deterministic initialization

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def splitmix64(seed: int, n: int) -> np.ndarray:
    """First ``n`` outputs of the splitmix64 generator started at ``seed``."""
    with np.errstate(over="ignore"):
        state = np.uint64(seed & _MASK64) + _GOLDEN * np.arange(1, n + 1, dtype=np.uint64)
        z = state
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))


def randn_tensor(shape: Sequence[int], seed: int, scale: float = 1.0, dtype=np.float32,
                 requires_grad: bool = False) -> Tensor:
    """Pseudo-normal tensor from splitmix64 uniforms via Box-Muller.

    The sequence depends only on ``seed`` and the element count, so the same
    seed yields the same buffer on every platform with IEEE doubles.
    """
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise ShapeError(f"all extents must be >= 1, got {shape}")
    n = int(np.prod(shape))
    pairs = (n + 1) // 2
    bits = splitmix64(seed, 2 * pairs) >> np.uint64(11)
    u = bits.astype(np.float64) * 2.0**-53
    u1 = 1.0 - u[0::2]  # (0, 1], keeps log finite
    u2 = u[1::2]
    r = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * np.pi * u2
    z = np.empty(2 * pairs)
    z[0::2] = r * np.cos(theta)
    z[1::2] = r * np.sin(theta)
    data = (z[:n] * scale).reshape(shape).astype(dtype)
    return Tensor(data, requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# Elementwise ops and reductions


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return _record("add_scalar", (a,), a.data + a.dtype.type(b), lambda g: (g,))
    _check_same(a, b, "add")
    return _record("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -b)
    _check_same(a, b, "sub")
    return _record("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, b)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _record("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def scale(a: Tensor, factor: float) -> Tensor:
    f = a.dtype.type(factor)
    return _record("scale", (a,), a.data * f, lambda g: (g * f,))


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors the numpy name
    if a.size == 0:
        raise ShapeError("sum of an empty tensor")
    total = np.asarray(np.sum(a.data, dtype=np.float64), dtype=a.dtype)
    shape = a.shape
    return _record("sum", (a,), total, lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a: Tensor) -> Tensor:
    if a.size == 0:
        raise ShapeError("mean of an empty tensor")
    n = a.size
    avg = np.asarray(np.sum(a.data, dtype=np.float64) / n, dtype=a.dtype)
    shape = a.shape
    return _record("mean", (a,), avg, lambda g: (np.full(shape, g / n, dtype=g.dtype),))


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    (tape or get_tape()).backward(loss)


# ---------------------------------------------------------------------------
# Finite-difference verification


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], epsilon: float = 1e-5,
               seed: int = 0) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn`` maps the input tensors to any-shaped output; it is reduced to a
    scalar by a fixed random projection so every output element is exercised.
    Inputs must be ``float64``. The error per element is
    ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if not 1e-6 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon must lie in [1e-6, 1e-3], got {epsilon}")
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError("grad_check needs float64 inputs")

    with no_grad():
        probe_shape = fn(*inputs).shape
    weights = randn_tensor(probe_shape or (1,), seed, dtype=np.float64).data.reshape(probe_shape)

    def objective() -> float:
        with no_grad():
            out = fn(*inputs).data
        val = float(np.sum(out * weights))
        if not np.isfinite(val):
            raise FloatingPointError("non-finite value during grad_check")
        return val

    for t in inputs:
        t.requires_grad = True
        t.grad = None
    tape = Tape()
    with use_tape(tape):
        out = fn(*inputs)
        loss = sum(mul(out, Tensor(weights)))
        tape.backward(loss)
    tape.reset()

    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = objective()
            flat[i] = orig - epsilon
            down = objective()
            flat[i] = orig
            numeric = (up - down) / (2 * epsilon)
            a = analytic.reshape(-1)[i]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
