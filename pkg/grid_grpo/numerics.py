"""Dense float64 tensors, a recording tape for reverse-mode gradients and seeded RNG streams."""

from __future__ import annotations

from contextlib import contextmanager
from contextvars import ContextVar
from typing import Callable, Iterator, Sequence

import numpy as np

VJP = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class NumericalError(FloatingPointError):
    """A computation produced NaN or Inf."""


_ACTIVE_TAPE: ContextVar["Tape | None"] = ContextVar("grid_grpo_active_tape", default=None)


class Tensor:
    """Row-major float64 array that can take part in a recorded computation."""

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data: object, requires_grad: bool = False) -> None:
        array = np.array(data, dtype=np.float64)
        _check_finite("tensor", array)
        self.data: np.ndarray = array
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None

    @classmethod
    def _wrap(cls, array: np.ndarray) -> "Tensor":
        tensor = cls.__new__(cls)
        tensor.data = array
        tensor.requires_grad = False
        tensor.grad = None
        tensor._tape = None
        return tensor

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other: object) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: object) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: object) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: object) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: object) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: object) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: object) -> "Tensor":
        return div(self, other)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


class _Node:
    __slots__ = ("name", "output", "inputs", "vjp")

    def __init__(self, name: str, output: Tensor, inputs: tuple[Tensor, ...], vjp: VJP) -> None:
        self.name = name
        self.output = output
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """Ordered record of primitive ops; gradients flow back in exact reverse order.

    Ops only record while the tape is active (``with Tape() as tape:``). A tape
    can run backward once; call :meth:`reset` before recording a new graph.
    """

    def __init__(self) -> None:
        self._nodes: list[_Node] = []
        self._leaves: dict[int, Tensor] = {}
        self._produced: set[int] = set()
        self._consumed = False
        self._tokens: list = []

    def __enter__(self) -> "Tape":
        self._tokens.append(_ACTIVE_TAPE.set(self))
        return self

    def __exit__(self, *exc: object) -> None:
        _ACTIVE_TAPE.reset(self._tokens.pop())

    def __len__(self) -> int:
        return len(self._nodes)

    @property
    def op_names(self) -> list[str]:
        return [node.name for node in self._nodes]

    def reset(self) -> None:
        self._nodes.clear()
        self._leaves.clear()
        self._produced.clear()
        self._consumed = False

    def _push(self, node: _Node) -> None:
        if self._consumed:
            raise RuntimeError("Tape already ran backward; call reset() before recording again")
        for tensor in node.inputs:
            if tensor.requires_grad and id(tensor) not in self._produced:
                self._leaves.setdefault(id(tensor), tensor)
        self._produced.add(id(node.output))
        node.output._tape = self
        self._nodes.append(node)

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Populate ``grad`` on every recorded leaf and return the leaf-to-gradient map."""
        if self._consumed:
            raise RuntimeError("backward() called twice on the same tape without reset()")
        if loss.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise ValueError("loss was not produced by ops recorded on this tape")
        self._consumed = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self._nodes):
            upstream = grads.pop(id(node.output), None)
            if upstream is None:
                continue
            for tensor, grad in zip(node.inputs, node.vjp(upstream)):
                if grad is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + grad
                else:
                    grads[key] = np.array(grad, dtype=np.float64)

        result: dict[Tensor, np.ndarray] = {}
        for key, leaf in self._leaves.items():
            grad = grads.get(key, np.zeros_like(leaf.data))
            leaf.grad = grad if leaf.grad is None else leaf.grad + grad
            result[leaf] = grad
        return result


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Run reverse-mode differentiation from a scalar produced through recorded ops."""
    if loss.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise ValueError("loss was not produced through recorded ops")
    return loss._tape.backward(loss)


def zero_grad(tensors: Sequence[Tensor]) -> None:
    for tensor in tensors:
        tensor.grad = None


@contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording: ops inside run eagerly even when a tape is active."""
    token = _ACTIVE_TAPE.set(None)
    try:
        yield
    finally:
        _ACTIVE_TAPE.reset(token)


def _check_finite(name: str, array: np.ndarray) -> None:
    if not np.all(np.isfinite(array)):
        raise NumericalError(f"{name} produced non-finite values")


def _as_tensor(value: object) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _record(name: str, out: np.ndarray, inputs: tuple[Tensor, ...], vjp: VJP) -> Tensor:
    _check_finite(name, out)
    result = Tensor._wrap(out)
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        tape._push(_Node(name, result, inputs, vjp))
    return result


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient back onto the leading-dimension-batched operand shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_batched(name: str, a: Tensor, b: Tensor) -> None:
    small, large = (a.shape, b.shape) if a.ndim <= b.ndim else (b.shape, a.shape)
    if not small or small == large[len(large) - len(small) :]:
        return
    if len(small) == len(large) and all(s == l or 1 in (s, l) for s, l in zip(small, large)):
        return
    raise ValueError(f"{name}: shapes {a.shape} and {b.shape} differ beyond leading-dimension batching")


# Primitive ops


def add(a: object, b: object) -> Tensor:
    x, y = _as_tensor(a), _as_tensor(b)
    _check_batched("add", x, y)
    return _record(
        "add",
        x.data + y.data,
        (x, y),
        lambda g: (_unbroadcast(g, x.shape), _unbroadcast(g, y.shape)),
    )


def sub(a: object, b: object) -> Tensor:
    x, y = _as_tensor(a), _as_tensor(b)
    _check_batched("sub", x, y)
    return _record(
        "sub",
        x.data - y.data,
        (x, y),
        lambda g: (_unbroadcast(g, x.shape), _unbroadcast(-g, y.shape)),
    )


def mul(a: object, b: object) -> Tensor:
    x, y = _as_tensor(a), _as_tensor(b)
    _check_batched("mul", x, y)
    return _record(
        "mul",
        x.data * y.data,
        (x, y),
        lambda g: (_unbroadcast(g * y.data, x.shape), _unbroadcast(g * x.data, y.shape)),
    )


def div(a: object, b: object) -> Tensor:
    x, y = _as_tensor(a), _as_tensor(b)
    _check_batched("div", x, y)
    with np.errstate(all="ignore"):
        out = x.data / y.data
    return _record(
        "div",
        out,
        (x, y),
        lambda g: (
            _unbroadcast(g / y.data, x.shape),
            _unbroadcast(-g * x.data / (y.data * y.data), y.shape),
        ),
    )


def neg(a: object) -> Tensor:
    x = _as_tensor(a)
    return _record("neg", -x.data, (x,), lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    x, y = _as_tensor(a), _as_tensor(b)
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {x.shape} @ {y.shape}")
    return _record("matmul", x.data @ y.data, (x, y), lambda g: (g @ y.data.T, x.data.T @ g))


def exp(a: object) -> Tensor:
    x = _as_tensor(a)
    with np.errstate(all="ignore"):
        out = np.exp(x.data)
    return _record("exp", out, (x,), lambda g: (g * out,))


def log(a: object) -> Tensor:
    x = _as_tensor(a)
    with np.errstate(all="ignore"):
        out = np.log(x.data)
    return _record("log", out, (x,), lambda g: (g / x.data,))


def tanh(a: object) -> Tensor:
    x = _as_tensor(a)
    out = np.tanh(x.data)
    return _record("tanh", out, (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: object) -> Tensor:
    x = _as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _record("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def sum(a: object, axis: int | None = None) -> Tensor:  # noqa: A001
    x = _as_tensor(a)

    def vjp(g: np.ndarray) -> tuple[np.ndarray]:
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _record("sum", np.sum(x.data, axis=axis), (x,), vjp)


def mean(a: object, axis: int | None = None) -> Tensor:
    x = _as_tensor(a)
    count = x.size if axis is None else x.shape[axis]
    return div(sum(x, axis=axis), float(count))


def square(a: object) -> Tensor:
    x = _as_tensor(a)
    return mul(x, x)


def softmax(logits: object, temperature: float = 1.0, axis: int = -1) -> Tensor:
    """Max-subtracted softmax of ``logits / temperature`` along ``axis``."""
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    x = _as_tensor(logits)
    z = x.data / temperature
    e = np.exp(z - np.max(z, axis=axis, keepdims=True))
    p = e / np.sum(e, axis=axis, keepdims=True)

    def vjp(g: np.ndarray) -> tuple[np.ndarray]:
        inner = np.sum(g * p, axis=axis, keepdims=True)
        return (p * (g - inner) / temperature,)

    return _record("softmax", p, (x,), vjp)


def log_softmax(logits: object, temperature: float = 1.0, axis: int = -1) -> Tensor:
    """Log-probabilities via max subtraction; never computed as log(softmax(.))."""
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    x = _as_tensor(logits)
    z = x.data / temperature
    shifted = z - np.max(z, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def vjp(g: np.ndarray) -> tuple[np.ndarray]:
        return ((g - p * np.sum(g, axis=axis, keepdims=True)) / temperature,)

    return _record("log_softmax", out, (x,), vjp)


def logsumexp(a: object, axis: int | None = None) -> Tensor:
    x = _as_tensor(a)
    peak = np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(x.data - peak)
    total = np.sum(e, axis=axis, keepdims=True)
    out = np.log(total) + peak
    p = e / total
    squeezed = out.reshape(()) if axis is None else np.squeeze(out, axis=axis)

    def vjp(g: np.ndarray) -> tuple[np.ndarray]:
        g = g if axis is None else np.expand_dims(g, axis)
        return (g * p,)

    return _record("logsumexp", squeezed, (x,), vjp)


def gather(a: object, index: np.ndarray) -> Tensor:
    """Pick ``a[..., index[...]]`` along the last axis."""
    x = _as_tensor(a)
    idx = np.asarray(index, dtype=np.int64)
    if idx.shape != x.shape[:-1]:
        raise ValueError(f"gather: index shape {idx.shape} does not match {x.shape[:-1]}")
    picked = np.take_along_axis(x.data, idx[..., None], axis=-1)[..., 0]

    def vjp(g: np.ndarray) -> tuple[np.ndarray]:
        grad = np.zeros_like(x.data)
        np.put_along_axis(grad, idx[..., None], g[..., None], axis=-1)
        return (grad,)

    return _record("gather", picked, (x,), vjp)


def take(table: object, index: np.ndarray) -> Tensor:
    """Row lookup ``table[index]`` with scatter-add gradients."""
    x = _as_tensor(table)
    idx = np.asarray(index, dtype=np.int64)

    def vjp(g: np.ndarray) -> tuple[np.ndarray]:
        grad = np.zeros_like(x.data)
        np.add.at(grad, idx, g)
        return (grad,)

    return _record("take", x.data[idx], (x,), vjp)


def clip(a: object, low: float, high: float) -> Tensor:
    if low > high:
        raise ValueError(f"clip: low {low} exceeds high {high}")
    x = _as_tensor(a)
    inside = (x.data >= low) & (x.data <= high)
    return _record("clip", np.clip(x.data, low, high), (x,), lambda g: (g * inside,))


def minimum(a: object, b: object) -> Tensor:
    """Elementwise minimum; ties route the gradient to ``a``."""
    x, y = _as_tensor(a), _as_tensor(b)
    if x.shape != y.shape:
        raise ValueError(f"minimum: shapes {x.shape} and {y.shape} differ")
    first = x.data <= y.data
    return _record(
        "minimum",
        np.where(first, x.data, y.data),
        (x, y),
        lambda g: (g * first, g * ~first),
    )


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    items = tuple(_as_tensor(t) for t in tensors)
    if not items:
        raise ValueError("stack needs at least one tensor")
    out = np.stack([t.data for t in items], axis=axis)

    def vjp(g: np.ndarray) -> list[np.ndarray]:
        return [np.take(g, i, axis=axis) for i in range(len(items))]

    return _record("stack", out, items, vjp)


def finite_diff_check(f: Callable[[Tensor], Tensor], x: object, h: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    A NaN or Inf value of ``f`` anywhere raises :class:`NumericalError`.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError(f"finite difference step must lie in [1e-7, 1e-3], got {h}")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    _check_finite("finite_diff_check input", base)

    with Tape() as tape:
        leaf = Tensor(base, requires_grad=True)
        out = f(leaf)
        _require_scalar(out)
        analytic = tape.backward(out)[leaf] if out.requires_grad else np.zeros_like(base)

    numeric = np.empty_like(base)
    for idx in np.ndindex(base.shape):
        plus = base.copy()
        minus = base.copy()
        plus[idx] += h
        minus[idx] -= h
        numeric[idx] = (_evaluate(f, plus) - _evaluate(f, minus)) / (2.0 * h)
    if base.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))))


def _require_scalar(out: Tensor) -> None:
    if out.size != 1:
        raise ValueError(f"checked function must return a scalar, got shape {out.shape}")


def _evaluate(f: Callable[[Tensor], Tensor], array: np.ndarray) -> float:
    out = f(Tensor(array))
    _require_scalar(out)
    value = out.item()
    if not np.isfinite(value):
        raise NumericalError("checked function returned a non-finite value")
    return value


class Rng:
    """Seeded PCG64 stream; identical seed and stream key give identical draws.

    ``child`` derives an independent stream through ``SeedSequence`` spawn keys,
    so consumers never share state.
    """

    def __init__(self, seed: int, stream: tuple[int, ...] = ()) -> None:
        if not 0 <= seed < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.stream = tuple(int(k) for k in stream)
        self.counter = 0
        sequence = np.random.SeedSequence(self.seed, spawn_key=self.stream)
        self._generator = np.random.Generator(np.random.PCG64(sequence))

    def child(self, *key: int) -> "Rng":
        return Rng(self.seed, self.stream + tuple(key))

    def _tick(self) -> np.random.Generator:
        self.counter += 1
        return self._generator

    def normal(self, shape: int | tuple[int, ...]) -> np.ndarray:
        return self._tick().standard_normal(shape)

    def uniform(self, shape: int | tuple[int, ...] | None = None) -> np.ndarray:
        return self._tick().random(shape)

    def integers(self, low: int, high: int, size: int | tuple[int, ...] | None = None) -> np.ndarray:
        return self._tick().integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._tick().permutation(n)

    def choice(self, n: int, size: int, replace: bool = True, p: np.ndarray | None = None) -> np.ndarray:
        return self._tick().choice(n, size=size, replace=replace, p=p)

    def categorical(self, probs: np.ndarray) -> np.ndarray:
        """One inverse-CDF draw per row of a ``[..., V]`` probability array."""
        cdf = np.cumsum(probs, axis=-1)
        u = self.uniform(probs.shape[:-1])[..., None] * cdf[..., -1:]
        picked = np.sum(cdf <= u, axis=-1)
        return np.minimum(picked, probs.shape[-1] - 1).astype(np.int64)

