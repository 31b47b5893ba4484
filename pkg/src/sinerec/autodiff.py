"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Operations are recorded on the active :class:`Tape` (define-by-run) and
replayed in reverse by :meth:`Tape.backward`. When no tape is active, the
operations simply compute values, which is what inference paths rely on.

Only the operations the recommender needs are provided. Binary operations
accept equal shapes or one-sided broadcasting (the smaller operand broadcasts
into the larger one's shape); anything else is rejected.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "TapeError",
    "constant",
    "parameter",
    "add",
    "sub",
    "hadamard",
    "scale",
    "tanh",
    "sigmoid",
    "elementwise",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "take",
    "gather_rows",
    "sum",
    "mean",
    "softmax_rows",
    "log_softmax_rows",
    "layer_norm",
    "backward",
    "grad_check",
]


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


_state = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """Dense float64 array that may take part in a recorded computation."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = np.zeros_like(self.data) if requires_grad else None
        self.name = name
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        """Row-major flat view of the data."""
        return self.data.reshape(-1)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return hadamard(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self):
        return transpose(self)


def constant(data) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


class _Node:
    __slots__ = ("inputs", "output", "rule")

    def __init__(self, inputs, output, rule):
        self.inputs = inputs
        self.output = output
        self.rule = rule


class Tape:
    """Ordered record of operations; use as a context manager.

    >>> with Tape() as tape:
    ...     loss = sum(x * y)
    >>> tape.backward(loss)
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        if not hasattr(_state, "stack"):
            _state.stack = []
        _state.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.remove(self)

    def _record(self, inputs: Sequence[Tensor], output: Tensor, rule: Callable) -> None:
        output._tape = self
        self.nodes.append(_Node(tuple(inputs), output, rule))

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self._consumed:
            raise TapeError("tape already consumed by backward(); record a new forward pass")
        if loss._tape is not self:
            raise TapeError("loss was not recorded on this tape")
        self._consumed = True
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            g = node.output.grad
            if g is None:
                continue
            grads = node.rule(g)
            for inp, gi in zip(node.inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.grad is None:
                    inp.grad = np.array(gi, dtype=float, copy=True).reshape(inp.shape)
                else:
                    inp.grad += gi
        # drop the node list so recorded tensors are freed without waiting on the cycle collector
        self.nodes = []


def backward(loss: Tensor) -> None:
    """Back-propagate from a scalar loss through the tape that produced it."""
    if loss._tape is None:
        raise TapeError("loss is not attached to a tape (was the forward pass run inside `with Tape()`?)")
    loss._tape.backward(loss)


def _result(data: np.ndarray, inputs: Sequence[Tensor], rule: Callable) -> Tensor:
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = needs
    out.grad = None
    out.name = None
    out._tape = None
    if needs:
        tape._record(inputs, out, rule)
    return out


# -- broadcasting -------------------------------------------------------------


def _broadcast_shape(a: tuple, b: tuple, op: str) -> tuple:
    if a == b:
        return a
    try:
        out = np.broadcast_shapes(a, b)
    except ValueError:
        out = None
    if out is None or (out != a and out != b):
        raise ShapeError(f"{op}: incompatible shapes {a} and {b}")
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise --------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape(a.shape, b.shape, "add")
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape(a.shape, b.shape, "sub")
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def hadamard(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape(a.shape, b.shape, "hadamard")
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(x: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return _result(x.data * factor, (x,), lambda g: (g * factor,))


def _tanh_grad(out: np.ndarray, g: np.ndarray) -> np.ndarray:
    return g * (1.0 - out * out)


def _sigmoid_grad(out: np.ndarray, g: np.ndarray) -> np.ndarray:
    return g * out * (1.0 - out)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _result(out, (x,), lambda g: (_tanh_grad(out, g),))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _result(out, (x,), lambda g: (_sigmoid_grad(out, g),))


_ELEMENTWISE = {"tanh": tanh, "sigmoid": sigmoid, "add": add, "hadamard": hadamard, "scale": scale}


def elementwise(kind: str, *args) -> Tensor:
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}; expected one of {sorted(_ELEMENTWISE)}") from None
    return fn(*args)


# -- linear algebra and shape ops ----------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batch semantics over leading axes."""
    a, b = constant(a), constant(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}") from exc

    def rule(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                # fold the batch axes into one product instead of summing per-batch products
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _result(out, (a, b), rule)


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    return _result(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(x: Tensor, shape) -> Tensor:
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [constant(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def take(x: Tensor, index) -> Tensor:
    """numpy-style indexing; repeated fancy indices accumulate on backward."""
    out = x.data[index]

    def rule(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return _result(np.array(out, dtype=np.float64), (x,), rule)


def gather_rows(x: Tensor, idx) -> Tensor:
    """Rows of ``x`` at ``idx`` (any integer shape); gradients scatter back."""
    idx = np.asarray(idx)
    if idx.dtype.kind not in "iu":
        raise IndexError(f"gather_rows needs integer indices, got dtype {idx.dtype}")
    m = x.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= m):
        raise IndexError(f"gather_rows: index out of range for {m} rows")
    out = x.data[idx]

    def rule(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _result(out, (x,), rule)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(out, dtype=np.float64), (x,), rule)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


# -- normalisation --------------------------------------------------------------


def _masked_logits(x: np.ndarray, mask) -> np.ndarray:
    if mask is None:
        return x
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    if not mask.any(axis=-1).all():
        raise ValueError("softmax row with every position masked")
    return np.where(mask, x, -np.inf)


def softmax_rows(x: Tensor, temperature: float = 1.0, mask=None) -> Tensor:
    """Softmax over the last axis; masked positions get exactly zero weight."""
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = _masked_logits(x.data, mask)
    z = (z - z.max(axis=-1, keepdims=True)) / temperature
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot) / temperature,)

    return _result(out, (x,), rule)


def log_softmax_rows(x: Tensor, mask=None) -> Tensor:
    z = _masked_logits(x.data, mask)
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def rule(g):
        g = np.where(np.isfinite(out), g, 0.0)
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _result(out, (x,), rule)


def layer_norm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None,
               eps: float = 1e-8) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then gain and bias.

    ``gain``/``bias`` of ``None`` means the pure normalisation (unit gain, zero
    bias) with nothing to learn.
    """
    if gain is not None and gain.shape != x.shape[-1:]:
        raise ShapeError(f"layer_norm: gain shape {gain.shape} vs input {x.shape}")
    if bias is not None and bias.shape != x.shape[-1:]:
        raise ShapeError(f"layer_norm: bias shape {bias.shape} vs input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat
    if gain is not None:
        out = out * gain.data
    if bias is not None:
        out = out + bias.data
    inputs = [x] + [t for t in (gain, bias) if t is not None]

    def rule(g):
        gh = g * gain.data if gain is not None else g
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        grads = [gx]
        lead = tuple(range(x.ndim - 1))
        if gain is not None:
            grads.append((g * xhat).sum(axis=lead))
        if bias is not None:
            grads.append(g.sum(axis=lead))
        return grads

    return _result(out, inputs, rule)


# -- gradient checking --------------------------------------------------------------


def grad_check(f: Callable[[], Tensor], params: dict[str, Tensor] | Iterable[Tensor],
               step: float = 1e-5, floor: float = 1e-3, atol: float = 1e-6) -> dict[str, float]:
    """Worst relative error between analytic and central-difference gradients.

    ``f`` re-runs the forward pass from the current parameter values and
    returns a scalar tensor. Each entry's error is
    ``|a - n| / max(|a|, |n|, floor * scale, atol)`` where ``scale`` is the
    parameter's largest gradient entry; the floors keep near-zero entries
    from dominating through round-off.
    """
    if not isinstance(params, dict):
        params = {p.name or f"param{i}": p for i, p in enumerate(params)}
    for p in params.values():
        p.zero_grad()
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    analytic = {k: p.grad.copy() for k, p in params.items()}

    report = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = f().item()
            flat[i] = orig - step
            lo = f().item()
            flat[i] = orig
            numeric[i] = (hi - lo) / (2 * step)
        a = analytic[name].reshape(-1)
        scale_ = max(np.abs(numeric).max(initial=0.0), np.abs(a).max(initial=0.0))
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), max(floor * scale_, atol))
        report[name] = float((np.abs(a - numeric) / denom).max(initial=0.0))
    return report
