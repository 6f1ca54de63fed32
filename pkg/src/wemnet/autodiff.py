"""Tape-based reverse-mode autodiff over dense 2-D float64 matrices.

Every op records its output, inputs and a backward rule on the thread's
active :class:`Tape`. :func:`backward` replays those rules in reverse
recording order. Only leaves (tensors created directly with
``requires_grad=True``) keep a ``.grad``; intermediate gradients live in a
scratch dict for the duration of one backward pass.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class ValidationError(ValueError):
    """Raised when an input violates an op's value contract."""


class Tensor:
    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise DimensionError(f"Tensor must be 2-D, got shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.is_leaf = True

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        if self.shape != (1, 1):
            raise DimensionError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, retain_tape: bool = False) -> None:
        backward(self, retain_tape=retain_tape)

    def __add__(self, other):
        return add(self, _as_tensor(other, self.shape))

    def __radd__(self, other):
        return add(_as_tensor(other, self.shape), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.shape))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.shape), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"


def _as_tensor(x, like_shape=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if like_shape is not None and np.ndim(x) == 0:
        return Tensor(np.full(like_shape, float(x)))
    return Tensor(x)


@dataclass
class _Record:
    out: Tensor
    inputs: tuple[Tensor, ...]
    rule: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered log of differentiable operations for one thread."""

    def __init__(self) -> None:
        self.records: list[_Record] = []
        self.enabled = True

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], rule) -> None:
        self.records.append(_Record(out, inputs, rule))

    def clear(self) -> None:
        self.records.clear()

    def __len__(self) -> int:
        return len(self.records)


_local = threading.local()


def get_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable recording on this thread's tape inside the block."""
    tape = get_tape()
    prev = tape.enabled
    tape.enabled = False
    try:
        yield
    finally:
        tape.enabled = prev


def _result(data: np.ndarray, inputs: tuple[Tensor, ...], rule) -> Tensor:
    tape = get_tape()
    track = tape.enabled and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = track
    out.is_leaf = not track
    if track:
        tape.record(out, inputs, rule)
    return out


def backward(loss: Tensor, retain_tape: bool = False) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    The tape is cleared afterwards unless ``retain_tape`` is set.
    """
    if loss.shape != (1, 1):
        raise DimensionError(f"backward() needs a scalar 1x1 loss, got {loss.shape}")
    if not loss.requires_grad:
        raise ValidationError("loss does not require grad (nothing on the tape)")
    tape = get_tape()
    seed = np.ones((1, 1))
    if loss.is_leaf:
        _accumulate(loss, seed)
        return
    pending: dict[int, np.ndarray] = {id(loss): seed}
    for rec in reversed(tape.records):
        g = pending.pop(id(rec.out), None)
        if g is None:
            continue
        for inp, ig in zip(rec.inputs, rec.rule(g)):
            if ig is None or not inp.requires_grad:
                continue
            if inp.is_leaf:
                _accumulate(inp, ig)
            else:
                key = id(inp)
                prev = pending.get(key)
                pending[key] = ig if prev is None else prev + ig
    if not retain_tape:
        tape.clear()


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=np.float64)
    if g.shape != t.shape:
        raise DimensionError(f"gradient shape {g.shape} does not match tensor {t.shape}")
    t.grad = g.copy() if t.grad is None else t.grad + g


# ---------------------------------------------------------------------------
# shape helpers


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, int]:
    if a.shape == b.shape:
        return a.shape
    (ra, ca), (rb, cb) = a.shape, b.shape
    if ca == cb and (ra == 1 or rb == 1):
        return (max(ra, rb), ca)
    raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.sum(axis=0, keepdims=True)


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "add")
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "sub")
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "mul")
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(x.data * c, (x,), lambda g: (g * c,))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _result(s, (x,), lambda g: (g * s * (1.0 - s),))


def relu(x: Tensor) -> Tensor:
    live = x.data > 0
    return _result(np.where(live, x.data, 0.0), (x,), lambda g: (g * live,))


def absolute(x: Tensor) -> Tensor:
    sign = np.sign(x.data)
    return _result(np.abs(x.data), (x,), lambda g: (g * sign,))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "sigmoid": sigmoid,
    "relu": relu,
    "abs": absolute,
    "scale": scale,
}


def elementwise(op: str, *args):
    """Dispatch an elementwise op by name (``add``, ``sigmoid``, ...)."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# ---------------------------------------------------------------------------
# structural


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions differ for {a.shape} @ {b.shape}")
    return _result(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(x: Tensor) -> Tensor:
    return _result(x.data.T.copy(), (x,), lambda g: (g.T,))


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[1]:
        raise DimensionError(f"concat_rows: column mismatch {a.shape} vs {b.shape}")
    n = a.shape[0]
    return _result(np.vstack([a.data, b.data]), (a, b), lambda g: (g[:n], g[n:]))


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    def rule(g):
        full = np.zeros_like(x.data)
        full[start:stop] = g
        return (full,)

    return _result(x.data[start:stop].copy(), (x,), rule)


def sum_all(x: Tensor) -> Tensor:
    return _result(np.array([[x.data.sum()]]), (x,), lambda g: (np.full(x.shape, g[0, 0]),))


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    return _result(
        np.array([[x.data.mean()]]), (x,), lambda g: (np.full(x.shape, g[0, 0] / n),)
    )


def grad_reverse(x: Tensor, lam: float = 1.0) -> Tensor:
    """Identity forward; backward multiplies the upstream gradient by ``-lam``."""
    if lam < 0:
        raise ValueError(f"grad_reverse lambda must be >= 0, got {lam}")
    factor = -float(lam)
    return _result(x.data.copy(), (x,), lambda g: (g * factor,))


def stop_gradient(x: Tensor) -> Tensor:
    return Tensor(x.data.copy(), requires_grad=False)


# ---------------------------------------------------------------------------
# probabilities and losses


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows(x: Tensor) -> Tensor:
    if x.shape[1] < 2:
        raise DimensionError(f"softmax_rows needs at least 2 columns, got {x.shape}")
    s = _softmax(x.data)

    def rule(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _result(s, (x,), rule)


def _check_one_hot(y: np.ndarray) -> None:
    ok = ((y == 0) | (y == 1)).all(axis=1) & (y.sum(axis=1) == 1)
    if not ok.all():
        bad = int(np.flatnonzero(~ok)[0])
        raise ValidationError(f"label row {bad} is not one-hot: {y[bad].tolist()}")


def cross_entropy(logits: Tensor, one_hot: Tensor) -> Tensor:
    """Batch-mean softmax cross-entropy computed in log space."""
    if logits.shape != one_hot.shape:
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs labels {one_hot.shape}")
    y = one_hot.data
    _check_one_hot(y)
    b = logits.shape[0]
    logp = _log_softmax(logits.data)
    loss = -(y * logp).sum() / b

    def rule(g):
        return (g[0, 0] * (np.exp(logp) - y) / b, None)

    return _result(np.array([[loss]]), (logits, one_hot), rule)


def _check_binary(d: np.ndarray) -> None:
    if not np.all((d == 0) | (d == 1)):
        raise ValidationError("domain labels must be 0 or 1")


def binary_cross_entropy_with_logits(logits: Tensor, labels: Tensor) -> Tensor:
    """Mean of -[d log s + (1-d) log(1-s)] with s = sigmoid(logits)."""
    if logits.shape != labels.shape or logits.shape[1] != 1:
        raise DimensionError(f"bce: expected matching b x 1 shapes, got {logits.shape}, {labels.shape}")
    d = labels.data
    _check_binary(d)
    z = logits.data
    n = z.shape[0]
    loss = (np.maximum(z, 0.0) - z * d + np.log1p(np.exp(-np.abs(z)))).mean()
    s = _sigmoid(z)
    return _result(np.array([[loss]]), (logits, labels), lambda g: (g[0, 0] * (s - d) / n, None))


def binary_cross_entropy(scores: Tensor, labels: Tensor) -> Tensor:
    """BCE on probabilities; routed through the logit form for stability."""
    s = scores.data
    if not np.all((s > 0) & (s < 1)):
        raise ValidationError("scores must lie strictly inside (0, 1)")
    z = np.log(s) - np.log1p(-s)
    inner = binary_cross_entropy_with_logits(Tensor(z), labels)
    n = s.shape[0]
    d = labels.data
    return _result(
        inner.data, (scores, labels), lambda g: (g[0, 0] * (s - d) / (s * (1.0 - s)) / n, None)
    )


# ---------------------------------------------------------------------------
# verification


def relative_error(a: np.ndarray, n: np.ndarray) -> float:
    """max |a - n| / max(|a|, |n|, 1e-8) over all entries."""
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    return float((np.abs(a - n) / denom).max())


def numerical_grad(f: Callable[[], Tensor], x: Tensor, step: float) -> np.ndarray:
    """Central differences of a zero-argument scalar function w.r.t. ``x.data``."""
    num = np.zeros_like(x.data)
    with no_grad():
        for idx in np.ndindex(*x.shape):
            orig = x.data[idx]
            x.data[idx] = orig + step
            fp = f().item()
            x.data[idx] = orig - step
            fm = f().item()
            x.data[idx] = orig
            num[idx] = (fp - fm) / (2.0 * step)
    return num


def finite_difference_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5) -> float:
    """Max relative error between the tape gradient of ``f`` at ``x`` and central differences."""
    if not 1e-7 <= step <= 1e-3:
        raise ValueError(f"step must be in [1e-7, 1e-3], got {step}")
    x.requires_grad = True
    x.grad = None
    get_tape().clear()
    backward(f(x))
    analytic = x.grad.copy()
    x.grad = None
    numeric = numerical_grad(lambda: f(x), x, step)
    return relative_error(analytic, numeric)


def gradcheck_parameters(
    loss_fn: Callable[[], Tensor], params: dict[str, Tensor], step: float = 1e-5
) -> dict[str, float]:
    """Per-parameter max relative error of tape gradients against central differences."""
    if not 1e-7 <= step <= 1e-3:
        raise ValueError(f"step must be in [1e-7, 1e-3], got {step}")
    for p in params.values():
        p.grad = None
    get_tape().clear()
    backward(loss_fn())
    errors = {}
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = numerical_grad(loss_fn, p, step)
        errors[name] = relative_error(analytic, numeric)
        p.grad = None
    return errors
