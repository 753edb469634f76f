"""Reverse-mode automatic differentiation over dense float64 arrays.

Execution is eager: every operation computes its value immediately with
numpy and, while a :class:`Tape` is active in the current thread, records
a backward closure.  Gradients are obtained by walking the recorded nodes
in reverse creation order, which is already a topological order.

Outside an active tape the same functions are plain numpy math and record
nothing, so inference shares one code path with training.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "NoiseStream",
    "Parameter",
    "Tape",
    "Tensor",
    "add",
    "concat_cols",
    "cross_entropy",
    "cross_entropy_batch",
    "div",
    "exp",
    "gradient_reversal",
    "gumbel_softmax_parts",
    "gumbel_softmax_st",
    "l2_normalize_rows",
    "linear",
    "matmul",
    "mean_pool_time",
    "mul",
    "neg",
    "relu",
    "reshape",
    "segment_mean",
    "sgd_step",
    "softmax",
    "sqrt",
    "stack_rows",
    "sub",
    "sum_all",
    "sum_axis",
    "take_rows",
    "transpose",
    "xlogx",
]

_LOCAL = threading.local()


def _active_tape() -> "Tape | None":
    return getattr(_LOCAL, "tape", None)


class Tensor:
    """A dense float64 array plus an optional gradient of the same shape."""

    __slots__ = ("data", "grad", "_parents", "_vjp")

    def __init__(
        self,
        data,
        _parents: tuple = (),
        _vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._vjp = _vjp

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape})"

    # arithmetic sugar; the module-level functions do the real work
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """A trainable leaf tensor with a persistent, accumulating gradient.

    Frozen parameters still take part in the forward pass and may receive
    gradient, but :func:`sgd_step` never updates them.
    """

    __slots__ = ("frozen", "velocity")

    def __init__(self, data, frozen: bool = False):
        super().__init__(data)
        self.grad = np.zeros_like(self.data)
        self.frozen = bool(frozen)
        self.velocity = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter(shape={self.data.shape}, frozen={self.frozen})"


class Tape:
    """Single-use recording of one forward pass.

    Nodes are stored in creation order; each node's parents necessarily
    precede it, so the reversed list is a valid backward schedule.  A tape
    is confined to one thread; distinct threads may run distinct tapes
    concurrently.
    """

    def __init__(self):
        self._nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        if _active_tape() is not None:
            raise RuntimeError("a tape is already active in this thread")
        _LOCAL.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _LOCAL.tape = None

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(node) into .grad for every tensor reachable
        from ``loss``.  ``loss`` must be scalar-shaped."""
        if loss.data.size != 1:
            raise ValueError(f"backward root must be scalar, got shape {loss.data.shape}")
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self._nodes):
            if node.grad is None or node._vjp is None:
                continue
            grads = node._vjp(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None:
                    continue
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad = parent.grad + g


def _coerce(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _make(data: np.ndarray, parents: tuple, vjp) -> Tensor:
    tape = _active_tape()
    if tape is None:
        return Tensor(data)
    out = Tensor(data, parents, vjp)
    tape._nodes.append(out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape)) if sd == 1 and gd != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic (numpy broadcasting rules)


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = a.data + b.data
    return _make(out, (a, b), lambda u: (_unbroadcast(u, a.data.shape), _unbroadcast(u, b.data.shape)))


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = a.data - b.data
    return _make(out, (a, b), lambda u: (_unbroadcast(u, a.data.shape), _unbroadcast(-u, b.data.shape)))


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = a.data * b.data
    return _make(
        out,
        (a, b),
        lambda u: (_unbroadcast(u * b.data, a.data.shape), _unbroadcast(u * a.data, b.data.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = a.data / b.data
    return _make(
        out,
        (a, b),
        lambda u: (
            _unbroadcast(u / b.data, a.data.shape),
            _unbroadcast(-u * a.data / (b.data * b.data), b.data.shape),
        ),
    )


def neg(a) -> Tensor:
    a = _coerce(a)
    return _make(-a.data, (a,), lambda u: (-u,))


def exp(a) -> Tensor:
    a = _coerce(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda u: (u * out,))


def sqrt(a) -> Tensor:
    """Square root with subgradient 0 at the origin (keeps composed losses
    finite when an argument touches zero exactly)."""
    a = _coerce(a)
    out = np.sqrt(a.data)
    safe = np.where(a.data > 0.0, 0.5 / np.where(a.data > 0.0, out, 1.0), 0.0)
    return _make(out, (a,), lambda u: (u * safe,))


def xlogx(a) -> Tensor:
    """x * ln(x) extended continuously by 0 at x = 0."""
    a = _coerce(a)
    pos = a.data > 0.0
    safe = np.where(pos, a.data, 1.0)
    out = np.where(pos, a.data * np.log(safe), 0.0)
    dlog = np.where(pos, np.log(safe) + 1.0, 0.0)
    return _make(out, (a,), lambda u: (u * dlog,))


def relu(a) -> Tensor:
    a = _coerce(a)
    mask = a.data > 0.0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda u: (u * mask,))


# ---------------------------------------------------------------------------
# shape and reduction ops


def sum_all(a) -> Tensor:
    a = _coerce(a)
    out = np.asarray(a.data.sum())
    return _make(out, (a,), lambda u: (np.broadcast_to(u, a.data.shape).copy(),))


def sum_axis(a, axis: int, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(u):
        g = u if keepdims else np.expand_dims(u, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _make(out, (a,), vjp)


def mean_pool_time(a) -> Tensor:
    """Average a (frames, features) matrix over the frame axis."""
    a = _coerce(a)
    if a.data.ndim != 2:
        raise ValueError(f"expected a 2-d (frames, features) tensor, got shape {a.data.shape}")
    n = a.data.shape[0]
    if n == 0:
        raise ValueError("empty sequence")
    out = a.data.mean(axis=0)
    return _make(out, (a,), lambda u: (np.broadcast_to(u / n, a.data.shape).copy(),))


def segment_mean(a, segment_length: int) -> Tensor:
    """Mean-pool consecutive row blocks: (k*s, d) -> (k, d)."""
    a = _coerce(a)
    rows, d = a.data.shape
    s = int(segment_length)
    if s < 1 or rows % s != 0:
        raise ValueError(f"cannot pool {rows} rows into segments of {s}")
    out = a.data.reshape(-1, s, d).mean(axis=1)

    def vjp(u):
        return (np.repeat(u / s, s, axis=0),)

    return _make(out, (a,), vjp)


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = _coerce(a)
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda u: (u.reshape(a.data.shape),))


def transpose(a) -> Tensor:
    a = _coerce(a)
    return _make(a.data.T.copy(), (a,), lambda u: (u.T.copy(),))


def matmul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul expects 2-d operands, got {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data
    return _make(out, (a, b), lambda u: (u @ b.data.T, a.data.T @ u))


def take_rows(a, indices) -> Tensor:
    a = _coerce(a)
    idx = np.asarray(indices, dtype=np.intp)
    out = a.data[idx]

    def vjp(u):
        g = np.zeros_like(a.data)
        np.add.at(g, idx, u)
        return (g,)

    return _make(out, (a,), vjp)


def concat_cols(parts: Iterable) -> Tensor:
    parts = [_coerce(p) for p in parts]
    widths = [p.data.shape[1] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=1)

    def vjp(u):
        grads, at = [], 0
        for w in widths:
            grads.append(u[:, at : at + w])
            at += w
        return grads

    return _make(out, tuple(parts), vjp)


def stack_rows(parts: Iterable) -> Tensor:
    parts = [_coerce(p) for p in parts]
    out = np.stack([p.data for p in parts], axis=0)

    def vjp(u):
        return [u[i] for i in range(len(parts))]

    return _make(out, tuple(parts), vjp)


# ---------------------------------------------------------------------------
# neural-net ops


def linear(x, weight, bias) -> Tensor:
    """y = x @ weight + bias for x of shape (n, in)."""
    x, weight, bias = _coerce(x), _coerce(weight), _coerce(bias)
    if (
        x.data.ndim != 2
        or weight.data.ndim != 2
        or x.data.shape[1] != weight.data.shape[0]
        or bias.data.shape != (weight.data.shape[1],)
    ):
        raise ValueError(
            f"linear shape mismatch: x {x.data.shape}, weight {weight.data.shape}, bias {bias.data.shape}"
        )
    out = x.data @ weight.data + bias.data
    return _make(out, (x, weight, bias), lambda u: (u @ weight.data.T, x.data.T @ u, u.sum(axis=0)))


def softmax(a) -> Tensor:
    """Row-wise softmax over the last axis (shift-stabilized)."""
    a = _coerce(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(u):
        dot = (u * out).sum(axis=-1, keepdims=True)
        return (out * (u - dot),)

    return _make(out, (a,), vjp)


def _log_softmax(data: np.ndarray) -> np.ndarray:
    shifted = data - data.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(logits, label: int) -> Tensor:
    """Negative log-softmax probability of ``label`` (log-sum-exp stabilized)."""
    logits = _coerce(logits)
    if logits.data.ndim != 1:
        raise ValueError(f"expected 1-d logits, got shape {logits.data.shape}")
    n = logits.data.shape[0]
    label = int(label)
    if not 0 <= label < n:
        raise ValueError(f"label {label} out of range for {n} classes")
    logp = _log_softmax(logits.data)
    out = np.asarray(-logp[label])

    def vjp(u):
        g = np.exp(logp)
        g[label] -= 1.0
        return (g * u,)

    return _make(out, (logits,), vjp)


def cross_entropy_batch(logits, labels, reduction: str = "mean") -> Tensor:
    """Cross-entropy of (n, classes) logits against integer labels."""
    logits = _coerce(logits)
    labels = np.asarray(labels, dtype=np.intp)
    if logits.data.ndim != 2 or labels.shape != (logits.data.shape[0],):
        raise ValueError(f"bad shapes: logits {logits.data.shape}, labels {labels.shape}")
    n, c = logits.data.shape
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels out of range for {c} classes")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    logp = _log_softmax(logits.data)
    per_row = -logp[np.arange(n), labels]
    out = np.asarray(per_row.mean() if reduction == "mean" else per_row.sum())

    def vjp(u):
        g = np.exp(logp)
        g[np.arange(n), labels] -= 1.0
        if reduction == "mean":
            g /= n
        return (g * u,)

    return _make(out, (logits,), vjp)


def l2_normalize_rows(a) -> Tensor:
    """Scale a vector, or each row of a matrix, to unit Euclidean norm."""
    a = _coerce(a)
    if a.data.ndim == 1:
        norm = np.linalg.norm(a.data)
        if norm == 0.0:
            raise ValueError("degenerate norm: zero vector")
        out = a.data / norm

        def vjp1(u):
            return ((u - out * (out @ u)) / norm,)

        return _make(out, (a,), vjp1)
    if a.data.ndim != 2:
        raise ValueError(f"expected 1-d or 2-d input, got shape {a.data.shape}")
    norms = np.linalg.norm(a.data, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("degenerate norm: zero row")
    out = a.data / norms

    def vjp2(u):
        dot = (u * out).sum(axis=1, keepdims=True)
        return ((u - out * dot) / norms,)

    return _make(out, (a,), vjp2)


def gradient_reversal(x, scale: float = 1.0) -> Tensor:
    """Identity in the forward pass; multiplies the upstream gradient by
    ``-scale`` in the backward pass."""
    x = _coerce(x)
    s = float(scale)
    return _make(x.data.copy(), (x,), lambda u: (u * (-s),))


# ---------------------------------------------------------------------------
# stochastic ops


class NoiseStream:
    """Counter-based Gumbel noise source: draw k is a pure function of
    (seed, k), so rebuilding a stream with the same seed replays the exact
    noise sequence (this is what makes frozen-noise gradient checks work)."""

    def __init__(self, seed: int):
        self._key = int(seed) & ((1 << 63) - 1)
        self._counter = 0

    def gumbel(self, shape: tuple[int, ...]) -> np.ndarray:
        rng = np.random.Generator(np.random.Philox(key=(self._key << 64) + self._counter))
        self._counter += 1
        return rng.gumbel(size=shape)


def gumbel_softmax_parts(logits, temperature: float, stream: NoiseStream) -> tuple[Tensor, Tensor]:
    """One Gumbel-softmax draw per row of ``logits``.

    Returns ``(hard, soft)``: ``hard`` is one-hot over the winners of the
    noised logits, with the straight-through backward (its gradient passes
    unchanged to ``soft``); ``soft`` is the tempered softmax of the noised
    logits.
    """
    logits = _coerce(logits)
    t = float(temperature)
    if t <= 0.0:
        raise ValueError(f"temperature must be positive, got {t}")
    noise = stream.gumbel(logits.data.shape)
    noised = logits.data + noise
    soft_data = np.exp(_log_softmax(noised / t))

    def soft_vjp(u):
        dot = (u * soft_data).sum(axis=-1, keepdims=True)
        return (soft_data * (u - dot) / t,)

    soft = _make(soft_data, (logits,), soft_vjp)

    winners = noised.argmax(axis=-1)
    hard_data = np.zeros_like(soft_data)
    np.put_along_axis(hard_data, np.expand_dims(winners, -1), 1.0, axis=-1)
    hard = _make(hard_data, (soft,), lambda u: (u,))
    return hard, soft


def gumbel_softmax_st(logits, temperature: float, stream: NoiseStream) -> Tensor:
    """Straight-through Gumbel-softmax: one-hot forward, tempered-softmax
    gradient at the same noise realization."""
    hard, _ = gumbel_softmax_parts(logits, temperature, stream)
    return hard


# ---------------------------------------------------------------------------
# optimizer


def sgd_step(params: Iterable[Parameter], learning_rate: float, momentum: float = 0.0) -> None:
    """Classic momentum update; frozen parameters are left untouched.
    All gradients (frozen ones included) are zeroed afterward."""
    lr = float(learning_rate)
    mu = float(momentum)
    for p in params:
        if not p.frozen:
            p.velocity = mu * p.velocity + p.grad
            p.data = p.data - lr * p.velocity
        p.zero_grad()
