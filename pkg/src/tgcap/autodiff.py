"""Dense float64 tensors with tape-based reverse-mode differentiation, plus Adam.

Operations record onto the innermost active :class:`Tape`. With no tape
active they just compute values, which is what inference uses.

    with Tape() as tape:
        loss = model_loss(...)
    tape.backward(loss)
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit


class NonFiniteError(FloatingPointError):
    """A forward value or gradient became NaN or infinite."""


class ShapeError(ValueError):
    pass


_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of executed ops; backward replays it in reverse."""

    def __init__(self):
        self.nodes: list[tuple["Tensor", Callable[[np.ndarray], None]]] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.pop()

    def backward(self, loss: "Tensor") -> None:
        if loss.value.size != 1:
            raise ShapeError("backward needs a scalar loss")
        loss.grad = np.ones_like(loss.value)
        touched = []
        # overflow is reported below as NonFiniteError rather than as a numpy warning
        with np.errstate(over="ignore", invalid="ignore"):
            for out, fn in reversed(self.nodes):
                if out.grad is not None:
                    fn(out.grad)
                    touched.append(out)
        for t in touched:
            for parent in t._parents:
                if parent.grad is not None and not _check_finite(parent.grad):
                    raise NonFiniteError(f"non-finite gradient reaching {parent.name or 'tensor'}")


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


class Tensor:
    __array_priority__ = 100

    def __init__(self, value, requires_grad: bool = False, name: str = ""):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple = ()

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Tensor({self.name or ''} shape={self.shape})"

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(other, mul(self, -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = _unbroadcast(g, t.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


def _check_finite(value: np.ndarray) -> bool:
    # one reduction; a non-finite sum is rechecked elementwise in case it merely overflowed
    return bool(np.isfinite(value.sum())) or bool(np.isfinite(value).all())


def _result(value: np.ndarray, parents: Sequence[Tensor], backward: Callable[[np.ndarray], None],
            op: str) -> Tensor:
    if not _check_finite(value):
        raise NonFiniteError(f"non-finite output from {op}")
    tape = active_tape()
    needs = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(value, requires_grad=needs, name=op)
    if needs:
        out._parents = tuple(parents)
        tape.nodes.append((out, backward))
    return out


# -- primitives --------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        value = a.value + b.value
    except ValueError as exc:
        raise ShapeError(f"add: {a.shape} vs {b.shape}") from exc

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, g)
    return _result(value, (a, b), backward, "add")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        value = a.value * b.value
    except ValueError as exc:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}") from exc

    def backward(g):
        _accumulate(a, g * b.value)
        _accumulate(b, g * a.value)
    return _result(value, (a, b), backward, "mul")


def matmul(a, b) -> Tensor:
    """np.matmul semantics for operands of rank >= 2. Leading dims may broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim < 2 or b.value.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    value = a.value @ b.value

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g @ np.swapaxes(b.value, -1, -2))
        if b.requires_grad:
            _accumulate(b, np.swapaxes(a.value, -1, -2) @ g)
    return _result(value, (a, b), backward, "matmul")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.value)
    return _result(y, (x,), lambda g: _accumulate(x, g * (1.0 - y * y)), "tanh")


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.value)
    return _result(y, (x,), lambda g: _accumulate(x, g * y * (1.0 - y)), "sigmoid")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = np.exp(x.value)
    return _result(y, (x,), lambda g: _accumulate(x, g * y), "exp")


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(x.value)
    return _result(y, (x,), lambda g: _accumulate(x, g / x.value), "log")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        _accumulate(x, y * (g - (g * y).sum(axis=axis, keepdims=True)))
    return _result(y, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.value - x.value.max(axis=axis, keepdims=True)
    y = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        _accumulate(x, g - np.exp(y) * g.sum(axis=axis, keepdims=True))
    return _result(y, (x,), backward, "log_softmax")


def dropout_mask(shape: tuple, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted-dropout mask: zeros with probability ``rate``, survivors scaled by 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must be in [0, 1)")
    return (rng.random(shape) >= rate) / (1.0 - rate)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None = None,
            mask: np.ndarray | None = None) -> Tensor:
    if mask is None:
        if rate == 0.0:
            return x
        mask = dropout_mask(x.shape, rate, rng)
    return mul(x, mask)


def embedding(weight: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    V = weight.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise IndexError(f"embedding id outside [0, {V})")

    def backward(g):
        if weight.requires_grad:
            full = np.zeros_like(weight.value)
            np.add.at(full, ids, g)
            _accumulate(weight, full)
    return _result(weight.value[ids], (weight,), backward, "embedding")


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    value = np.concatenate([x.value for x in xs], axis=axis)
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def backward(g):
        for x, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            _accumulate(x, np.take(g, np.arange(lo, hi), axis=axis))
    return _result(value, xs, backward, "concat")


def _is_basic(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (slice, int, type(Ellipsis))) for k in parts)


def index(x: Tensor, key) -> Tensor:
    value = x.value[key]
    basic = _is_basic(key)

    def backward(g):
        if x.requires_grad:
            full = np.zeros_like(x.value)
            if basic:
                full[key] = g  # basic indexing never repeats an element
            else:
                np.add.at(full, key, g)
            _accumulate(x, full)
    return _result(np.array(value), (x,), backward, "index")


def reshape(x: Tensor, shape: tuple) -> Tensor:
    return _result(x.value.reshape(shape), (x,),
                   lambda g: _accumulate(x, g.reshape(x.shape)), "reshape")


def transpose(x: Tensor) -> Tensor:
    return _result(np.swapaxes(x.value, -1, -2), (x,),
                   lambda g: _accumulate(x, np.swapaxes(g, -1, -2)), "transpose")


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    value = x.value.sum(axis=axis)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, x.shape))
    return _result(np.asarray(value), (x,), backward, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    count = x.value.size if axis is None else x.shape[axis]
    return mul(sum(x, axis), 1.0 / count)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """-log softmax(logits)[target] along the last axis, one value per leading index."""
    targets = np.asarray(targets, dtype=np.int64)
    V = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"targets {targets.shape} do not match logits {logits.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= V):
        raise IndexError(f"target id outside [0, {V})")
    shifted = logits.value - logits.value.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1))
    picked = np.take_along_axis(shifted, targets[..., None], axis=-1)[..., 0]
    value = logz - picked

    def backward(g):
        probs = np.exp(shifted - logz[..., None])
        np.put_along_axis(probs, targets[..., None],
                          np.take_along_axis(probs, targets[..., None], axis=-1) - 1.0, axis=-1)
        _accumulate(logits, probs * g[..., None])
    return _result(value, (logits,), backward, "cross_entropy")


# -- parameters, Adam, schedule -----------------------------------------------------

class Parameter(Tensor):
    def __init__(self, value, name: str = ""):
        super().__init__(value, requires_grad=True, name=name)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)
        self.step = 0


def adam_step(params: Iterable[Parameter], lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, clip_norm: float | None = None) -> None:
    """One bias-corrected Adam update per parameter; gradients are cleared afterwards."""
    params = list(params)
    for p in params:
        if p.grad is None:
            raise ValueError(f"parameter {p.name or '?'} has no gradient")
    scale = 1.0
    if clip_norm is not None:
        norm = np.sqrt(np.sum([np.sum(p.grad * p.grad) for p in params]))
        if norm > clip_norm:
            scale = clip_norm / norm
    for p in params:
        g = p.grad * scale
        p.step += 1
        p.m = beta1 * p.m + (1.0 - beta1) * g
        p.v = beta2 * p.v + (1.0 - beta2) * g * g
        m_hat = p.m / (1.0 - beta1 ** p.step)
        v_hat = p.v / (1.0 - beta2 ** p.step)
        p.value = p.value - lr * m_hat / (np.sqrt(v_hat) + eps)
        p.grad = None


def lr_schedule(epoch: int, base: float = 4e-4, decay: float = 0.8,
                start: int = 10, every: int = 3) -> float:
    """Constant until ``start``, then one ``decay`` factor per completed ``every`` epochs."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if epoch < start:
        return base
    return base * decay ** ((epoch - start) // every)


# -- finite differences ---------------------------------------------------------------

def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(floor, np.abs(analytic) + np.abs(numeric))


def gradcheck(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``loss_fn`` must be deterministic (fixed dropout masks, no sampling).
    """
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.value) if p.grad is None else p.grad.copy()
        numeric = np.zeros_like(p.value)
        flat = p.value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(loss_fn().value)
            flat[i] = orig - h
            down = float(loss_fn().value)
            flat[i] = orig
            numeric.reshape(-1)[i] = (up - down) / (2 * h)
        worst = max(worst, float(relative_error(analytic, numeric).max()))
        p.grad = None
    return worst


# -- checkpoint file -------------------------------------------------------------------

CKPT_MAGIC = b"TGAP"
CKPT_VERSION = 1


def save_parameters(path: str | Path, params: dict, with_adam: bool = True) -> None:
    out = bytearray(CKPT_MAGIC + struct.pack("<HI", CKPT_VERSION, len(params)))
    for name, p in params.items():
        encoded = name.encode("utf-8")
        out += struct.pack("<I", len(encoded)) + encoded
        out += struct.pack("<I", p.value.ndim) + struct.pack(f"<{p.value.ndim}I", *p.value.shape)
        out += p.value.astype("<f8").tobytes(order="C")
    out += struct.pack("<B", 1 if with_adam else 0)
    if with_adam:
        for p in params.values():
            out += struct.pack("<I", p.step)
            out += p.m.astype("<f8").tobytes(order="C") + p.v.astype("<f8").tobytes(order="C")
    Path(path).write_bytes(bytes(out))


def load_parameters(path: str | Path) -> dict:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a parameter checkpoint")
    version, count = struct.unpack_from("<HI", raw, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 10
    params = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
            size = int(np.prod(dims, dtype=np.int64))
            value = np.frombuffer(raw, dtype="<f8", count=size, offset=pos).reshape(dims)
            pos += 8 * size
            params[name] = Parameter(value.astype(np.float64), name=name)
        (flag,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        if flag:
            for p in params.values():
                (p.step,) = struct.unpack_from("<I", raw, pos)
                pos += 4
                n = p.value.size
                p.m = np.frombuffer(raw, "<f8", n, pos).reshape(p.shape).astype(np.float64)
                pos += 8 * n
                p.v = np.frombuffer(raw, "<f8", n, pos).reshape(p.shape).astype(np.float64)
                pos += 8 * n
    except struct.error as exc:
        raise ValueError(f"{path}: truncated checkpoint") from exc
    if pos != len(raw):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return params
