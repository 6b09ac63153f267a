"""Tape-based reverse-mode autodiff over float64 numpy arrays.

Ops record a backward closure on the active :class:`Tape` when any input
requires a gradient. Outside a ``with Tape():`` block nothing is recorded,
which is the inference path.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..errors import NonFiniteError, ShapeError

DTYPE = np.float64

_active: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)


class Parameter(Tensor):
    """A leaf tensor owned by a layer. Frozen parameters still get gradients,
    the optimizer just skips them."""

    __slots__ = ("trainable",)

    def __init__(self, data, name: str = "", trainable: bool = True):
        super().__init__(data, requires_grad=True, name=name)
        self.trainable = trainable
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)


class Tape:
    """Records (output, inputs, backward_fn) triples in execution order."""

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _active.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active.remove(self)

    def __len__(self) -> int:
        return len(self.records)


def _record(out: Tensor, inputs: Sequence[Tensor], fn: Callable) -> Tensor:
    if _active and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _active[-1].records.append((out, tuple(inputs), fn))
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def check_finite(t: Tensor, where: str) -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise NonFiniteError(f"non-finite values produced by {where}")
    return t


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) into ``.grad`` of every parameter on the tape."""
    if not tape.records or tape.records[-1][0] is not loss:
        raise RuntimeError("backward() needs a tape whose last record produced the loss")
    if loss.data.size != 1:
        raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, inputs, fn in reversed(tape.records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for inp, gi in zip(inputs, fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            if isinstance(inp, Parameter):
                inp.grad = inp.grad + gi
            else:
                key = id(inp)
                grads[key] = grads[key] + gi if key in grads else gi


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)
    return _record(
        out, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = Tensor(np.where(mask, x.data, 0.0))
    return _record(out, (x,), lambda g: (g * mask,))


def add_n(xs: Sequence[Tensor]) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    total = xs[0].data.copy()
    for x in xs[1:]:
        total = total + x.data
    out = Tensor(total)
    return _record(out, xs, lambda g: tuple(_unbroadcast(g, x.shape) for x in xs))


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)
    return _record(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(x.data.reshape(shape))
    return _record(out, (x,), lambda g: (g.reshape(x.shape),))


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    bounds = np.cumsum([0] + sizes)
    out = Tensor(np.concatenate([x.data for x in xs], axis=axis))

    def fn(g):
        idx = [slice(None)] * g.ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            parts.append(g[tuple(idx)])
        return tuple(parts)

    return _record(out, xs, fn)


def column(x: Tensor, j: int) -> Tensor:
    """x[:, j:j+1] as a (N, 1) tensor."""
    out = Tensor(x.data[:, j:j + 1])

    def fn(g):
        full = np.zeros_like(x.data)
        full[:, j:j + 1] = g
        return (full,)

    return _record(out, (x,), fn)


def segment_max(x: Tensor, segments: Sequence[Sequence[int]]) -> Tensor:
    """out[:, s] = max over columns ``segments[s]`` of x. Ties route the
    gradient to the first listed column."""
    n = x.shape[0]
    width = max(len(s) for s in segments)
    idx = np.zeros((len(segments), width), dtype=np.int64)
    valid = np.zeros((len(segments), width), dtype=bool)
    for s, cols in enumerate(segments):
        idx[s, : len(cols)] = cols
        idx[s, len(cols):] = cols[0]
        valid[s, : len(cols)] = True
    gathered = np.where(valid[None], x.data[:, idx], -np.inf)  # (N, S, W)
    arg = gathered.argmax(axis=2)
    winners = np.take_along_axis(idx[None].repeat(n, 0), arg[..., None], axis=2)[..., 0]
    out = Tensor(np.take_along_axis(x.data, winners, axis=1))

    def fn(g):
        full = np.zeros_like(x.data)
        np.add.at(full, (np.arange(n)[:, None], winners), g)
        return (full,)

    return _record(out, (x,), fn)


# ---------------------------------------------------------------- convolution / pooling


def conv2d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Valid-padding, stride-1 cross-correlation. x: (N,C,H,W), w: (O,C,k,k)."""
    n, c, h, wd = x.shape
    o, c2, k, _ = w.shape
    if c != c2:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {c2}")
    ho, wo = h - k + 1, wd - k + 1
    win = np.lib.stride_tricks.sliding_window_view(x.data, (k, k), axis=(2, 3))
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho, wo, c * k * k)
    wmat = w.data.reshape(o, c * k * k)
    res = cols @ wmat.T + b.data
    out = Tensor(np.ascontiguousarray(res.transpose(0, 3, 1, 2)))

    def fn(g):
        gr = g.transpose(0, 2, 3, 1)  # (N,Ho,Wo,O)
        gw = np.tensordot(gr, cols, axes=([0, 1, 2], [0, 1, 2])).reshape(w.shape)
        gb = gr.sum(axis=(0, 1, 2))
        gcols = (gr @ wmat).reshape(n, ho, wo, c, k, k)
        gx = np.zeros_like(x.data)
        for i in range(k):
            for j in range(k):
                gx[:, :, i:i + ho, j:j + wo] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return gx, gw, gb

    return _record(out, (x, w, b), fn)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max-pool, stride 2; odd trailing rows/cols are dropped."""
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    blocks = x.data[:, :, : 2 * ho, : 2 * wo].reshape(n, c, ho, 2, wo, 2)
    blocks = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
    arg = blocks.argmax(axis=-1)
    out = Tensor(np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0])

    def fn(g):
        gb = np.zeros((n, c, ho, wo, 4))
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * ho, 2 * wo)
        gx = np.zeros_like(x.data)
        gx[:, :, : 2 * ho, : 2 * wo] = gb
        return (gx,)

    return _record(out, (x,), fn)


# ---------------------------------------------------------------- softmax family


def softmax_array(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_array(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def softmax(x: Tensor) -> Tensor:
    s = softmax_array(x.data)
    out = Tensor(s)
    return _record(out, (x,), lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs {labels.shape[0]} labels")
    n, c = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    logp = log_softmax_array(logits.data)
    out = Tensor(-logp[np.arange(n), labels].mean())

    def fn(g):
        d = np.exp(logp)
        d[np.arange(n), labels] -= 1.0
        return (g * d / n,)

    return _record(out, (logits,), fn)
