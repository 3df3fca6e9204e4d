"""Dense numpy-backed tensors with tape-based reverse-mode differentiation.

Operations executed inside an active :class:`Tape` on at least one input that
requires a gradient are recorded; :meth:`Tape.backward` replays the records in
reverse and accumulates ``grad`` on the leaf tensors.  Outside a tape every
operation is a plain numpy computation, which keeps inference cheap.

Training runs in float32.  :func:`precision` switches the dtype used for new
tensors, and :func:`grad_check` runs its comparison in float64.
"""

from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "NonFiniteError",
    "precision",
    "get_default_dtype",
    "tensor",
    "zeros",
    "ones",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "matmul",
    "linear",
    "relu",
    "softmax",
    "log_softmax",
    "tensor_sum",
    "tensor_mean",
    "reshape",
    "transpose",
    "stack",
    "concat",
    "layer_norm",
    "dropout",
    "embedding",
    "cross_entropy_loss",
    "mse_loss",
    "grad_check",
]


class NonFiniteError(FloatingPointError):
    """A forward value or gradient became NaN or infinite."""


class _State(threading.local):
    """Per-thread dtype and tape stacks, so independent runs may share a process."""

    def __init__(self) -> None:
        self.dtypes: list[np.dtype] = [np.dtype(np.float32)]
        self.tapes: list["Tape"] = []


_STATE = _State()


def get_default_dtype() -> np.dtype:
    return _STATE.dtypes[-1]


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype used when tensors are created from raw data."""
    _STATE.dtypes.append(np.dtype(dtype))
    try:
        yield
    finally:
        _STATE.dtypes.pop()


def _active_tape() -> "Tape | None":
    tapes = _STATE.tapes
    return tapes[-1] if tapes else None


class Tensor:
    """A dense array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_tape", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=get_default_dtype(), copy=True)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        out = cls.__new__(cls)
        out.data = arr
        out.requires_grad = requires_grad
        out.grad = None
        out._tape = None
        out.name = None
        return out

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self) -> "Tensor":
        return transpose(self, None)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=get_default_dtype()), requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=get_default_dtype()), requires_grad)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(get_default_dtype())
    return Tensor._wrap(arr)


# ----------------------------------------------------------------------
# Tape
# ----------------------------------------------------------------------

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tape:
    """Ordered record of differentiable operations for a single backward pass.

    Use as a context manager; operations run inside the ``with`` block on
    tensors that require gradients are appended in execution order.
    """

    def __init__(self) -> None:
        self.records: list[tuple[Tensor, tuple[Tensor, ...], BackwardFn]] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _STATE.tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _STATE.tapes.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], fn: BackwardFn) -> None:
        out._tape = self
        self.records.append((out, inputs, fn))

    def backward(self, loss: Tensor) -> None:
        """Populate ``grad`` on every leaf that contributed to ``loss``.

        Gradients add to whatever is already stored on the leaves; call
        ``zero_grad`` between steps.
        """
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise RuntimeError("loss is not attached to this tape (detached graph)")
        if self._consumed:
            raise RuntimeError("tape has already been replayed")
        if not np.isfinite(loss.data).all():
            raise NonFiniteError(f"non-finite loss {loss.data!r}")
        self._consumed = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        touched: list[Tensor] = []
        for out, inputs, fn in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            in_grads = fn(g)
            for inp, ig in zip(inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                if inp._tape is None:
                    if inp.grad is None:
                        inp.grad = np.array(ig, dtype=inp.data.dtype, copy=True)
                        touched.append(inp)
                    else:
                        inp.grad = inp.grad + ig
                else:
                    key = id(inp)
                    prev = grads.get(key)
                    grads[key] = ig if prev is None else prev + ig
        for leaf in touched:
            if not np.isfinite(leaf.grad).all():
                raise NonFiniteError(f"non-finite gradient on {leaf.name or leaf!r}")


def _result(arr: np.ndarray, inputs: tuple[Tensor, ...], fn: BackwardFn) -> Tensor:
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(arr, requires_grad=needs)
    if needs:
        tape.record(out, inputs, fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ----------------------------------------------------------------------
# Elementwise arithmetic
# ----------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def fn(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _result(a.data + b.data, (a, b), fn)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def fn(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.shape) if b.requires_grad else None,
        )

    return _result(a.data - b.data, (a, b), fn)


def mul(a, b) -> Tensor:
    """Elementwise (Hadamard) product with numpy broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)

    def fn(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return _result(a.data * b.data, (a, b), fn)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data

    def fn(g):
        return (
            _unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None,
        )

    return _result(out, (a, b), fn)


def scale(x: Tensor, c: float) -> Tensor:
    return _result(x.data * c, (x,), lambda g: (g * c,))


# ----------------------------------------------------------------------
# Linear algebra
# ----------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, batching over leading axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _result(out, (a, b), fn)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` over the trailing axis of ``x``."""
    if x.shape[-1] != weight.shape[0]:
        raise ValueError(f"linear dimension mismatch: {x.shape} @ {weight.shape}")
    k, n = weight.shape
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, k)
    out = x2 @ weight.data
    if bias is not None:
        out += bias.data
    out = out.reshape(lead + (n,))

    def fn(g):
        g2 = g.reshape(-1, n)
        gx = (g2 @ weight.data.T).reshape(lead + (k,)) if x.requires_grad else None
        gw = (x2.T @ g2) if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, inputs, fn)


# ----------------------------------------------------------------------
# Nonlinearities
# ----------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(x.data * mask, (x,), lambda g: (g * mask,))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), fn)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def fn(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _result(y, (x,), fn)


# ----------------------------------------------------------------------
# Reductions and shape manipulation
# ----------------------------------------------------------------------

def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)
    shape = x.shape

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _result(np.asarray(out), (x,), fn)


def tensor_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = math.prod(x.shape[a] for a in axes)
    return scale(tensor_sum(x, axis, keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    orig = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(orig),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (int, slice)) or p is None or p is Ellipsis for p in parts)


def _getitem(x: Tensor, index) -> Tensor:
    shape, dtype = x.shape, x.dtype
    basic = _is_basic_index(index)

    def fn(g):
        gx = np.zeros(shape, dtype=dtype)
        if basic:
            gx[index] = g
        else:
            np.add.at(gx, index, g)
        return (gx,)

    return _result(np.array(x.data[index]), (x,), fn)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    if not tensors:
        raise ValueError("stack needs at least one tensor")
    out = np.stack([t.data for t in tensors], axis=axis)

    def fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _result(out, tensors, fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, tensors, fn)


# ----------------------------------------------------------------------
# Network building blocks
# ----------------------------------------------------------------------

def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the trailing axis, then apply the affine map."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data
    n = x.shape[-1]

    def fn(g):
        gx = gg = gbt = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = (rstd / n) * (
                n * gh
                - gh.sum(axis=-1, keepdims=True)
                - xhat * (gh * xhat).sum(axis=-1, keepdims=True)
            )
        if gamma.requires_grad:
            gg = (g * xhat).reshape(-1, n).sum(axis=0)
        if beta.requires_grad:
            gbt = g.reshape(-1, n).sum(axis=0)
        return gx, gg, gbt

    return _result(out, (x, gamma, beta), fn)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout: kept units are divided by ``1 - p`` at train time."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs a random generator")
    keep = rng.random(x.shape, dtype=np.float32) >= np.float32(p)
    mask = keep * x.dtype.type(1.0 / (1.0 - p))
    return _result(x.data * mask, (x,), lambda g: (g * mask,))


def embedding(ids: np.ndarray, table: Tensor) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        bad = int(ids.max()) if ids.max() >= table.shape[0] else int(ids.min())
        raise IndexError(f"token id {bad} outside vocabulary of size {table.shape[0]}")

    def fn(g):
        gt = np.zeros(table.shape, dtype=g.dtype)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _result(table.data[ids], (table,), fn)


def cross_entropy_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ValueError(f"cross_entropy_loss shape mismatch: {logits.shape} vs {labels.shape}")
    n = labels.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), labels].mean()
    if not np.isfinite(loss):
        raise NonFiniteError("non-finite cross-entropy loss")

    def fn(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (p * (g / n),)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), fn)


def mse_loss(pred: Tensor, target) -> Tensor:
    target = np.asarray(target, dtype=pred.dtype).reshape(pred.shape)
    diff = pred.data - target
    loss = (diff * diff).mean()
    if not np.isfinite(loss):
        raise NonFiniteError("non-finite mean squared error")
    n = diff.size
    return _result(np.asarray(loss, dtype=pred.dtype), (pred,), lambda g: (g * 2.0 * diff / n,))


# ----------------------------------------------------------------------
# Finite-difference oracle
# ----------------------------------------------------------------------

def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-6,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Largest relative disagreement between tape gradients and central differences.

    ``loss_fn`` is re-evaluated with each parameter scalar nudged by ``±eps``;
    it must be deterministic.  Parameters are promoted to float64 for the
    duration of the check and restored afterwards.  ``max_coords`` limits the
    number of scalars probed per parameter (chosen with ``seed``).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    saved = {k: (p.data, p.grad, p.requires_grad) for k, p in params.items()}
    rng = np.random.default_rng(seed)
    worst = 0.0
    try:
        with precision(np.float64):
            for p in params.values():
                p.data = p.data.astype(np.float64)
                p.grad = None
                p.requires_grad = True
            with Tape() as tape:
                loss = loss_fn()
            tape.backward(loss)
            analytic = {
                k: (p.grad if p.grad is not None else np.zeros_like(p.data))
                for k, p in params.items()
            }
            for k, p in params.items():
                flat = p.data.reshape(-1)
                coords = np.arange(flat.size)
                if max_coords is not None and flat.size > max_coords:
                    coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
                ga = analytic[k].reshape(-1)
                for i in coords:
                    orig = flat[i]
                    flat[i] = orig + eps
                    fp = float(loss_fn().data)
                    flat[i] = orig - eps
                    fm = float(loss_fn().data)
                    flat[i] = orig
                    if not (math.isfinite(fp) and math.isfinite(fm)):
                        raise NonFiniteError(f"non-finite loss while perturbing {k}[{i}]")
                    num = (fp - fm) / (2.0 * eps)
                    err = abs(ga[i] - num) / max(1e-8, abs(ga[i]) + abs(num))
                    worst = max(worst, err)
    finally:
        for k, p in params.items():
            p.data, p.grad, p.requires_grad = saved[k]
    return worst
