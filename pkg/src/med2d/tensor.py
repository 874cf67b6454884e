"""Dense tensors and a tape-based reverse-mode differentiation engine.

Values are immutable numpy arrays wrapped in :class:`Tensor`. Operations
executed while a :class:`Tape` is active, and touching at least one tensor
that requires a gradient, are recorded on that tape together with a backward
rule. :func:`backward` walks the records in reverse and accumulates gradients
into a :class:`GradientStore` keyed by tensor handle.

Activations use the channels-last layout ``N x H x W x C``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "GradientStore",
    "GradCheckReport",
    "TapeError",
    "record",
    "backward",
    "grad_check",
    "no_record",
    "add",
    "sub",
    "mul",
    "elementwise",
    "sum",
    "mean",
    "reshape",
]

MAX_RANK = 4

_handle_counter = itertools.count(1)
_active_tapes: list["Tape"] = []
_recording_disabled = 0


class TapeError(RuntimeError):
    """Raised on misuse of the tape (non-scalar loss, loss from another tape)."""


class Tensor:
    """Immutable dense array of up to four positive extents."""

    __slots__ = ("data", "requires_grad", "handle")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        if arr.ndim > MAX_RANK:
            raise ValueError(f"rank {arr.ndim} exceeds the maximum rank {MAX_RANK}")
        if any(d < 1 for d in arr.shape):
            raise ValueError(f"all extents must be >= 1, got shape {arr.shape}")
        # read-only view; the caller's array keeps its own flags
        arr = arr.view()
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.handle = next(_handle_counter)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, _lift(other, self))

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __mul__(self, other):
        return mul(self, _lift(other, self))


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.full(like.shape, value, dtype=like.dtype))


@dataclass
class _Record:
    output: Tensor
    inputs: tuple
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; nested tapes record only on the innermost one.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._outputs: set[int] = set()

    def __enter__(self) -> "Tape":
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _active_tapes.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.records)

    def _append(self, rec: _Record) -> None:
        self.records.append(rec)
        self._outputs.add(rec.output.handle)

    def produced(self, t: Tensor) -> bool:
        return t.handle in self._outputs


class no_record:
    """Context manager suspending tape recording (used for finite differences)."""

    def __enter__(self):
        global _recording_disabled
        _recording_disabled += 1
        return self

    def __exit__(self, *exc):
        global _recording_disabled
        _recording_disabled -= 1


def record(out: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap ``out`` as a Tensor and record it if any input needs a gradient.

    ``backward_fn(grad_out)`` must return one gradient (or None) per input,
    each with the input's shape.
    """
    tape = _active_tapes[-1] if (_active_tapes and not _recording_disabled) else None
    needs = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=needs)
    if needs:
        tape._append(_Record(result, tuple(inputs), backward_fn))
    return result


class GradientStore:
    """Gradients keyed by tensor handle."""

    def __init__(self, grads: dict):
        self._grads = grads

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self._grads.get(t.handle)
        if g is None:
            return np.zeros(t.shape, dtype=t.dtype)
        return g

    def __contains__(self, t: Tensor) -> bool:
        return t.handle in self._grads

    def __len__(self) -> int:
        return len(self._grads)


def backward(tape: Tape, loss: Tensor, keep: Optional[Iterable[Tensor]] = None,
             retain_all: bool = True) -> GradientStore:
    """Propagate d(loss)/d(value) to every value recorded on ``tape``.

    With ``retain_all=False`` gradients of intermediate values are released as
    soon as they are consumed; leaves and anything listed in ``keep`` survive.
    """
    if loss.data.size != 1:
        raise TapeError(f"loss must be a scalar, got shape {loss.shape}")
    if not tape.produced(loss):
        raise TapeError("loss was not produced on this tape")

    keep_handles = {t.handle for t in keep} if keep is not None else set()
    grads: dict[int, np.ndarray] = {loss.handle: np.ones(loss.shape, dtype=loss.dtype)}
    for rec in reversed(tape.records):
        g = grads.get(rec.output.handle)
        if g is None:
            continue
        in_grads = rec.backward(g)
        if not retain_all and rec.output.handle not in keep_handles and rec.output is not loss:
            del grads[rec.output.handle]
        for t, gi in zip(rec.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if gi.shape != t.shape:
                raise TapeError(f"backward rule produced shape {gi.shape} for input {t.shape}")
            prev = grads.get(t.handle)
            # fan-out: contributions from several consumers are summed
            grads[t.handle] = gi.astype(t.dtype, copy=False) if prev is None else prev + gi
    return GradientStore(grads)


# --- elementwise arithmetic --------------------------------------------------


def _broadcast_axes(a_shape: tuple, b_shape: tuple) -> Optional[tuple]:
    """Axes over which ``b`` is channel-broadcast against ``a``; None if invalid."""
    if a_shape == b_shape:
        return ()
    if len(a_shape) != len(b_shape) or len(a_shape) < 3:
        return None
    # spatial axes are all but the last (3-D) or all but batch and last (4-D)
    spatial = tuple(range(len(a_shape) - 3, len(a_shape) - 1))
    for ax, (da, db) in enumerate(zip(a_shape, b_shape)):
        if ax in spatial:
            if db != 1:
                return None
        elif da != db:
            return None
    return spatial


def elementwise(kind: str, a: Tensor, b: Tensor) -> Tensor:
    """``a op b`` for op in {add, sub, mul}.

    ``b`` may be ``1 x 1 x C`` (or ``N x 1 x 1 x C``) against an ``H x W x C``
    (``N x H x W x C``) ``a``; it is then broadcast over spatial positions.
    """
    axes = _broadcast_axes(a.shape, b.shape)
    if axes is None:
        raise ValueError(
            f"{kind}: shapes {a.shape} and {b.shape} are neither equal nor channel-broadcastable"
        )

    def reduce_b(g):
        return g.sum(axis=axes, keepdims=True) if axes else g

    ad, bd = a.data, b.data
    if kind == "add":
        return record(ad + bd, (a, b), lambda g: (g, reduce_b(g)))
    if kind == "sub":
        return record(ad - bd, (a, b), lambda g: (g, reduce_b(-g)))
    if kind == "mul":
        return record(ad * bd, (a, b), lambda g: (g * bd, reduce_b(g * ad)))
    raise ValueError(f"unknown elementwise op {kind!r}")


def add(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("add", a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("sub", a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("mul", a, b)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return record(np.asarray(out), (x,), bwd)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    out = np.mean(x.data, axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape).astype(x.dtype),)

    return record(np.asarray(out, dtype=x.dtype), (x,), bwd)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    src = x.shape
    return record(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


# --- finite-difference checking ---------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    checked: int
    worst_index: tuple = ()


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5, tol: float = 1e-4,
               coords: Optional[Sequence[tuple]] = None) -> GradCheckReport:
    """Compare the tape gradient of scalar ``f`` at ``x`` with central differences.

    Evaluation is in float64. The error per coordinate is
    ``|analytic - numeric| / max(1, |analytic|)``; ``coords`` restricts the
    check to a subset of indices (all coordinates by default).
    """
    if not eps > 0:
        raise ValueError(f"finite-difference step must be positive, got {eps}")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)

    xt = Tensor(base, requires_grad=True)
    with Tape() as tape:
        y = f(xt)
    if y.data.size != 1:
        raise ValueError(f"grad_check needs a scalar function, got output shape {y.shape}")
    analytic = backward(tape, y)[xt]

    if coords is None:
        coords = list(np.ndindex(base.shape))
    worst, worst_idx = 0.0, ()
    probe = base.copy()
    with no_record():
        for idx in coords:
            idx = tuple(idx)
            orig = probe[idx]
            probe[idx] = orig + eps
            fp = f(Tensor(probe.copy())).item()
            probe[idx] = orig - eps
            fm = f(Tensor(probe.copy())).item()
            probe[idx] = orig
            numeric = (fp - fm) / (2 * eps)
            a = float(analytic[idx])
            err = abs(a - numeric) / max(1.0, abs(a))
            if err > worst:
                worst, worst_idx = err, idx
    return GradCheckReport(worst, worst <= tol, len(coords), worst_idx)
