"""Dense float64 tensors with taped reverse-mode differentiation.

Design-by-run: primitives compute eagerly on numpy buffers and, when a
Tape is active, append a (output, inputs, vjp) record. backward() replays
the tape in reverse, which is a valid reverse topological order because
every output tensor is created at record time.

Deliberate restrictions:
  * float64 only,
  * no implicit broadcasting -- elementwise ops demand equal shapes and
    `broadcast` expands size-1 axes explicitly,
  * every primitive checks its result for NaN/Inf and raises instead of
    letting them flow into downstream state.
"""

from __future__ import annotations

import builtins
from dataclasses import dataclass

import numpy as np

DTYPE = np.float64


class GradError(Exception):
    """Base error for engine misuse."""


class ShapeError(GradError):
    """Input shapes invalid for an operation."""


class NonFiniteError(GradError):
    """An operation produced NaN or Inf."""


class Tensor:
    """A dense float64 array. Identity-hashed so it can key gradient maps.

    Tensors that participate in a live tape must not have their .data
    mutated until the tape is discarded; vjps capture the buffers.
    """

    __slots__ = ("data",)

    def __init__(self, data):
        self.data = np.ascontiguousarray(data, dtype=DTYPE)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, data={self.data!r})"

    # Operator sugar. Python scalars / arrays are lifted to constant
    # tensors of the partner's shape, keeping the strict-shape primitives.
    def _lift(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.broadcast_to(np.asarray(other, dtype=DTYPE), self.shape))

    def __add__(self, other):
        return add(self, self._lift(other))

    def __radd__(self, other):
        return add(self._lift(other), self)

    def __sub__(self, other):
        return sub(self, self._lift(other))

    def __rsub__(self, other):
        return sub(self._lift(other), self)

    def __mul__(self, other):
        return mul(self, self._lift(other))

    def __rmul__(self, other):
        return mul(self._lift(other), self)

    def __truediv__(self, other):
        return div(self, self._lift(other))

    def __rtruediv__(self, other):
        return div(self._lift(other), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, self._lift(-1.0))


def tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=DTYPE))


def ones(shape) -> Tensor:
    return Tensor(np.ones(shape, dtype=DTYPE))


_ACTIVE_TAPE: "Tape | None" = None


class Tape:
    """Ordered record of primitive applications for one forward pass.

    Used as a context manager; only one tape may be active at a time
    (tapes are rebuilt every forward pass, so nesting is never needed).
    """

    def __init__(self):
        self._entries: list[tuple[Tensor, tuple[Tensor, ...], object]] = []

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise GradError("a Tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp) -> None:
        self._entries.append((out, inputs, vjp))

    def __len__(self) -> int:
        return len(self._entries)


def _finish(op: str, out_data: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    if not np.all(np.isfinite(out_data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor(out_data)
    if _ACTIVE_TAPE is not None:
        _ACTIVE_TAPE.record(out, inputs, vjp)
    return out


def _require_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} must be equal")


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("add", a, b)
    return _finish("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("sub", a, b)
    return _finish("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _finish("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("div", a, b)
    ad, bd = a.data, b.data
    return _finish("div", ad / bd, (a, b), lambda g: (g / bd, -g * ad / (bd * bd)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul: expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree for {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _finish("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _finish("tanh", out, (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x: Tensor) -> Tensor:
    # exp(-logaddexp(0, -x)) is stable across the whole float64 range.
    out = np.exp(-np.logaddexp(0.0, -x.data))
    return _finish("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def log(x: Tensor) -> Tensor:
    xd = x.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(xd)
    return _finish("log", out, (x,), lambda g: (g / xd,))


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _finish("exp", out, (x,), lambda g: (g * out,))


def _reduce_vjp(x: Tensor, axis, keepdims, scale: float):
    shape = x.shape

    def vjp(g):
        if axis is None:
            return (np.full(shape, g * scale, dtype=DTYPE),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg * scale, shape).copy(),)

    return vjp


def sum(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(x.data, axis=axis, keepdims=keepdims)
    return _finish("sum", out, (x,), _reduce_vjp(x, axis, keepdims, 1.0))


def mean(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    if n == 0:
        raise ShapeError("mean: cannot reduce over zero elements")
    out = np.mean(x.data, axis=axis, keepdims=keepdims)
    return _finish("mean", out, (x,), _reduce_vjp(x, axis, keepdims, 1.0 / n))


def concat(tensors, axis: int = 0) -> Tensor:
    ts = list(tensors)
    if not ts:
        raise ShapeError("concat: needs at least one tensor")
    ndim = ts[0].ndim
    axis = axis % ndim if ndim else axis
    for t in ts[1:]:
        if t.ndim != ndim:
            raise ShapeError(f"concat: rank mismatch {ts[0].shape} vs {t.shape}")
        for ax in range(ndim):
            if ax != axis and t.shape[ax] != ts[0].shape[ax]:
                raise ShapeError(f"concat: shapes {ts[0].shape} and {t.shape} differ off axis {axis}")
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, offsets, axis=axis))

    return _finish("concat", np.concatenate([t.data for t in ts], axis=axis), tuple(ts), vjp)


def slice_(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice [start, stop) along one axis ("slice" primitive)."""
    axis = axis % x.ndim
    if not (0 <= start < stop <= x.shape[axis]):
        raise ShapeError(f"slice: [{start}, {stop}) out of range for axis {axis} of {x.shape}")
    index = tuple(builtins.slice(start, stop) if ax == axis else builtins.slice(None) for ax in range(x.ndim))
    shape = x.shape

    def vjp(g):
        gx = np.zeros(shape, dtype=DTYPE)
        gx[index] = g
        return (gx,)

    return _finish("slice", x.data[index].copy(), (x,), vjp)


def stack(tensors, axis: int = 0) -> Tensor:
    ts = list(tensors)
    if not ts:
        raise ShapeError("stack: needs at least one tensor")
    for t in ts[1:]:
        if t.shape != ts[0].shape:
            raise ShapeError(f"stack: shapes {ts[0].shape} and {t.shape} must be equal")

    def vjp(g):
        return tuple(np.ascontiguousarray(np.take(g, i, axis=axis)) for i in range(len(ts)))

    return _finish("stack", np.stack([t.data for t in ts], axis=axis), tuple(ts), vjp)


def broadcast(x: Tensor, shape) -> Tensor:
    """Expand size-1 axes of x to `shape`; the only implicit-free broadcast."""
    shape = tuple(int(s) for s in shape)
    if x.ndim != len(shape):
        raise ShapeError(f"broadcast: rank of {x.shape} must match target {shape}")
    expanded = []
    for ax, (have, want) in enumerate(zip(x.shape, shape)):
        if have == want:
            continue
        if have == 1:
            expanded.append(ax)
        else:
            raise ShapeError(f"broadcast: cannot expand axis {ax} of {x.shape} to {shape}")
    exp = tuple(expanded)

    def vjp(g):
        return (np.sum(g, axis=exp, keepdims=True) if exp else g.copy(),)

    return _finish("broadcast", np.broadcast_to(x.data, shape).copy(), (x,), vjp)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes through inside, zero outside."""
    if lo > hi:
        raise ShapeError(f"clamp: lo {lo} > hi {hi}")
    xd = x.data
    mask = (xd >= lo) & (xd <= hi)
    return _finish("clamp", np.clip(xd, lo, hi), (x,), lambda g: (g * mask,))


PRIMITIVES = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "matmul": matmul,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "log": log,
    "exp": exp,
    "sum": sum,
    "mean": mean,
    "concat": concat,
    "slice": slice_,
    "stack": stack,
    "broadcast": broadcast,
    "clamp": clamp,
}


def forward_primitive(op: str, *inputs, **kwargs) -> Tensor:
    """Apply a primitive by name; records on the active tape like the direct call."""
    try:
        fn = PRIMITIVES[op]
    except KeyError:
        raise GradError(f"unknown primitive {op!r}") from None
    if op in ("concat", "stack"):
        return fn(inputs, **kwargs)
    return fn(*inputs, **kwargs)


class GradMap:
    """Result of backward(): tensor -> gradient array, zeros for untouched."""

    def __init__(self, grads: dict):
        self._grads = grads

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self._grads.get(t)
        return np.zeros(t.shape, dtype=DTYPE) if g is None else g

    def get(self, t: Tensor):
        return self._grads.get(t)

    def __contains__(self, t: Tensor) -> bool:
        return t in self._grads


def backward(tape: Tape, root: Tensor) -> GradMap:
    """Gradients of a scalar root w.r.t. everything on the tape.

    A root the tape never produced is a constant, so every gradient is
    zero. Walking the recorded entries in reverse visits each operation
    after all of its consumers, so accumulation is complete before use.
    """
    if root.size != 1:
        raise GradError(f"backward: root must be scalar, got shape {root.shape}")
    grads: dict[Tensor, np.ndarray] = {root: np.ones_like(root.data)}
    for out, inputs, vjp in reversed(tape._entries):
        g = grads.get(out)
        if g is None:
            continue
        for t, gi in zip(inputs, vjp(g)):
            if gi is None:
                continue
            acc = grads.get(t)
            if acc is None:
                grads[t] = np.array(gi, dtype=DTYPE)  # own the buffer; vjps may alias g
            else:
                acc += gi
    return GradMap(grads)


class ParamSet:
    """Named trainable tensors with deterministic iteration order."""

    def __init__(self):
        self._items: dict[str, Tensor] = {}

    def add(self, name: str, t: Tensor) -> Tensor:
        if name in self._items:
            raise GradError(f"duplicate parameter name {name!r}")
        self._items[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._items[name]

    def __contains__(self, name: str) -> bool:
        return name in self._items

    def __len__(self) -> int:
        return len(self._items)

    def names(self) -> list[str]:
        return list(self._items)

    def items(self):
        return self._items.items()

    def __iter__(self):
        return iter(self._items.items())

    def grads(self, gm: GradMap) -> dict[str, np.ndarray]:
        """Per-parameter gradients; untouched parameters get zeros."""
        return {name: gm[t] for name, t in self._items.items()}

    def n_elements(self) -> int:
        return builtins.sum(t.size for t in self._items.values())

    def copy_data(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._items.items()}

    def load(self, arrays: dict[str, np.ndarray]) -> None:
        for name, t in self._items.items():
            src = np.asarray(arrays[name], dtype=DTYPE)
            if src.shape != t.shape:
                raise ShapeError(f"load: parameter {name!r} has shape {t.shape}, got {src.shape}")
            t.data[...] = src


@dataclass
class GradCheckReport:
    """Outcome of comparing backward() against central finite differences."""

    max_abs_err: float
    max_rel_err: float
    worst_param: str
    worst_index: int
    n_checked: int
    n_non_finite: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.n_non_finite == 0 and self.max_rel_err < self.tol


def finite_diff_check(f, params: ParamSet, step: float = 1e-5, tol: float = 1e-4,
                      rel_floor: float = 1e-3) -> GradCheckReport:
    """Compare analytic gradients of scalar f(params) with central differences.

    Relative error uses a guarded denominator max(|analytic|, |numeric|,
    rel_floor): where the true gradient is ~0 the comparison degrades to
    an absolute one at rel_floor * tol, which central differences at
    `step` resolve comfortably in float64.
    """
    if step <= 0:
        raise GradError("finite_diff_check: step must be positive")
    with Tape() as tape:
        out = f(params)
    gm = backward(tape, out)
    analytic = params.grads(gm)

    max_abs = 0.0
    max_rel = -1.0
    worst = ("", -1)
    n_checked = 0
    n_non_finite = 0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = f(params).item()
            flat[i] = orig - step
            fm = f(params).item()
            flat[i] = orig
            n_checked += 1
            if not (np.isfinite(fp) and np.isfinite(fm)):
                n_non_finite += 1
                continue
            fd = (fp - fm) / (2.0 * step)
            abs_err = abs(a_flat[i] - fd)
            rel = abs_err / max(abs(a_flat[i]), abs(fd), rel_floor)
            max_abs = max(max_abs, abs_err)
            if rel > max_rel:
                max_rel = rel
                worst = (name, i)
    return GradCheckReport(
        max_abs_err=max_abs,
        max_rel_err=max(max_rel, 0.0),
        worst_param=worst[0],
        worst_index=worst[1],
        n_checked=n_checked,
        n_non_finite=n_non_finite,
        tol=tol,
    )
