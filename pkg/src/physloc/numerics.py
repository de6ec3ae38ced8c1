"""Dense float64 tensors and reverse-mode differentiation on a recording tape.

Design notes
------------
* All arithmetic is 64-bit. Tensors are immutable value wrappers around
  numpy arrays; every op checks its output for NaN/Inf and raises
  NumericError instead of letting poison propagate.
* A GradientTape records operations in execution order. Execution order is
  a topological order, so backward() simply replays the records reversed and
  visits each one exactly once. Parameters must be registered with
  ``tape.watch``; watched parameters that do not participate in the loss get
  exactly-zero gradients.
* The op set is a closed whitelist: matmul, softmax, layernorm, l2_normalize
  (vector and row-wise), cosine_sim, plus the elementwise/shape plumbing the
  encoders need (add, sub, mul, div, neg, exp, log, tanh, sum, mean,
  transpose, reshape, slice_rows, stack_rows, tile_rows, gather_rows). Each
  op carries its own vector-Jacobian product and is validated against
  central finite differences.
* Single logical thread per tape. There is no locking; concurrent forward
  passes must each own a private tape.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import (
    ContractError,
    DegenerateInputError,
    DimensionError,
    DomainError,
    NumericError,
)

__all__ = [
    "Tensor",
    "GradientTape",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "tanh",
    "matmul",
    "transpose",
    "reshape",
    "sum_",
    "mean",
    "softmax",
    "layernorm",
    "l2_normalize",
    "l2_normalize_rows",
    "cosine_sim",
    "gather_rows",
    "slice_rows",
    "stack_rows",
    "tile_rows",
    "backward",
    "finite_diff_check",
]


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite value produced by {op}")


class Tensor:
    """Immutable float64 array value.

    The wrapped array is made read-only; ops always allocate fresh outputs.
    """

    __slots__ = ("data",)

    def __init__(self, data, check: bool = True):
        arr = np.array(data, dtype=np.float64)
        if check:
            _check_finite(arr, "tensor construction")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

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
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


_ACTIVE_TAPE: "GradientTape | None" = None


class GradientTape:
    """Records ops in execution order for one reverse sweep.

    Use as a context manager around the forward pass. Only computations that
    depend on watched tensors are recorded; everything else runs value-only.
    """

    def __init__(self):
        # each record: (out tensor, ((input tensor, vjp callable), ...))
        self._records: list[tuple[Tensor, tuple[tuple[Tensor, Callable], ...]]] = []
        self._tracked: set[int] = set()
        self._watched: dict[str, Tensor] = {}
        self._auto = 0

    def __enter__(self) -> "GradientTape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise ContractError("a GradientTape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None

    def watch(self, tensor: Tensor, name: str | None = None) -> str:
        if not isinstance(tensor, Tensor):
            raise ContractError("watch() takes a Tensor")
        if name is None:
            name = f"p{self._auto}"
            self._auto += 1
        if name in self._watched and self._watched[name] is not tensor:
            raise ContractError(f"parameter name {name!r} watched twice")
        self._watched[name] = tensor
        self._tracked.add(id(tensor))
        return name

    def _tracks(self, t: Tensor) -> bool:
        return id(t) in self._tracked

    def _record(self, out: Tensor, pairs) -> None:
        live = tuple((t, fn) for t, fn in pairs if self._tracks(t))
        if live:
            self._tracked.add(id(out))
            self._records.append((out, live))


def _emit(out: Tensor, pairs) -> Tensor:
    if _ACTIVE_TAPE is not None:
        _ACTIVE_TAPE._record(out, pairs)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the shape of its source operand."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _binary(name: str, a, b, fwd, vjp_a, vjp_b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        with np.errstate(all="ignore"):
            raw = np.asarray(fwd(a.data, b.data), dtype=np.float64)
    except ValueError as e:
        raise DimensionError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from e
    _check_finite(raw, name)
    out = Tensor(raw, check=False)
    return _emit(
        out,
        (
            (a, lambda g, a=a, b=b: _unbroadcast(vjp_a(g, a.data, b.data), a.shape)),
            (b, lambda g, a=a, b=b: _unbroadcast(vjp_b(g, a.data, b.data), b.shape)),
        ),
    )


def add(a, b) -> Tensor:
    return _binary("add", a, b, lambda x, y: x + y, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Tensor:
    return _binary("sub", a, b, lambda x, y: x - y, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Tensor:
    return _binary(
        "mul", a, b, lambda x, y: x * y, lambda g, x, y: g * y, lambda g, x, y: g * x
    )


def div(a, b) -> Tensor:
    return _binary(
        "div",
        a,
        b,
        lambda x, y: x / y,
        lambda g, x, y: g / y,
        lambda g, x, y: -g * x / (y * y),
    )


def _unary(name: str, x, fwd, vjp) -> Tensor:
    x = as_tensor(x)
    with np.errstate(all="ignore"):
        raw = np.asarray(fwd(x.data), dtype=np.float64)
    _check_finite(raw, name)
    out = Tensor(raw, check=False)
    return _emit(out, ((x, lambda g, x=x, raw=raw: vjp(g, x.data, raw)),))


def neg(x) -> Tensor:
    return _unary("neg", x, lambda v: -v, lambda g, v, o: -g)


def exp(x) -> Tensor:
    return _unary("exp", x, np.exp, lambda g, v, o: g * o)


def log(x) -> Tensor:
    return _unary("log", x, np.log, lambda g, v, o: g / v)


def tanh(x) -> Tensor:
    return _unary("tanh", x, np.tanh, lambda g, v, o: g * (1.0 - o * o))


def matmul(a, b) -> Tensor:
    """Strict 2-D matrix product; backward is G @ B^T and A^T @ G."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} vs {b.shape}")
    raw = a.data @ b.data
    _check_finite(raw, "matmul")
    out = Tensor(raw, check=False)
    return _emit(
        out,
        (
            (a, lambda g, b=b: g @ b.data.T),
            (b, lambda g, a=a: a.data.T @ g),
        ),
    )


def transpose(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"transpose needs a 2-D tensor, got {x.shape}")
    out = Tensor(x.data.T, check=False)
    return _emit(out, ((x, lambda g: g.T),))


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    try:
        raw = x.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}") from e
    out = Tensor(raw, check=False)
    return _emit(out, ((x, lambda g, s=x.shape: g.reshape(s)),))


def sum_(x, axis: int | None = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    raw = x.data.sum(axis=axis, keepdims=keepdims)
    _check_finite(np.asarray(raw), "sum")
    out = Tensor(raw, check=False)

    def vjp(g, x=x, axis=axis, keepdims=keepdims):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, x.shape).copy()

    return _emit(out, ((x, vjp),))


def mean(x, axis: int | None = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if x.size == 0:
        raise DimensionError("mean of an empty tensor")
    n = x.size if axis is None else x.shape[axis]
    raw = x.data.mean(axis=axis, keepdims=keepdims)
    _check_finite(np.asarray(raw), "mean")
    out = Tensor(raw, check=False)

    def vjp(g, x=x, axis=axis, keepdims=keepdims, n=n):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, x.shape) / n

    return _emit(out, ((x, vjp),))


def softmax(x, axis: int = -1) -> Tensor:
    """Max-subtraction stabilized softmax along one axis."""
    x = as_tensor(x)
    if x.size == 0 or x.shape[axis] == 0:
        raise DimensionError("softmax over an empty axis")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    raw = e / e.sum(axis=axis, keepdims=True)
    _check_finite(raw, "softmax")
    out = Tensor(raw, check=False)

    def vjp(g, raw=raw, axis=axis):
        inner = (g * raw).sum(axis=axis, keepdims=True)
        return (g - inner) * raw

    return _emit(out, ((x, vjp),))


def layernorm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the affine (gamma, beta).

    Accepts a vector or a matrix of row vectors; statistics are per row and
    use the population variance.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if eps <= 0.0:
        raise DomainError("layernorm eps must be > 0")
    d = x.shape[-1] if x.ndim else 0
    if d < 1:
        raise DimensionError("layernorm needs a non-empty last axis")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layernorm affine shapes {gamma.shape}/{beta.shape} do not match width {d}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    raw = xhat * gamma.data + beta.data
    _check_finite(raw, "layernorm")
    out = Tensor(raw, check=False)

    def vjp_x(g, gamma=gamma, xhat=xhat, inv=inv):
        dxhat = g * gamma.data
        return (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        ) * inv

    def vjp_gamma(g, xhat=xhat, d=d):
        return (g * xhat).reshape(-1, d).sum(axis=0)

    def vjp_beta(g, d=d):
        return g.reshape(-1, d).sum(axis=0)

    return _emit(out, ((x, vjp_x), (gamma, vjp_gamma), (beta, vjp_beta)))


def l2_normalize(x) -> Tensor:
    """Scale a vector to unit Euclidean norm; zero input is an error."""
    x = as_tensor(x)
    if x.ndim != 1:
        raise DimensionError(f"l2_normalize needs a 1-D tensor, got {x.shape}")
    norm = float(np.linalg.norm(x.data))
    if norm == 0.0:
        raise DegenerateInputError("cannot normalize a zero vector")
    raw = x.data / norm
    _check_finite(raw, "l2_normalize")
    out = Tensor(raw, check=False)

    def vjp(g, raw=raw, norm=norm):
        return (g - raw * (raw @ g)) / norm

    return _emit(out, ((x, vjp),))


def l2_normalize_rows(x) -> Tensor:
    """Row-wise unit normalization of a matrix; any zero row is an error."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"l2_normalize_rows needs a 2-D tensor, got {x.shape}")
    norms = np.linalg.norm(x.data, axis=1, keepdims=True)
    zero = np.flatnonzero(norms.ravel() == 0.0)
    if zero.size:
        raise DegenerateInputError(f"cannot normalize zero row {int(zero[0])}")
    raw = x.data / norms
    _check_finite(raw, "l2_normalize_rows")
    out = Tensor(raw, check=False)

    def vjp(g, raw=raw, norms=norms):
        inner = (g * raw).sum(axis=1, keepdims=True)
        return (g - raw * inner) / norms

    return _emit(out, ((x, vjp),))


def cosine_sim(a, b) -> Tensor:
    """Cosine similarity of two vectors as a scalar tensor."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise DimensionError(f"cosine_sim needs equal-length vectors, got {a.shape}, {b.shape}")
    na = float(np.linalg.norm(a.data))
    nb = float(np.linalg.norm(b.data))
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine similarity of a zero vector")
    ah, bh = a.data / na, b.data / nb
    c = float(ah @ bh)
    out = Tensor(c, check=False)
    return _emit(
        out,
        (
            (a, lambda g, bh=bh, ah=ah, c=c, na=na: g * (bh - c * ah) / na),
            (b, lambda g, ah=ah, bh=bh, c=c, nb=nb: g * (ah - c * bh) / nb),
        ),
    )


def gather_rows(table, indices) -> Tensor:
    """Select rows of a 2-D table; backward scatter-adds into the table."""
    table = as_tensor(table)
    if table.ndim != 2:
        raise DimensionError(f"gather_rows needs a 2-D table, got {table.shape}")
    idx = np.asarray(indices)
    if idx.ndim != 1 or not np.issubdtype(idx.dtype, np.integer):
        raise DimensionError("gather_rows needs a 1-D integer index array")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise DimensionError("gather_rows index out of range")
    out = Tensor(table.data[idx], check=False)

    def vjp(g, table=table, idx=idx):
        acc = np.zeros(table.shape, dtype=np.float64)
        np.add.at(acc, idx, g)
        return acc

    return _emit(out, ((table, vjp),))


def slice_rows(x, start: int, stop: int) -> Tensor:
    """Contiguous row slice [start, stop); backward zero-pads the complement."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"slice_rows needs a 2-D tensor, got {x.shape}")
    if not (0 <= start < stop <= x.shape[0]):
        raise DimensionError(f"slice_rows range [{start}, {stop}) invalid for {x.shape}")
    out = Tensor(x.data[start:stop], check=False)

    def vjp(g, x=x, start=start, stop=stop):
        acc = np.zeros(x.shape, dtype=np.float64)
        acc[start:stop] = g
        return acc

    return _emit(out, ((x, vjp),))


def stack_rows(parts: Sequence) -> Tensor:
    """Stack vectors (or 1-row matrices) into a matrix of rows."""
    ts = [as_tensor(p) for p in parts]
    if not ts:
        raise DimensionError("stack_rows of an empty sequence")
    rows = []
    for t in ts:
        if t.ndim == 1:
            rows.append(t.data)
        elif t.ndim == 2 and t.shape[0] == 1:
            rows.append(t.data[0])
        else:
            raise DimensionError(f"stack_rows part has shape {t.shape}")
    width = rows[0].shape[0]
    if any(r.shape[0] != width for r in rows):
        raise DimensionError("stack_rows parts differ in width")
    out = Tensor(np.stack(rows), check=False)
    pairs = []
    for i, t in enumerate(ts):
        pairs.append((t, lambda g, i=i, s=t.shape: g[i].reshape(s)))
    return _emit(out, tuple(pairs))


def tile_rows(x, reps: int) -> Tensor:
    """Repeat a matrix ``reps`` times along axis 0; backward sums the blocks."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"tile_rows needs a 2-D tensor, got {x.shape}")
    if reps < 1:
        raise DimensionError("tile_rows needs reps >= 1")
    out = Tensor(np.tile(x.data, (reps, 1)), check=False)

    def vjp(g, x=x, reps=reps):
        return g.reshape(reps, x.shape[0], x.shape[1]).sum(axis=0)

    return _emit(out, ((x, vjp),))


def backward(tape: GradientTape, loss: Tensor) -> dict[str, np.ndarray]:
    """Reverse sweep over the tape; returns gradients keyed by watched name.

    The sweep walks the records once, in reverse execution order. Watched
    parameters that never fed the loss come back as exact zeros.
    """
    if not isinstance(tape, GradientTape):
        raise ContractError("backward needs a GradientTape")
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise ContractError("backward needs a scalar loss tensor")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, pairs in reversed(tape._records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for src, vjp in pairs:
            contrib = vjp(g)
            _check_finite(contrib, "backward")
            prev = grads.get(id(src))
            if prev is None:
                grads[id(src)] = np.array(contrib, dtype=np.float64)
            else:
                prev += contrib
    result: dict[str, np.ndarray] = {}
    for name, t in tape._watched.items():
        g = grads.get(id(t))
        result[name] = np.zeros(t.shape) if g is None else np.asarray(g)
    return result


def finite_diff_check(f: Callable[[Tensor], Tensor], theta, h: float = 1e-5) -> float:
    """Compare the tape gradient of ``f`` against central finite differences.

    ``f`` must map one tensor to a scalar tensor using ops from this module.
    Returns max over coordinates of
    ``|analytic - numeric| / max(1, |analytic|)``; the numeric side uses
    ``(f(theta + h e_i) - f(theta - h e_i)) / 2h`` on value-only forwards, so
    the check shares the forward path and exercises only the backward rules.
    """
    theta = as_tensor(theta)
    if h <= 0.0:
        raise DomainError("finite_diff_check step must be > 0")
    with GradientTape() as tape:
        watched = Tensor(theta.data)
        tape.watch(watched, "theta")
        loss = f(watched)
    if loss.size != 1:
        raise ContractError("finite_diff_check needs a scalar-valued function")
    analytic = backward(tape, loss)["theta"].ravel()

    base = theta.data.ravel()
    worst = 0.0
    for i in range(base.size):
        bumped = base.copy()
        bumped[i] = base[i] + h
        hi = f(Tensor(bumped.reshape(theta.shape))).item()
        bumped[i] = base[i] - h
        lo = f(Tensor(bumped.reshape(theta.shape))).item()
        numeric = (hi - lo) / (2.0 * h)
        err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
        if err > worst:
            worst = err
    return worst
