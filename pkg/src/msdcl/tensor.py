"""Dense float64 tensors with reverse-mode automatic differentiation.

A Tape records operations in execution order, so the record list is
topologically sorted by construction. backward() walks the records once
in reverse, propagating gradients locally, and accumulates the result
into the tape's persistent grad store; calling backward repeatedly on
the same tape therefore adds gradients, which is the contract gradient
accumulation relies on.

Values are plain NumPy arrays. Constants (off-tape tensors) flow through
the same operations without being recorded. Every forward op verifies
its output is finite, so overflow surfaces as NonFiniteError instead of
propagating Inf/NaN.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import _kernels as K
from .errors import (
    DegenerateRowError,
    DistributionError,
    MsdclError,
    NonFiniteError,
    ParameterError,
    ShapeError,
)

Array = np.ndarray


def _as_array(x) -> Array:
    return np.asarray(x, dtype=np.float64)


class Tensor:
    """A float64 array, optionally tracked on a tape."""

    __slots__ = ("value", "tape", "node_id")

    def __init__(self, value, tape: "Tape | None" = None, node_id: int | None = None):
        self.value = _as_array(value)
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def data(self) -> Array:
        """Flat row-major view of the underlying storage."""
        return self.value.reshape(-1)

    @property
    def requires_grad(self) -> bool:
        return self.tape is not None

    def item(self) -> float:
        if self.value.size != 1:
            raise ShapeError("item() requires a single-element tensor")
        return float(self.value)

    def __repr__(self) -> str:
        tag = "" if self.tape is None else f", node={self.node_id}"
        return f"Tensor(shape={self.shape}{tag})"


class _Record:
    __slots__ = ("op", "out_id", "parent_ids", "backward_fn")

    def __init__(self, op: str, out_id: int, parent_ids: tuple[int, ...], backward_fn):
        self.op = op
        self.out_id = out_id
        self.parent_ids = parent_ids
        self.backward_fn = backward_fn


class Tape:
    """Ordered op records plus a grad store keyed by node id.

    A tape and its tensors form a single-owner unit: no concurrent
    mutation. An optional ledger (duck-typed: _add/_remove methods)
    is told how many gradient-tracked scalars each recorded output
    holds; close() releases them all.
    """

    def __init__(self, ledger=None):
        self._records: list[_Record] = []
        self.grads: dict[int, Array] = {}
        self._next_id = 0
        self._ledger = ledger
        self._tracked = 0
        self._closed = False

    def _fresh_id(self) -> int:
        nid = self._next_id
        self._next_id += 1
        return nid

    def leaf(self, value) -> Tensor:
        """Register a gradient-tracked leaf holding (a view of) ``value``."""
        arr = value.value if isinstance(value, Tensor) else _as_array(value)
        return Tensor(arr, tape=self, node_id=self._fresh_id())

    def _record(self, op: str, value: Array, parents: tuple[int, ...], backward_fn) -> Tensor:
        if self._closed:
            raise MsdclError("cannot record on a closed tape")
        out = Tensor(value, tape=self, node_id=self._fresh_id())
        self._records.append(_Record(op, out.node_id, parents, backward_fn))
        if self._ledger is not None:
            self._ledger._add(value.size)
            self._tracked += value.size
        return out

    def backward(self, loss: Tensor) -> dict[int, Array]:
        """Reverse sweep from a scalar loss; accumulates into the grad store."""
        if loss.tape is not self:
            raise ParameterError("loss is not on this tape")
        if loss.value.ndim != 0:
            raise ShapeError(f"backward expects a scalar loss, got shape {loss.shape}")
        flowing: dict[int, Array] = {loss.node_id: np.ones((), dtype=np.float64)}
        for rec in reversed(self._records):
            g = flowing.pop(rec.out_id, None)
            if g is None:
                continue
            for pid, contrib in rec.backward_fn(g):
                prev = flowing.get(pid)
                flowing[pid] = contrib if prev is None else prev + contrib
        # Whatever was not a record output is a leaf; fold into the store.
        for nid, g in flowing.items():
            prev = self.grads.get(nid)
            self.grads[nid] = g if prev is None else prev + g
        return self.grads

    def grad(self, t: Tensor) -> Array:
        """Accumulated gradient of a leaf (zeros if the loss never reached it)."""
        if t.tape is not self:
            raise ParameterError("tensor does not live on this tape")
        g = self.grads.get(t.node_id)
        return np.zeros_like(t.value) if g is None else g

    def close(self) -> None:
        """Drop the records and release tracked activations from the ledger."""
        if self._closed:
            return
        self._closed = True
        self._records.clear()
        if self._ledger is not None:
            self._ledger._remove(self._tracked)
            self._tracked = 0

    def __enter__(self) -> "Tape":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def backward(loss: Tensor) -> dict[int, Array]:
    """Module-level alias: run the reverse sweep on the loss's tape."""
    if loss.tape is None:
        raise ParameterError("loss is not on a tape")
    return loss.tape.backward(loss)


# ---------------------------------------------------------------------------
# op plumbing


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(*tensors: Tensor) -> Tape | None:
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise ParameterError("operands live on different tapes")
    return tape


def _ensure_finite(value: Array, op: str) -> None:
    if not np.isfinite(value).all():
        raise NonFiniteError(f"{op} produced a non-finite value")


def _contig(g: Array) -> Array:
    return np.ascontiguousarray(g)


def _parent_ids(*tensors: Tensor) -> tuple[int, ...]:
    return tuple(t.node_id for t in tensors if t.tape is not None)


# ---------------------------------------------------------------------------
# operations


def matmul(a, b) -> Tensor:
    """Matrix product of two rank-2 tensors."""
    a, b = _coerce(a), _coerce(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ShapeError("matmul expects rank-2 operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    out = a.value @ b.value
    _ensure_finite(out, "matmul")
    tape = _tape_of(a, b)
    if tape is None:
        return Tensor(out)
    av, bv = a.value, b.value

    def bw(g: Array):
        contribs = []
        if a.tape is not None:
            contribs.append((a.node_id, g @ bv.T))
        if b.tape is not None:
            contribs.append((b.node_id, av.T @ g))
        return contribs

    return tape._record("matmul", out, _parent_ids(a, b), bw)


def transpose(t) -> Tensor:
    t = _coerce(t)
    if t.value.ndim != 2:
        raise ShapeError("transpose expects a rank-2 tensor")
    out = np.ascontiguousarray(t.value.T)
    if t.tape is None:
        return Tensor(out)
    return t.tape._record(
        "transpose", out, (t.node_id,), lambda g: [(t.node_id, np.ascontiguousarray(g.T))]
    )


def _elementwise_binary(op: str, a, b, fwd, bw_a, bw_b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.shape != b.shape:
        raise ShapeError(f"{op} expects equal shapes, got {a.shape} and {b.shape}")
    out = fwd(a.value, b.value)
    _ensure_finite(out, op)
    tape = _tape_of(a, b)
    if tape is None:
        return Tensor(out)

    def bw(g: Array):
        contribs = []
        if a.tape is not None:
            contribs.append((a.node_id, bw_a(g, a.value, b.value)))
        if b.tape is not None:
            contribs.append((b.node_id, bw_b(g, a.value, b.value)))
        return contribs

    return tape._record(op, out, _parent_ids(a, b), bw)


def add(a, b) -> Tensor:
    return _elementwise_binary("add", a, b, np.add, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Tensor:
    return _elementwise_binary("sub", a, b, np.subtract, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Tensor:
    return _elementwise_binary(
        "mul", a, b, np.multiply, lambda g, x, y: g * y, lambda g, x, y: g * x
    )


def scale(t, c: float) -> Tensor:
    """Multiply by a Python float."""
    t = _coerce(t)
    c = float(c)
    out = t.value * c
    _ensure_finite(out, "scale")
    if t.tape is None:
        return Tensor(out)
    return t.tape._record("scale", out, (t.node_id,), lambda g: [(t.node_id, g * c)])


def neg(t) -> Tensor:
    return scale(t, -1.0)


def add_row_bias(x, bias) -> Tensor:
    """Add a length-d bias vector to every row of an m-by-d tensor."""
    x, bias = _coerce(x), _coerce(bias)
    if x.value.ndim != 2 or bias.value.ndim != 1 or bias.shape[0] != x.shape[1]:
        raise ShapeError(f"add_row_bias: incompatible shapes {x.shape} and {bias.shape}")
    out = x.value + bias.value
    _ensure_finite(out, "add_row_bias")
    tape = _tape_of(x, bias)
    if tape is None:
        return Tensor(out)

    def bw(g: Array):
        contribs = []
        if x.tape is not None:
            contribs.append((x.node_id, g))
        if bias.tape is not None:
            contribs.append((bias.node_id, g.sum(axis=0)))
        return contribs

    return tape._record("add_row_bias", out, _parent_ids(x, bias), bw)


def _elementwise_unary(op: str, t, fwd, bw_fn) -> Tensor:
    t = _coerce(t)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        out = fwd(t.value)
    _ensure_finite(out, op)
    if t.tape is None:
        return Tensor(out)
    xv = t.value
    return t.tape._record(op, out, (t.node_id,), lambda g: [(t.node_id, bw_fn(g, xv, out))])


def tanh(t) -> Tensor:
    return _elementwise_unary("tanh", t, np.tanh, lambda g, x, y: g * (1.0 - y * y))


def relu(t) -> Tensor:
    return _elementwise_unary(
        "relu", t, lambda x: np.maximum(x, 0.0), lambda g, x, y: g * (x > 0.0)
    )


def exp(t) -> Tensor:
    return _elementwise_unary("exp", t, np.exp, lambda g, x, y: g * y)


def log(t) -> Tensor:
    return _elementwise_unary("log", t, np.log, lambda g, x, y: g / x)


def sum_all(t) -> Tensor:
    t = _coerce(t)
    out = np.asarray(t.value.sum())
    _ensure_finite(out, "sum_all")
    if t.tape is None:
        return Tensor(out)
    shape = t.value.shape
    return t.tape._record(
        "sum_all", out, (t.node_id,), lambda g: [(t.node_id, np.full(shape, float(g)))]
    )


def mean(t) -> Tensor:
    t = _coerce(t)
    out = np.asarray(t.value.mean())
    _ensure_finite(out, "mean")
    if t.tape is None:
        return Tensor(out)
    shape, n = t.value.shape, t.value.size
    return t.tape._record(
        "mean", out, (t.node_id,), lambda g: [(t.node_id, np.full(shape, float(g) / n))]
    )


def concat_rows(parts: Sequence) -> Tensor:
    """Stack rank-2 tensors along rows."""
    parts = [_coerce(p) for p in parts]
    if not parts:
        raise ShapeError("concat_rows needs at least one part")
    cols = parts[0].shape[1] if parts[0].value.ndim == 2 else None
    for p in parts:
        if p.value.ndim != 2 or p.shape[1] != cols:
            raise ShapeError("concat_rows expects rank-2 parts with equal column counts")
    out = np.concatenate([p.value for p in parts], axis=0)
    _ensure_finite(out, "concat_rows")
    tape = _tape_of(*parts)
    if tape is None:
        return Tensor(out)
    offsets = np.cumsum([0] + [p.shape[0] for p in parts])

    def bw(g: Array):
        return [
            (p.node_id, g[offsets[i] : offsets[i + 1]])
            for i, p in enumerate(parts)
            if p.tape is not None
        ]

    return tape._record("concat_rows", out, _parent_ids(*parts), bw)


def take_per_row(t, indices) -> Tensor:
    """out[i] = t[i, indices[i]]; returns a length-m tensor."""
    t = _coerce(t)
    idx = np.asarray(indices, dtype=np.int64)
    if t.value.ndim != 2 or idx.ndim != 1 or idx.shape[0] != t.shape[0]:
        raise ShapeError("take_per_row expects a rank-2 tensor and one index per row")
    if idx.size and (idx.min() < 0 or idx.max() >= t.shape[1]):
        raise IndexError("take_per_row: column index out of range")
    rows = np.arange(t.shape[0])
    out = t.value[rows, idx]
    if t.tape is None:
        return Tensor(out)
    shape = t.value.shape

    def bw(g: Array):
        gz = np.zeros(shape)
        gz[rows, idx] = g
        return [(t.node_id, gz)]

    return t.tape._record("take_per_row", out, (t.node_id,), bw)


def row_l2_normalize(t) -> Tensor:
    """Scale each row to unit Euclidean norm."""
    t = _coerce(t)
    if t.value.ndim != 2:
        raise ShapeError("row_l2_normalize expects a rank-2 tensor")
    norms = K.row_l2_norms(t.value)
    if norms.min(initial=np.inf) <= 1e-12:
        raise DegenerateRowError("row with near-zero norm cannot be normalized")
    out = t.value / norms[:, None]
    _ensure_finite(out, "row_l2_normalize")
    if t.tape is None:
        return Tensor(out)

    def bw(g: Array):
        return [(t.node_id, K.row_l2_normalize_grad(out, norms, _contig(g)))]

    return t.tape._record("row_l2_normalize", out, (t.node_id,), bw)


def _tau_value(temperature) -> float:
    tau = float(temperature.value) if isinstance(temperature, Tensor) else float(temperature)
    if not np.isfinite(tau) or tau <= 0.0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    return tau


def _softmax_family(op: str, logits, temperature, fwd_kernel, grad_kernel) -> Tensor:
    logits = _coerce(logits)
    if logits.value.ndim != 2:
        raise ShapeError(f"{op} expects rank-2 logits")
    tau = _tau_value(temperature)
    out = fwd_kernel(logits.value, tau)
    _ensure_finite(out, op)
    tau_t = temperature if isinstance(temperature, Tensor) else None
    tape = _tape_of(*(t for t in (logits, tau_t) if t is not None))
    if tape is None:
        return Tensor(out)
    lv = logits.value

    def bw(g: Array):
        gz = grad_kernel(out, _contig(g))
        contribs = []
        if logits.tape is not None:
            contribs.append((logits.node_id, gz / tau))
        if tau_t is not None and tau_t.tape is not None:
            # d(logits/tau)/dtau = -logits/tau^2
            contribs.append((tau_t.node_id, np.asarray(-(gz * lv).sum() / (tau * tau))))
        return contribs

    parents = _parent_ids(*(t for t in (logits, tau_t) if t is not None))
    return tape._record(op, out, parents, bw)


def scaled_softmax_rows(logits, temperature) -> Tensor:
    """Row-wise softmax(logits / temperature); rows sum to one.

    ``temperature`` may be a float or a scalar tensor; in the latter case
    the gradient also flows into the temperature.
    """
    return _softmax_family(
        "scaled_softmax_rows", logits, temperature, K.row_softmax, K.softmax_grad_z
    )


def scaled_log_softmax_rows(logits, temperature) -> Tensor:
    """Row-wise log softmax(logits / temperature); numerically safe log-probs."""
    return _softmax_family(
        "scaled_log_softmax_rows", logits, temperature, K.row_log_softmax, K.log_softmax_grad_z
    )


def kl_divergence(p, log_q) -> Tensor:
    """Mean over rows of KL(p || q) given constant p and log-probabilities log_q.

    p must be detached (a plain array or an off-tape tensor); the gradient
    flows through log_q only. The 0*log 0 := 0 convention applies.
    """
    if isinstance(p, Tensor):
        if p.tape is not None:
            raise ParameterError("teacher distribution p must be detached (off-tape)")
        p = p.value
    p = _as_array(p)
    log_q = _coerce(log_q)
    if p.ndim != 2 or p.shape != log_q.shape:
        raise ShapeError(f"kl_divergence expects matching rank-2 shapes, got {p.shape} and {log_q.shape}")
    row_sums = p.sum(axis=1)
    if p.min() < 0.0 or np.abs(row_sums - 1.0).max() > 1e-9:
        raise DistributionError("teacher rows must be probability vectors summing to 1")
    out = np.asarray(K.kl_rows_mean(p, _contig(log_q.value)))
    _ensure_finite(out, "kl_divergence")
    if log_q.tape is None:
        return Tensor(out)
    rows = p.shape[0]

    def bw(g: Array):
        return [(log_q.node_id, (-float(g) / rows) * p)]

    return log_q.tape._record("kl_divergence", out, (log_q.node_id,), bw)


def detach(t) -> Tensor:
    """Value-equal tensor off any tape."""
    t = _coerce(t)
    return Tensor(t.value)


def finite_diff_grad(f: Callable[[list[Array]], float], params: Sequence[Array], eps: float) -> list[Array]:
    """Central-difference gradient estimate of a scalar objective.

    ``f`` must be deterministic and read the parameter list fresh on every
    call; coordinates are perturbed in place and restored.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ParameterError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    params = [_as_array(p).copy() for p in params]
    grads = []
    for p in params:
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(params))
            flat[i] = orig - eps
            fm = float(f(params))
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError("finite_diff_grad: objective returned a non-finite value")
            gflat[i] = (fp - fm) / (2.0 * eps)
        grads.append(g)
    return grads
