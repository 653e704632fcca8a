"""Dense 2-D float32 values with tape-based reverse-mode differentiation.

The pieces are deliberately small: a :class:`Matrix` is a 2-D float32 array
treated as an immutable value once an operation returns it, a :class:`Tape`
records every primitive applied to tracked operands while it is active, and
``Tape.backward`` walks the recording once in reverse to fill in parameter
gradients. Dot products and reductions accumulate in float64; results are
stored as float32.

A tape is single-threaded and never shared; independent tapes may run
concurrently on different threads (one per simulated client). Operations
executed with no active tape just compute values, which is how evaluation
paths avoid bookkeeping.
"""

from __future__ import annotations

import threading

import numpy as np

__all__ = [
    "Matrix",
    "Tape",
    "ShapeMismatch",
    "matmul",
    "transpose",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "scalar_mul",
    "add_bias",
    "relu",
    "sigmoid",
    "log_sigmoid",
    "exp",
    "softmax_rows",
    "normalize_rows",
    "cross_entropy",
    "sum_all",
    "mean_all",
    "concat_cols",
    "gather_rows",
    "straight_through",
    "AdamState",
    "sgd_step",
    "adam_step",
    "zero_grad",
]


class ShapeMismatch(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class Matrix:
    """A nonempty rows x cols float32 value.

    ``requires_grad=True`` marks a leaf parameter: after ``Tape.backward``
    its ``grad`` holds the accumulated float64 gradient.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.asarray(values, dtype=np.float32)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2 or arr.size == 0:
            raise ShapeMismatch(f"Matrix requires a nonempty 2-D value, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("Matrix entries must be finite")
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad = None
        self._tape = None

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.shape != (1, 1):
            raise ShapeMismatch(f"item() needs a 1x1 matrix, got {self.shape}")
        return float(self.data[0, 0])

    def copy(self) -> "Matrix":
        return Matrix(self.data.copy(), requires_grad=self.requires_grad)

    def __array__(self, dtype=None):
        return self.data if dtype is None else self.data.astype(dtype)

    def __repr__(self) -> str:
        return f"Matrix({self.rows}x{self.cols}, requires_grad={self.requires_grad})"

    # Operator sugar over the module-level primitives.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return scale(self, float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


_TLS = threading.local()


def _active_tape():
    return getattr(_TLS, "tape", None)


class Tape:
    """Recording of one forward pass, consumed by a single backward call.

    Nodes are appended in execution order, which is already topological, so
    the backward walk is a single reversed scan. A tape is rebuilt for every
    forward pass; calling :meth:`backward` twice is rejected.
    """

    def __init__(self):
        self._nodes: list[tuple] = []
        self._consumed = False
        # id(param) -> number of grad writes in the last backward (should be 1)
        self.write_counts: dict[int, int] = {}

    def __enter__(self) -> "Tape":
        if _active_tape() is not None:
            raise RuntimeError("a Tape is already active on this thread")
        _TLS.tape = self
        return self

    def __exit__(self, *exc):
        _TLS.tape = None
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    def _tracks(self, m: Matrix) -> bool:
        return m.requires_grad or m._tape is self

    def _record(self, inputs: tuple, out: Matrix, backward) -> None:
        self._nodes.append((inputs, out, backward))
        out._tape = self

    def backward(self, loss: Matrix) -> None:
        """Seed d(loss)/d(loss)=1 and accumulate grads into tracked leaves."""
        if self._consumed:
            raise RuntimeError("tape already consumed; build a new Tape per forward pass")
        if not isinstance(loss, Matrix) or loss.shape != (1, 1):
            shape = loss.shape if isinstance(loss, Matrix) else type(loss)
            raise ValueError(f"backward root must be a 1x1 scalar Matrix, got {shape}")
        if loss._tape is not self:
            raise ValueError("loss was not produced under this tape")
        self._consumed = True

        pending: dict[int, np.ndarray] = {id(loss): np.ones((1, 1), dtype=np.float64)}
        holders: dict[int, Matrix] = {id(loss): loss}
        for inputs, out, backward in reversed(self._nodes):
            g = pending.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, backward(g)):
                if gi is None or not self._tracks(inp):
                    continue
                key = id(inp)
                if key in pending:
                    pending[key] = pending[key] + gi
                else:
                    pending[key] = np.asarray(gi, dtype=np.float64)
                    holders[key] = inp

        self.write_counts = {}
        for key, g in pending.items():
            m = holders[key]
            if not m.requires_grad:
                continue
            m.grad = g if m.grad is None else m.grad + g
            self.write_counts[key] = self.write_counts.get(key, 0) + 1


def _as_matrix(x) -> Matrix:
    return x if isinstance(x, Matrix) else Matrix(x)


def _f64(m: Matrix) -> np.ndarray:
    return m.data.astype(np.float64)


def _emit(inputs: tuple[Matrix, ...], out_data, backward) -> Matrix:
    """Wrap an op result and record it if any input is tracked."""
    out = Matrix(out_data)
    tape = _active_tape()
    if tape is not None and any(tape._tracks(x) for x in inputs):
        tape._record(inputs, out, backward)
    return out


def matmul(a, b) -> Matrix:
    """Matrix product with float64 accumulation."""
    a, b = _as_matrix(a), _as_matrix(b)
    if a.cols != b.rows:
        raise ShapeMismatch(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    a64, b64 = _f64(a), _f64(b)

    def backward(g):
        return g @ b64.T, a64.T @ g

    return _emit((a, b), a64 @ b64, backward)


def transpose(x) -> Matrix:
    x = _as_matrix(x)

    def backward(g):
        return (g.T,)

    return _emit((x,), x.data.T, backward)


def add(a, b) -> Matrix:
    a, b = _as_matrix(a), _as_matrix(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"add: shapes differ, {a.shape} vs {b.shape}")

    def backward(g):
        return g, g

    return _emit((a, b), _f64(a) + _f64(b), backward)


def sub(a, b) -> Matrix:
    a, b = _as_matrix(a), _as_matrix(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"sub: shapes differ, {a.shape} vs {b.shape}")

    def backward(g):
        return g, -g

    return _emit((a, b), _f64(a) - _f64(b), backward)


def mul(a, b) -> Matrix:
    """Elementwise product."""
    a, b = _as_matrix(a), _as_matrix(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"mul: shapes differ, {a.shape} vs {b.shape}")
    a64, b64 = _f64(a), _f64(b)

    def backward(g):
        return g * b64, g * a64

    return _emit((a, b), a64 * b64, backward)


def neg(x) -> Matrix:
    x = _as_matrix(x)

    def backward(g):
        return (-g,)

    return _emit((x,), -x.data, backward)


def scale(x, c: float) -> Matrix:
    """Multiply by a plain (untracked) scalar constant."""
    x = _as_matrix(x)
    c = float(c)

    def backward(g):
        return (g * c,)

    return _emit((x,), _f64(x) * c, backward)


def scalar_mul(x, s) -> Matrix:
    """Multiply every entry of ``x`` by a tracked 1x1 scalar ``s``."""
    x, s = _as_matrix(x), _as_matrix(s)
    if s.shape != (1, 1):
        raise ShapeMismatch(f"scalar_mul: scale must be 1x1, got {s.shape}")
    x64 = _f64(x)
    s_val = float(s.data[0, 0])

    def backward(g):
        return g * s_val, np.array([[np.sum(g * x64)]])

    return _emit((x, s), x64 * s_val, backward)


def add_bias(x, b) -> Matrix:
    """Add a 1 x cols bias row to every row of ``x``."""
    x, b = _as_matrix(x), _as_matrix(b)
    if b.rows != 1 or b.cols != x.cols:
        raise ShapeMismatch(f"add_bias: bias must be 1x{x.cols}, got {b.shape}")

    def backward(g):
        return g, g.sum(axis=0, keepdims=True)

    return _emit((x, b), _f64(x) + _f64(b), backward)


def relu(x) -> Matrix:
    x = _as_matrix(x)
    mask = x.data > 0  # subgradient at exactly 0 is 0

    def backward(g):
        return (g * mask,)

    return _emit((x,), np.where(mask, x.data, np.float32(0.0)), backward)


def _sigmoid64(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid(x) -> Matrix:
    x = _as_matrix(x)
    s = _sigmoid64(_f64(x))

    def backward(g):
        return (g * s * (1.0 - s),)

    return _emit((x,), s, backward)


def log_sigmoid(x) -> Matrix:
    """Numerically stable log(sigmoid(x)) = -softplus(-x)."""
    x = _as_matrix(x)
    v = _f64(x)
    out = np.where(v >= 0, -np.log1p(np.exp(-np.abs(v))), v - np.log1p(np.exp(-np.abs(v))))
    sneg = _sigmoid64(-v)

    def backward(g):
        return (g * sneg,)

    return _emit((x,), out, backward)


def exp(x) -> Matrix:
    x = _as_matrix(x)
    e = np.exp(_f64(x))

    def backward(g):
        return (g * e,)

    return _emit((x,), e, backward)


def softmax_rows(x) -> Matrix:
    """Row-wise softmax with per-row max subtraction."""
    x = _as_matrix(x)
    v = _f64(x)
    v = v - v.max(axis=1, keepdims=True)
    e = np.exp(v)
    s = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        dot = (g * s).sum(axis=1, keepdims=True)
        return (s * (g - dot),)

    return _emit((x,), s, backward)


def normalize_rows(x) -> Matrix:
    """Scale each row to unit L2 norm; zero rows are rejected by index."""
    x = _as_matrix(x)
    v = _f64(x)
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    bad = np.flatnonzero(norms.ravel() < 1e-12)
    if bad.size:
        raise ValueError(f"normalize_rows: row {bad[0]} has zero norm (degenerate embedding)")
    y = v / norms

    def backward(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return ((g - y * dot) / norms,)

    return _emit((x,), y, backward)


def cross_entropy(logits, labels) -> Matrix:
    """Mean over rows of -log softmax(logits)[label]; returns a 1x1 scalar."""
    logits = _as_matrix(logits)
    lab = np.asarray(labels)
    if lab.ndim != 1 or lab.shape[0] != logits.rows:
        raise ShapeMismatch(
            f"cross_entropy: need one label per row, got {lab.shape} for {logits.rows} rows"
        )
    if not np.issubdtype(lab.dtype, np.integer):
        raise ValueError("cross_entropy: labels must be integers")
    if lab.min(initial=0) < 0 or lab.max(initial=0) >= logits.cols:
        bad = lab[(lab < 0) | (lab >= logits.cols)][0]
        raise ValueError(f"cross_entropy: label {bad} out of range [0, {logits.cols})")
    v = _f64(logits)
    v = v - v.max(axis=1, keepdims=True)
    e = np.exp(v)
    p = e / e.sum(axis=1, keepdims=True)
    n = logits.rows
    loss = -np.log(p[np.arange(n), lab]).mean()

    def backward(g):
        d = p.copy()
        d[np.arange(n), lab] -= 1.0
        return (g[0, 0] * d / n,)

    return _emit((logits,), np.array([[loss]]), backward)


def sum_all(x) -> Matrix:
    x = _as_matrix(x)
    shape = x.shape

    def backward(g):
        return (np.full(shape, g[0, 0], dtype=np.float64),)

    return _emit((x,), np.array([[_f64(x).sum()]]), backward)


def mean_all(x) -> Matrix:
    x = _as_matrix(x)
    n = x.data.size
    shape = x.shape

    def backward(g):
        return (np.full(shape, g[0, 0] / n, dtype=np.float64),)

    return _emit((x,), np.array([[_f64(x).mean()]]), backward)


def concat_cols(a, b) -> Matrix:
    a, b = _as_matrix(a), _as_matrix(b)
    if a.rows != b.rows:
        raise ShapeMismatch(f"concat_cols: row counts differ, {a.shape} vs {b.shape}")
    split = a.cols

    def backward(g):
        return g[:, :split], g[:, split:]

    return _emit((a, b), np.hstack([a.data, b.data]), backward)


def gather_rows(x, indices) -> Matrix:
    x = _as_matrix(x)
    idx = np.asarray(indices)
    if idx.ndim != 1 or not np.issubdtype(idx.dtype, np.integer):
        raise ValueError("gather_rows: indices must be a 1-D integer array")
    if idx.size == 0 or idx.min() < 0 or idx.max() >= x.rows:
        raise ValueError(f"gather_rows: indices out of range [0, {x.rows})")
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape, dtype=np.float64)
        np.add.at(gx, idx, g)
        return (gx,)

    return _emit((x,), x.data[idx], backward)


def straight_through(x, fn) -> Matrix:
    """Apply a piecewise-constant ``fn`` to the values; backward is identity."""
    x = _as_matrix(x)
    out_data = np.asarray(fn(x.data), dtype=np.float32)
    if out_data.shape != x.shape:
        raise ShapeMismatch(
            f"straight_through: fn changed shape {x.shape} -> {out_data.shape}"
        )

    def backward(g):
        return (g,)

    return _emit((x,), out_data, backward)


class AdamState:
    """First/second moment buffers plus step counter for :func:`adam_step`."""

    def __init__(self, params):
        self.m = [np.zeros(p.shape, dtype=np.float64) for p in params]
        self.v = [np.zeros(p.shape, dtype=np.float64) for p in params]
        self.t = 0


def _check_step_args(params, grads, lr):
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if len(params) != len(grads):
        raise ShapeMismatch(f"{len(params)} params vs {len(grads)} grads")
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeMismatch(f"param {i}: grad shape {g.shape} != param shape {p.shape}")
        out.append(g)
    return out


def sgd_step(params, grads, lr: float) -> None:
    """In-place vanilla SGD update."""
    grads = _check_step_args(params, grads, lr)
    for p, g in zip(params, grads):
        p.data = (p.data.astype(np.float64) - lr * g).astype(np.float32)


def adam_step(params, grads, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """In-place Adam update with bias correction."""
    grads = _check_step_args(params, grads, lr)
    state.t += 1
    t = state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = beta1 * state.m[i] + (1 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1 - beta2) * g * g
        m_hat = state.m[i] / (1 - beta1 ** t)
        v_hat = state.v[i] / (1 - beta2 ** t)
        p.data = (p.data.astype(np.float64) - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(np.float32)


def zero_grad(params) -> None:
    for p in params:
        p.grad = None
