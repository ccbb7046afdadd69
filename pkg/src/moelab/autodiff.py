"""Reverse-mode automatic differentiation over dense float64 arrays.

Define-by-run: while a Tape is active, every primitive op appends a node
(output, inputs, pull function) to it. The tape is a Wengert list, so it is
topologically ordered by construction and ``backward`` visits each node
exactly once in reverse. Tapes are kept on a thread-local stack; independent
tapes on different threads share no mutable state.

Conventions, fixed across the package:
  * all values are float64; integer index arrays stay integer constants
  * selections (top-k, argmax, routing index sets) are computed from raw
    values and treated as constants during backward (straight-through)
  * softplus uses the stable form max(x, 0) + log1p(exp(-|x|)), which keeps
    exp(softplus(x)) == 1 + exp(x) to float64 rounding
  * values are finite unless an op documents otherwise (``masked_fill`` may
    inject -inf for masked softmax/logsumexp inputs)
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "Tape",
    "ParamStore",
    "GradCheckReport",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "pow_const",
    "exp",
    "log",
    "sqrt",
    "matmul",
    "swapaxes",
    "reshape",
    "reduce_sum",
    "reduce_mean",
    "softmax",
    "logsumexp",
    "activation",
    "masked_fill",
    "gather_rows",
    "scatter_rows",
    "take_along_rows",
    "take_pairs",
    "select_expert_outputs",
    "stack0",
    "stable_softplus",
    "sigmoid",
    "reverse_accumulate",
    "finite_diff_check",
    "ACTIVATION_KINDS",
]

_STATE = threading.local()


def _tape_stack() -> list:
    stack = getattr(_STATE, "stack", None)
    if stack is None:
        stack = []
        _STATE.stack = stack
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


def _f64(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    return np.ascontiguousarray(arr)


class Tensor:
    """Dense float64 array plus an adjoint slot filled in by backward."""

    __slots__ = ("data", "grad")

    def __init__(self, data):
        self.data = _f64(data)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        """Same values, cut from the recording (constant during backward)."""
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"

    # operator sugar; constants are wrapped as leaf tensors
    def __add__(self, other):
        return add(self, as_tensor(other))

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    def __rmul__(self, other):
        return mul(as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, as_tensor(other))

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return pow_const(self, float(exponent))

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def matmul(self, other):
        return matmul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


class Tape:
    """Recorded op sequence; also a context manager activating recording."""

    def __init__(self):
        self.nodes = []  # (out, inputs, pull) in execution order

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape stack corrupted: exiting a non-top tape")
        stack.pop()
        return False

    def _record(self, out, inputs, pull):
        self.nodes.append((out, inputs, pull))

    def backward(self, root: Tensor, seed=None):
        """Accumulate adjoints of ``root`` with respect to every recorded
        tensor. ``root`` must be scalar unless a seed adjoint is supplied.
        Clears stale adjoints first so repeated calls do not double-count.
        """
        if seed is None:
            if root.data.size != 1:
                raise ValueError("backward root must be scalar when seed is omitted")
            seed = np.ones_like(root.data)
        for out, inputs, _ in self.nodes:
            out.grad = None
            for t in inputs:
                t.grad = None
        root.grad = _f64(seed)
        for out, inputs, pull in reversed(self.nodes):
            g = out.grad
            if g is None:
                continue
            for t, gt in zip(inputs, pull(g)):
                if gt is None:
                    continue
                # accumulation allocates, so adjoints may alias upstream views
                t.grad = gt if t.grad is None else t.grad + gt


def _record(out: Tensor, inputs, pull) -> Tensor:
    tape = _active_tape()
    if tape is not None:
        tape._record(out, tuple(inputs), pull)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# arithmetic primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)

    def pull(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _record(out, (a, b), pull)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data)

    def pull(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _record(out, (a, b), pull)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)

    def pull(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _record(out, (a, b), pull)


def div(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data / b.data)

    def pull(g):
        return (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        )

    return _record(out, (a, b), pull)


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    return _record(out, (a,), lambda g: (-g,))


def pow_const(a: Tensor, exponent: float) -> Tensor:
    out = Tensor(a.data**exponent)

    def pull(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return _record(out, (a,), pull)


def exp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.data))
    return _record(out, (a,), lambda g: (g * out.data,))


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data))
    return _record(out, (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = Tensor(np.sqrt(a.data))
    return _record(out, (a,), lambda g: (g * 0.5 / out.data,))


# ---------------------------------------------------------------------------
# linear algebra / shape


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """np.matmul semantics: 2-D classic product, leading axes batched."""
    out = Tensor(np.matmul(a.data, b.data))

    def pull(g):
        ad, bd = a.data, b.data
        if ad.ndim == 1 or bd.ndim == 1:
            raise NotImplementedError("matmul gradients require ndim >= 2 operands")
        ga = np.matmul(g, bd.swapaxes(-1, -2))
        gb = np.matmul(ad.swapaxes(-1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _record(out, (a, b), pull)


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    out = Tensor(a.data.swapaxes(ax1, ax2).copy())
    return _record(out, (a,), lambda g: (g.swapaxes(ax1, ax2),))


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape).copy())
    return _record(out, (a,), lambda g: (g.reshape(a.data.shape),))


def reduce_sum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def pull(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _record(out, (a,), pull)


def reduce_mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        count = a.data.shape[axis]
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))

    def pull(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / count, a.data.shape).copy(),)

    return _record(out, (a,), pull)


# ---------------------------------------------------------------------------
# fused row-wise ops (stable under -inf masking)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)  # all-masked row would otherwise NaN
    e = np.exp(x - m)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(s)

    def pull(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - dot),)

    return _record(out, (a,), pull)


def logsumexp(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x - m)
    se = e.sum(axis=axis, keepdims=True)
    val = m + np.log(se)
    out = Tensor(val if keepdims else np.squeeze(val, axis=axis))
    soft = e / se

    def pull(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        return (soft * gg,)

    return _record(out, (a,), pull)


# ---------------------------------------------------------------------------
# activations


def stable_softplus(x: np.ndarray) -> np.ndarray:
    """softplus(x) = max(x, 0) + log1p(exp(-|x|)); exact overflow-free form."""
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


_SQRT1_2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

ACTIVATION_KINDS = ("softplus", "relu", "sigmoid", "silu", "gelu", "tanh", "identity")


def activation(a: Tensor, kind: str) -> Tensor:
    x = a.data
    if kind == "softplus":
        y = stable_softplus(x)
        dydx = sigmoid(x)
    elif kind == "relu":
        y = np.maximum(x, 0.0)
        dydx = (x > 0.0).astype(np.float64)
    elif kind == "sigmoid":
        y = sigmoid(x)
        dydx = y * (1.0 - y)
    elif kind == "silu":
        s = sigmoid(x)
        y = x * s
        dydx = s * (1.0 + x * (1.0 - s))
    elif kind == "gelu":
        phi_big = 0.5 * (1.0 + erf(x * _SQRT1_2))
        y = x * phi_big
        dydx = phi_big + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    elif kind == "tanh":
        y = np.tanh(x)
        dydx = 1.0 - y * y
    elif kind == "identity":
        y = x.copy()
        dydx = np.ones_like(x)
    else:
        raise ValueError(f"unknown activation kind: {kind!r}")
    out = Tensor(y)
    return _record(out, (a,), lambda g: (g * dydx,))


# ---------------------------------------------------------------------------
# selection / indexing (indices are constants; gradients are scatter-adds)


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where mask is False by ``value`` (often -inf)."""
    mask = np.asarray(mask, dtype=bool)
    out = Tensor(np.where(mask, a.data, value))
    return _record(out, (a,), lambda g: (np.where(mask, g, 0.0),))


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows along axis 0; duplicates allowed (embedding lookup)."""
    idx = np.asarray(idx)
    out = Tensor(a.data[idx])

    def pull(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _record(out, (a,), pull)


def scatter_rows(values: Tensor, idx: np.ndarray, num_rows: int) -> Tensor:
    """Place rows of ``values`` at positions ``idx`` of a zero (num_rows, ...)
    array, adding on duplicate indices."""
    idx = np.asarray(idx)
    shape = (num_rows,) + values.data.shape[1:]
    data = np.zeros(shape, dtype=np.float64)
    np.add.at(data, idx, values.data)
    out = Tensor(data)
    return _record(out, (values,), lambda g: (g[idx],))


def take_along_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """out[i] = a[i, idx[i]] for a 2-D tensor; used for target log-prob pick."""
    idx = np.asarray(idx)
    rows = np.arange(a.data.shape[0])
    out = Tensor(a.data[rows, idx])

    def pull(g):
        ga = np.zeros_like(a.data)
        ga[rows, idx] = g
        return (ga,)

    return _record(out, (a,), pull)


def take_pairs(a: Tensor, idx: np.ndarray) -> Tensor:
    """out[t, k] = a[t, idx[t, k]] for a 2-D tensor and integer idx (T, K).
    Rows of ``idx`` must not repeat a column (routing index sets never do)."""
    idx = np.asarray(idx)
    rows = np.arange(a.data.shape[0])[:, None]
    out = Tensor(a.data[rows, idx])

    def pull(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (rows, idx), g)
        return (ga,)

    return _record(out, (a,), pull)


def select_expert_outputs(stacked: Tensor, idx: np.ndarray) -> Tensor:
    """out[t, k] = stacked[idx[t, k], t] for stacked (N, T, D), idx (T, K)."""
    idx = np.asarray(idx)
    t_index = np.arange(stacked.data.shape[1])[:, None]
    out = Tensor(stacked.data[idx, t_index])

    def pull(g):
        gs = np.zeros_like(stacked.data)
        np.add.at(gs, (idx, t_index), g)
        return (gs,)

    return _record(out, (stacked,), pull)


def stack0(tensors) -> Tensor:
    tensors = list(tensors)
    out = Tensor(np.stack([t.data for t in tensors], axis=0))

    def pull(g):
        return tuple(g[i] for i in range(len(tensors)))

    return _record(out, tuple(tensors), pull)


# ---------------------------------------------------------------------------
# parameters


class ParamStore:
    """Named parameter bank. Names are unique; insertion order is the
    canonical flattening order used by checkpoints and finite differences.
    ``lr_schedule`` optionally carries the step-size schedule ξ_t used by the
    training loop (callable step -> float)."""

    def __init__(self, lr_schedule=None):
        self._params: dict[str, Tensor] = {}
        self.lr_schedule = lr_schedule

    def add(self, name: str, values) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name!r}")
        t = as_tensor(values) if not isinstance(values, Tensor) else values
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self):
        return list(self._params.keys())

    def items(self):
        return self._params.items()

    def step_size(self, step: int) -> float:
        if self.lr_schedule is None:
            raise RuntimeError("no step-size schedule attached")
        return float(self.lr_schedule(step))

    def zero_grads(self):
        for t in self._params.values():
            t.grad = None


def reverse_accumulate(tape: Tape, output: Tensor, params: ParamStore):
    """Run backward and return ({name: gradient}, unused_names).

    Parameters the output does not depend on get zero gradients and are
    reported in ``unused_names`` rather than raising.
    """
    tape.backward(output)
    grads = {}
    unused = []
    for name, t in params.items():
        if t.grad is None:
            grads[name] = np.zeros_like(t.data)
            unused.append(name)
        else:
            grads[name] = t.grad
    return grads, unused


# ---------------------------------------------------------------------------
# finite differences


@dataclass
class GradCheckReport:
    """Comparison of tape gradients against central finite differences.

    Relative error convention: |a - b| / max(|a|, |b|, tau) with tau = 1e-6,
    so a coordinate the output genuinely does not depend on (both gradients
    zero) reports error 0 instead of 0/0.
    """

    max_rel_error: float
    per_param: dict = field(default_factory=dict)
    unverifiable: bool = False
    notes: str = ""

    TAU = 1e-6

    def ok(self, tol: float = 1e-5) -> bool:
        return (not self.unverifiable) and self.max_rel_error < tol


def _eval_scalar(f, params: ParamStore) -> float:
    out = f(params)
    val = out.item() if isinstance(out, Tensor) else float(out)
    return val


def finite_diff_check(f, params: ParamStore, eps: float = 1e-5) -> GradCheckReport:
    """Check d f / d params by central differences, coordinate by coordinate.

    ``f(params)`` must return a scalar Tensor and must not mutate state: it is
    evaluated twice up front, and a bitwise mismatch marks the report
    unverifiable (non-deterministic objective) instead of failing the check.
    """
    v1 = _eval_scalar(f, params)
    v2 = _eval_scalar(f, params)
    if not (np.float64(v1) == np.float64(v2)):
        return GradCheckReport(
            max_rel_error=np.inf,
            unverifiable=True,
            notes="objective is not deterministic; finite differences unusable",
        )

    tape = Tape()
    with tape:
        out = f(params)
    grads, _ = reverse_accumulate(tape, out, params)

    per_param = {}
    worst = 0.0
    tau = GradCheckReport.TAU
    for name, t in params.items():
        flat = t.data.reshape(-1)
        g_tape = grads[name].reshape(-1)
        errs = np.zeros_like(flat)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            f_plus = _eval_scalar(f, params)
            flat[i] = keep - eps
            f_minus = _eval_scalar(f, params)
            flat[i] = keep
            g_fd = (f_plus - f_minus) / (2.0 * eps)
            denom = max(abs(g_tape[i]), abs(g_fd), tau)
            errs[i] = abs(g_tape[i] - g_fd) / denom
        per_param[name] = float(errs.max()) if errs.size else 0.0
        worst = max(worst, per_param[name])
    return GradCheckReport(max_rel_error=worst, per_param=per_param)
