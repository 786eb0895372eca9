"""Dense float64 arrays plus a small reverse-mode tape.

Every op in this module is polymorphic: called on plain numpy arrays (or
Tensor) it just computes the value; called with at least one `Node` argument
it also appends a gradient-pull record to that node's `GradTape`. Training
code wraps parameters in nodes via `GradTape.param`, runs the forward pass
through the same functions used for inference, and calls `grad`.

Everything is float64. Gradients are accumulated in reverse record order,
which makes the accumulation order deterministic for a fixed forward pass.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractError

Array = np.ndarray

# Floor applied to predicted probabilities before taking logs. Keeps
# kl_div finite when a predicted class probability underflows to zero.
LOG_CLAMP = 1e-12

# Probability vectors must sum to one within this tolerance.
PROB_ATOL = 1e-9


class Tensor:
    """Immutable dense float64 value with an explicit shape.

    The backing buffer is row-major, contiguous and write-protected. NaN and
    Inf are rejected at construction, so a Tensor is always a finite value.
    """

    __slots__ = ("_data",)

    def __init__(self, data, shape: Sequence[int] | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if shape is not None:
            shape = tuple(int(s) for s in shape)
            flat = arr.reshape(-1)
            want = 1
            for s in shape:
                want *= s
            if want != flat.size:
                raise ContractError(
                    f"shape {shape} wants {want} elements, data has {flat.size}"
                )
            arr = flat.reshape(shape)
        if not np.all(np.isfinite(arr)):
            raise ContractError("Tensor values must be finite")
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        self._data = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def data(self) -> Array:
        """Read-only numpy view of the value."""
        return self._data

    @property
    def size(self) -> int:
        return self._data.size

    def __array__(self, dtype=None, copy=None):
        if dtype is None or dtype == self._data.dtype:
            return self._data
        return self._data.astype(dtype)

    def tolist(self):
        return self._data.tolist()

    def __repr__(self):
        return f"Tensor(shape={self.shape})"


class Node:
    """A value recorded on a GradTape. Holds the forward array and the tape
    that owns it; gradients are materialized by `grad`, not stored here."""

    __slots__ = ("value", "tape")

    def __init__(self, value: Array, tape: "GradTape"):
        self.value = value
        self.tape = tape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __repr__(self):
        return f"Node(shape={self.shape})"


class GradTape:
    """Ordered record of primitive ops plus a parameter registry.

    Single-writer: one forward pass per tape. `param` registers an array as
    a differentiable leaf; `grad` replays the records backward and returns
    one gradient per registered parameter (zeros if the parameter never
    reached the loss).
    """

    def __init__(self):
        # Each record is (out_node, input_nodes, backward) where backward
        # maps the output gradient to one gradient per input node (None for
        # constant inputs).
        self._records: list[tuple[Node, tuple, Callable]] = []
        self._params: list[Node] = []

    def param(self, value) -> Node:
        arr = np.asarray(value, dtype=np.float64)
        node = Node(arr, self)
        self._params.append(node)
        return node

    @property
    def params(self) -> list[Node]:
        return list(self._params)

    def _record(self, out: Node, inputs: tuple, backward: Callable) -> None:
        self._records.append((out, inputs, backward))


def grad(loss: Node, tape: GradTape) -> dict[Node, Array]:
    """Reverse-mode gradients of a scalar loss for every registered parameter.

    Replays the tape once, accumulating exactly one contribution per recorded
    use of each node, in reverse record order. Parameters that never fed the
    loss get a zero gradient of their own shape.
    """
    if not isinstance(loss, Node):
        raise ContractError("loss must be a tape Node")
    if loss.tape is not tape:
        raise ContractError("loss was recorded on a different tape")
    if loss.value.shape != ():
        raise ContractError(f"loss must be scalar, got shape {loss.value.shape}")
    acc: dict[int, Array] = {id(loss): np.ones((), dtype=np.float64)}
    for out, inputs, backward in reversed(tape._records):
        g = acc.get(id(out))
        if g is None:
            continue  # this record never reached the loss
        for node, gin in zip(inputs, backward(g)):
            if node is None or gin is None:
                continue
            cur = acc.get(id(node))
            acc[id(node)] = gin if cur is None else cur + gin
    out_map: dict[Node, Array] = {}
    for p in tape._params:
        g = acc.get(id(p))
        if g is None:
            g = np.zeros_like(p.value)
        out_map[p] = np.asarray(g, dtype=np.float64)
    return out_map


# ---------------------------------------------------------------------------
# op plumbing


def as_array(x) -> Array:
    """Coerce a Tensor / array-like constant to a float64 ndarray."""
    if isinstance(x, Node):
        raise ContractError("expected a constant value, got a tape Node")
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


def _split(x) -> tuple[Node | None, Array]:
    if isinstance(x, Node):
        return x, x.value
    if isinstance(x, Tensor):
        return None, x.data
    return None, np.asarray(x, dtype=np.float64)


def _tape_of(*nodes: Node | None) -> GradTape | None:
    tape = None
    for n in nodes:
        if n is None:
            continue
        if tape is None:
            tape = n.tape
        elif n.tape is not tape:
            raise ContractError("inputs live on different tapes")
    return tape


def _emit(tape, value, inputs, backward):
    if tape is None:
        return value
    out = Node(value, tape)
    tape._record(out, inputs, backward)
    return out


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum a broadcast gradient back down to `shape`."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# arithmetic primitives


def add(a, b):
    an, av = _split(a)
    bn, bv = _split(b)
    out = av + bv

    def backward(g):
        return (
            _unbroadcast(g, av.shape) if an is not None else None,
            _unbroadcast(g, bv.shape) if bn is not None else None,
        )

    return _emit(_tape_of(an, bn), out, (an, bn), backward)


def mul(a, b):
    an, av = _split(a)
    bn, bv = _split(b)
    out = av * bv

    def backward(g):
        return (
            _unbroadcast(g * bv, av.shape) if an is not None else None,
            _unbroadcast(g * av, bv.shape) if bn is not None else None,
        )

    return _emit(_tape_of(an, bn), out, (an, bn), backward)


def matmul(a, b):
    an, av = _split(a)
    bn, bv = _split(b)
    if av.ndim != 2 or bv.ndim != 2:
        raise ContractError("matmul expects 2-D operands")
    out = av @ bv

    def backward(g):
        return (
            g @ bv.T if an is not None else None,
            av.T @ g if bn is not None else None,
        )

    return _emit(_tape_of(an, bn), out, (an, bn), backward)


def relu(x):
    xn, xv = _split(x)
    out = np.maximum(xv, 0.0)

    def backward(g):
        return (g * (xv > 0.0),)

    return _emit(_tape_of(xn), out, (xn,), backward)


def tanh(x):
    xn, xv = _split(x)
    out = np.tanh(xv)

    def backward(g):
        return (g * (1.0 - out * out),)

    return _emit(_tape_of(xn), out, (xn,), backward)


def sum_all(x):
    xn, xv = _split(x)
    out = xv.sum()

    def backward(g):
        return (np.broadcast_to(g, xv.shape).astype(np.float64, copy=False),)

    return _emit(_tape_of(xn), out, (xn,), backward)


def mean_all(x):
    xn, xv = _split(x)
    if xv.size == 0:
        raise ContractError("mean of an empty value")
    out = xv.mean()
    inv = 1.0 / xv.size

    def backward(g):
        return (np.broadcast_to(g * inv, xv.shape).astype(np.float64, copy=False),)

    return _emit(_tape_of(xn), out, (xn,), backward)


def take_rows(x, indices):
    """Gather rows by integer index; gradient scatter-adds back."""
    xn, xv = _split(x)
    idx = np.asarray(indices, dtype=np.intp)
    out = xv[idx]

    def backward(g):
        z = np.zeros_like(xv)
        np.add.at(z, idx, g)
        return (z,)

    return _emit(_tape_of(xn), out, (xn,), backward)


def max_last(x):
    """Maximum over the last axis. Gradient routes to the first argmax."""
    xn, xv = _split(x)
    out = xv.max(axis=-1)
    idx = np.expand_dims(xv.argmax(axis=-1), -1)

    def backward(g):
        z = np.zeros_like(xv)
        np.put_along_axis(z, idx, np.expand_dims(g, -1), axis=-1)
        return (z,)

    return _emit(_tape_of(xn), out, (xn,), backward)


# ---------------------------------------------------------------------------
# probability / loss primitives


def softmax(x):
    """Row-wise softmax over the last axis, shifted by the row max.

    Rejects non-finite input and class counts < 2. Adding a constant to all
    logits leaves the output unchanged because the shift removes it before
    exponentiation.
    """
    xn, xv = _split(x)
    if xv.shape[-1] < 2:
        raise ContractError("softmax needs at least 2 classes")
    if not np.all(np.isfinite(xv)):
        raise ContractError("softmax input must be finite")
    shifted = xv - xv.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - inner),)

    return _emit(_tape_of(xn), out, (xn,), backward)


def _check_prob(v: Array, who: str) -> None:
    if v.shape[-1] < 2:
        raise ContractError(f"{who} needs at least 2 classes")
    if np.any(v < 0.0):
        raise ContractError(f"{who} must be nonnegative")
    sums = v.sum(axis=-1)
    if not np.all(np.abs(sums - 1.0) <= PROB_ATOL):
        raise ContractError(f"{who} rows must sum to 1 within {PROB_ATOL}")


def kl_div(target, pred):
    """KL(target || pred) over the last axis: sum target * ln(target/pred).

    `target` is always treated as constant data (victim outputs); only
    `pred` is differentiable. `pred` is clamped at LOG_CLAMP before the log,
    and the gradient is zero where the clamp is active. Both arguments must
    be probability vectors (rows summing to 1, nonnegative). 1-D input gives
    a scalar, 2-D input gives one KL value per row.
    """
    tv = target.value if isinstance(target, Node) else as_array(target)
    pn, pv = _split(pred)
    _check_prob(tv, "kl_div target")
    _check_prob(pv, "kl_div pred")
    if tv.shape != pv.shape:
        raise ContractError(f"kl_div shapes differ: {tv.shape} vs {pv.shape}")
    clamped = np.maximum(pv, LOG_CLAMP)
    safe_t = np.where(tv > 0.0, tv, 1.0)
    terms = np.where(tv > 0.0, tv * (np.log(safe_t) - np.log(clamped)), 0.0)
    out = terms.sum(axis=-1)

    def backward(g):
        # d/dp_j = -t_j / p_j where the clamp is inactive, else 0.
        local = np.where(pv > LOG_CLAMP, -tv / clamped, 0.0)
        return (local * np.expand_dims(g, -1) if out.ndim else local * g,)

    return _emit(_tape_of(pn), out, (pn,), backward)


def hinge(threshold, value):
    """max(0, threshold - value), elementwise.

    Penalizes `value` falling short of `threshold`. Subgradient with respect
    to `value` is 0 at the kink (value == threshold); threshold is constant.
    """
    tv = as_array(threshold)
    vn, vv = _split(value)
    out = np.maximum(0.0, tv - vv)

    def backward(g):
        return (_unbroadcast(-g * (vv < tv), vv.shape),)

    return _emit(_tape_of(vn), out, (vn,), backward)


def hinge_excess(value, threshold):
    """max(0, value - threshold): the amount by which `value` exceeds
    `threshold`. Same kink convention as `hinge` (zero subgradient at
    equality); threshold is constant."""
    tv = as_array(threshold)
    vn, vv = _split(value)
    out = np.maximum(0.0, vv - tv)

    def backward(g):
        return (_unbroadcast(g * (vv > tv), vv.shape),)

    return _emit(_tape_of(vn), out, (vn,), backward)


def cross_entropy(logits, labels):
    """Mean cross-entropy of integer labels under softmax(logits).

    Fused log-softmax formulation, so large logits do not overflow. Returns
    a scalar (mean over the batch).
    """
    ln, lv = _split(logits)
    y = np.asarray(labels)
    if lv.ndim != 2:
        raise ContractError("cross_entropy expects (batch, classes) logits")
    if y.ndim != 1 or y.shape[0] != lv.shape[0]:
        raise ContractError("labels must be 1-D and match the batch size")
    if not np.issubdtype(y.dtype, np.integer):
        raise ContractError("labels must be integers")
    c = lv.shape[1]
    if np.any(y < 0) or np.any(y >= c):
        raise ContractError(f"labels must lie in [0, {c})")
    shifted = lv - lv.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    b = lv.shape[0]
    out = np.float64(-logp[np.arange(b), y].mean())

    def backward(g):
        p = np.exp(logp)
        p[np.arange(b), y] -= 1.0
        return (p * (g / b),)

    return _emit(_tape_of(ln), np.asarray(out), (ln,), backward)


# ---------------------------------------------------------------------------
# 2-D convolution (small fixed kernels, NCHW layout)


def _conv_windows(xv: Array, kh: int, kw: int, stride: int) -> Array:
    win = np.lib.stride_tricks.sliding_window_view(xv, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]  # (B, C, Ho, Wo, kh, kw)


def conv2d(x, weight, bias, stride: int = 1):
    """Valid-padding 2-D convolution: x (B,Cin,H,W), weight (Cout,Cin,kh,kw)."""
    xn, xv = _split(x)
    wn, wv = _split(weight)
    bn, bv = _split(bias)
    if xv.ndim != 4 or wv.ndim != 4:
        raise ContractError("conv2d expects NCHW input and OIHW weight")
    cout, cin, kh, kw = wv.shape
    if xv.shape[1] != cin:
        raise ContractError(f"conv2d channel mismatch: {xv.shape[1]} vs {cin}")
    if xv.shape[2] < kh or xv.shape[3] < kw:
        raise ContractError("conv2d input smaller than kernel")
    win = _conv_windows(xv, kh, kw, stride)
    out = np.einsum("bcyxij,ocij->boyx", win, wv) + bv[None, :, None, None]
    ho, wo = out.shape[2], out.shape[3]

    def backward(g):
        gx = None
        if xn is not None:
            gx = np.zeros_like(xv)
            for i in range(kh):
                for j in range(kw):
                    patch = np.einsum("boyx,oc->bcyx", g, wv[:, :, i, j])
                    gx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += patch
        gw = np.einsum("boyx,bcyxij->ocij", g, win) if wn is not None else None
        gb = g.sum(axis=(0, 2, 3)) if bn is not None else None
        return (gx, gw, gb)

    return _emit(_tape_of(xn, wn, bn), out, (xn, wn, bn), backward)


def global_avg_pool(x):
    """(B, C, H, W) -> (B, C), mean over the spatial axes."""
    xn, xv = _split(x)
    if xv.ndim != 4:
        raise ContractError("global_avg_pool expects NCHW input")
    out = xv.mean(axis=(2, 3))
    inv = 1.0 / (xv.shape[2] * xv.shape[3])

    def backward(g):
        return (np.broadcast_to((g * inv)[:, :, None, None], xv.shape).astype(np.float64, copy=False),)

    return _emit(_tape_of(xn), out, (xn,), backward)


def value_of(x) -> Array:
    """The plain array behind a Node / Tensor / array-like."""
    if isinstance(x, Node):
        return x.value
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)
