"""Dense float64 kernel with reverse-mode autodiff over a recorded tape.

Tensors wrap numpy arrays; every operation records a backward closure, and
`Tensor.backward()` walks the tape in reverse topological order. Scope is
exactly what the model needs: matmul, masked attention, normalization,
pooling, concatenation, and a central-difference gradient checker.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

GRAPH_RELEVANT = "graph_relevant"
OTHER = "other"


class TensorError(Exception):
    pass


class ShapeMismatch(TensorError):
    pass


class AllMaskedRow(TensorError):
    pass


class EmptySpan(TensorError):
    pass


class NonFiniteLoss(TensorError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "_parents", "_backward")

    def __init__(self, data, parents: tuple = (), backward: Callable | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self._parents = parents
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        if self.data.size != 1:
            raise ShapeMismatch("backward() requires a scalar tensor")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # operator sugar; scalars are promoted to constant tensors
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


class Parameter:
    """A leaf tensor with a learning-rate group tag."""

    __slots__ = ("name", "value", "group")

    def __init__(self, name: str, data, group: str = OTHER):
        if group not in (GRAPH_RELEVANT, OTHER):
            raise ValueError(f"unknown parameter group {group!r}")
        self.name = name
        self.value = Tensor(np.array(data, dtype=np.float64))
        self.group = group

    @property
    def grad(self) -> np.ndarray | None:
        return self.value.grad

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.value.shape}, group={self.group})"


def zero_grads(params: Sequence[Parameter]) -> None:
    for p in params:
        p.value.grad = None


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeMismatch(f"add: {a.shape} vs {b.shape}") from None

    def bwd(g):
        a._accumulate(_unbroadcast(g, a.data.shape))
        b._accumulate(_unbroadcast(g, b.data.shape))

    return Tensor(data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeMismatch(f"mul: {a.shape} vs {b.shape}") from None

    def bwd(g):
        a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return Tensor(data, (a, b), bwd)


def scale(a: Tensor, s: float) -> Tensor:
    def bwd(g):
        a._accumulate(g * s)

    return Tensor(a.data * s, (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def bwd(g):
        a._accumulate(g @ b.data.T)
        b._accumulate(a.data.T @ g)

    return Tensor(data, (a, b), bwd)


def transpose(a: Tensor) -> Tensor:
    def bwd(g):
        a._accumulate(g.T)

    return Tensor(a.data.T, (a,), bwd)


def relu(a: Tensor) -> Tensor:
    keep = a.data > 0

    def bwd(g):
        a._accumulate(g * keep)

    return Tensor(a.data * keep, (a,), bwd)


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(a: Tensor) -> Tensor:
    """tanh-form gelu; smooth, so finite-difference checks converge cleanly."""
    x = a.data
    u = _GELU_C * (x + _GELU_A * x**3)
    t = np.tanh(u)

    def bwd(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * x**2)
        a._accumulate(g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * du))

    return Tensor(0.5 * x * (1.0 + t), (a,), bwd)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ShapeMismatch("concat of zero tensors")
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]

    def bwd(g):
        start = 0
        for p, size in zip(parts, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(start, start + size)
            p._accumulate(g[tuple(sl)])
            start += size

    return Tensor(data, tuple(parts), bwd)


def take_rows(a: Tensor, indices: Sequence[int]) -> Tensor:
    idx = np.asarray(indices, dtype=np.int64)
    if a.data.ndim != 2:
        raise ShapeMismatch("take_rows expects a matrix")
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[0]):
        raise ShapeMismatch(f"row index out of range for shape {a.shape}")

    def bwd(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        a._accumulate(out)

    return Tensor(a.data[idx], (a,), bwd)


def take_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 2 or not (0 <= start < stop <= a.data.shape[1]):
        raise ShapeMismatch(f"take_cols [{start}:{stop}] of {a.shape}")

    def bwd(g):
        out = np.zeros_like(a.data)
        out[:, start:stop] = g
        a._accumulate(out)

    return Tensor(a.data[:, start:stop], (a,), bwd)


def pick(a: Tensor, indices: Sequence[int]) -> Tensor:
    """a[i, indices[i]] for every row i; used for target log-probabilities."""
    idx = np.asarray(indices, dtype=np.int64)
    if a.data.ndim != 2 or idx.shape != (a.data.shape[0],):
        raise ShapeMismatch(f"pick: {a.shape} with {idx.shape} indices")
    rows = np.arange(a.data.shape[0])

    def bwd(g):
        out = np.zeros_like(a.data)
        out[rows, idx] = g
        a._accumulate(out)

    return Tensor(a.data[rows, idx], (a,), bwd)


def sum_all(a: Tensor) -> Tensor:
    def bwd(g):
        a._accumulate(np.full_like(a.data, float(g)))

    return Tensor(a.data.sum(), (a,), bwd)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size

    def bwd(g):
        a._accumulate(np.full_like(a.data, float(g) / n))

    return Tensor(a.data.mean(), (a,), bwd)


# ---------------------------------------------------------------------------
# composite / bespoke-gradient ops
# ---------------------------------------------------------------------------


def masked_softmax(scores: Tensor, mask, multiplicative: bool = False) -> Tensor:
    """Row softmax restricted to mask==1 positions.

    Default semantics are additive: masked logits are treated as -inf, so
    masked probabilities are exactly zero. With `multiplicative=True` the
    scores are elementwise-multiplied by the mask before a full softmax (the
    literal product-mask reading); masked positions then keep probability
    mass and rows cannot be empty.
    """
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask, dtype=np.float64)
    if m.shape != scores.data.shape:
        raise ShapeMismatch(f"mask {m.shape} vs scores {scores.data.shape}")

    if multiplicative:
        z = scores.data * m
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        p = e / e.sum(axis=-1, keepdims=True)

        def bwd_mult(g):
            inner = (g * p).sum(axis=-1, keepdims=True)
            scores._accumulate(p * (g - inner) * m)

        return Tensor(p, (scores,), bwd_mult)

    keep = m > 0.5
    if not keep.any(axis=-1).all():
        raise AllMaskedRow("a row has no unmasked entry")
    neg = np.where(keep, scores.data, -np.inf)
    shifted = neg - neg.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        inner = (g * p).sum(axis=-1, keepdims=True)
        scores._accumulate(p * (g - inner))

    return Tensor(p, (scores,), bwd)


def log_softmax(a: Tensor) -> Tensor:
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse

    def bwd(g):
        a._accumulate(g - np.exp(out) * g.sum(axis=-1, keepdims=True))

    return Tensor(out, (a,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize each row of the last axis to zero mean / unit variance, then
    apply learned gain and bias."""
    if gain.data.shape != (x.data.shape[-1],) or bias.data.shape != (x.data.shape[-1],):
        raise ShapeMismatch("layer_norm gain/bias must match the last axis")
    n = x.data.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv

    def bwd(g):
        gxhat = g * gain.data
        gx = inv * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        x._accumulate(gx)
        gain._accumulate((g * xhat).reshape(-1, n).sum(axis=0))
        bias._accumulate(g.reshape(-1, n).sum(axis=0))

    return Tensor(xhat * gain.data + bias.data, (x, gain, bias), bwd)


def mean_pool(x: Tensor) -> Tensor:
    """Mean over rows -> (1, d)."""
    if x.data.ndim != 2:
        raise ShapeMismatch("mean_pool expects a matrix")
    if x.data.shape[0] == 0:
        raise EmptySpan("mean_pool over zero rows")
    n = x.data.shape[0]

    def bwd(g):
        x._accumulate(np.repeat(g, n, axis=0) / n)

    return Tensor(x.data.mean(axis=0, keepdims=True), (x,), bwd)


def max_pool(x: Tensor) -> Tensor:
    """Columnwise max over rows -> (1, d); gradient flows to the first argmax."""
    if x.data.ndim != 2:
        raise ShapeMismatch("max_pool expects a matrix")
    if x.data.shape[0] == 0:
        raise EmptySpan("max_pool over zero rows")
    arg = x.data.argmax(axis=0)
    cols = np.arange(x.data.shape[1])

    def bwd(g):
        out = np.zeros_like(x.data)
        out[arg, cols] = g[0]
        x._accumulate(out)

    return Tensor(x.data.max(axis=0, keepdims=True), (x,), bwd)


def multi_head_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    heads: int,
    mask=None,
    w_out: Tensor | None = None,
    multiplicative: bool = False,
) -> Tensor:
    """Scaled dot-product attention with head split/concat.

    q, k, v are already projected (Tq x d, Tk x d, Tk x d). `mask` is a binary
    (Tq x Tk) matrix shared across heads; `w_out` applies the output
    projection when given.
    """
    d = q.data.shape[1]
    if d % heads != 0:
        raise ShapeMismatch(f"model dim {d} not divisible by {heads} heads")
    if k.data.shape != v.data.shape or k.data.shape[1] != d:
        raise ShapeMismatch(f"attention shapes q={q.shape} k={k.shape} v={v.shape}")
    dh = d // heads
    if mask is None:
        mask = np.ones((q.data.shape[0], k.data.shape[0]))
    outs = []
    for h in range(heads):
        qs = take_cols(q, h * dh, (h + 1) * dh)
        ks = take_cols(k, h * dh, (h + 1) * dh)
        vs = take_cols(v, h * dh, (h + 1) * dh)
        scores = scale(matmul(qs, transpose(ks)), 1.0 / math.sqrt(dh))
        probs = masked_softmax(scores, mask, multiplicative=multiplicative)
        outs.append(matmul(probs, vs))
    out = concat(outs, axis=1)
    if w_out is not None:
        out = matmul(out, w_out)
    return out


def feed_forward(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    return add(matmul(gelu(add(matmul(x, w1), b1)), w2), b2)


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------


def finite_diff_check(
    f: Callable[[], Tensor], params: Sequence[Parameter], epsilon: float = 1e-4
) -> float:
    """Max relative error between analytic and central-difference gradients.

    f must be a deterministic scalar-valued closure over `params`. Every
    parameter element is perturbed by +/- epsilon. Differences within the
    absolute floor of 1e-8 count as agreement (gradients that small are
    noise-level for a float64 forward pass); larger differences are scored
    relative to the bigger of the two gradients. The default step balances
    truncation against roundoff for a multi-layer float64 network.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon {epsilon} outside [1e-7, 1e-3]")
    zero_grads(params)
    loss = f()
    if not np.isfinite(loss.data).all():
        raise NonFiniteLoss("loss is not finite at the evaluation point")
    loss.backward()
    analytic = [np.zeros_like(p.value.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, ana in zip(params, analytic):
        flat = p.value.data.reshape(-1)
        ana_flat = ana.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + epsilon
            hi = f().item()
            flat[i] = saved - epsilon
            lo = f().item()
            flat[i] = saved
            if not (math.isfinite(hi) and math.isfinite(lo)):
                raise NonFiniteLoss(f"non-finite loss while perturbing {p.name}[{i}]")
            numeric = (hi - lo) / (2.0 * epsilon)
            diff = abs(numeric - ana_flat[i])
            if diff <= 1e-8:
                continue
            worst = max(worst, diff / max(abs(numeric), abs(ana_flat[i]), 1e-8))
    return worst
