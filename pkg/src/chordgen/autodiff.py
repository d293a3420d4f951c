"""Minimal dense-tensor reverse-mode autodiff.

Just enough machinery for the chord transformer: broadcast arithmetic,
matmul, softmax, layer norm, embedding gather, dropout, the relative-
attention skew, and a fused masked cross-entropy. Arrays are 64-bit by
default (32-bit passes through for inference-only use); every op's
backward is validated against central differences in the test suite.

Intermediate tensors are written once by their producing op and never
mutated, so read-only sharing across threads is safe.
"""

from __future__ import annotations

import numpy as np


class ShapeMismatch(ValueError):
    pass


class AllMasked(ValueError):
    pass


def _as_array(data) -> np.ndarray:
    if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
        return data
    return np.asarray(data, dtype=np.float64)


class Tensor:
    """One node of the compute tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, parents=(),
                 backward_fn=None):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = tuple(parents)
        self._backward_fn = backward_fn

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad=None) -> None:
        """Reverse-topological sweep accumulating gradients into leaves."""
        if grad is None:
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                stack.append((parent, False))
        _accum(self, np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    # Operator sugar used throughout the model code.
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, grad={self.requires_grad})"


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data + b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return Tensor(out_data, parents=(a, b), backward_fn=backward)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data * b.data

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return Tensor(out_data, parents=(a, b), backward_fn=backward)


def scale(a: Tensor, s: float) -> Tensor:
    def backward(g):
        _accum(a, g * s)

    return Tensor(a.data * s, parents=(a,), backward_fn=backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeMismatch("matmul operands must have rank >= 2")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeMismatch(
            f"inner dims disagree: {a.data.shape} @ {b.data.shape}")
    out_data = a.data @ b.data

    def backward(g):
        _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
        _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

    return Tensor(out_data, parents=(a, b), backward_fn=backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    def backward(g):
        _accum(a, g.reshape(a.data.shape))

    return Tensor(a.data.reshape(shape), parents=(a,), backward_fn=backward)


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inverse = tuple(int(np.argsort(axes)[i]) for i in range(len(axes)))

    def backward(g):
        _accum(a, g.transpose(inverse))

    return Tensor(a.data.transpose(axes), parents=(a,), backward_fn=backward)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] = g
        _accum(a, full)

    return Tensor(a.data[index], parents=(a,), backward_fn=backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        _accum(a, g * mask)

    return Tensor(a.data * mask, parents=(a,), backward_fn=backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[-1]))
        _accum(table, gt)

    return Tensor(table.data[ids], parents=(table,), backward_fn=backward)


def softmax_rows(a: Tensor) -> Tensor:
    """Stable softmax over the last axis; rows sum to 1."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * s).sum(axis=-1, keepdims=True)
        _accum(a, (g - inner) * s)

    return Tensor(s, parents=(a,), backward_fn=backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-8) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out_data = gamma.data * xhat + beta.data
    n = x.data.shape[-1]

    def backward(g):
        _accum(beta, _unbroadcast(g, beta.data.shape))
        _accum(gamma, _unbroadcast(g * xhat, gamma.data.shape))
        gx = g * gamma.data
        term = gx - gx.mean(axis=-1, keepdims=True) \
            - xhat * (gx * xhat).sum(axis=-1, keepdims=True) / n
        _accum(x, term * inv)

    return Tensor(out_data, parents=(x, gamma, beta), backward_fn=backward)


class DropoutStream:
    """Counter-based random stream for one dropout site.

    Philox keyed by (run seed, site id) with the call count as counter,
    so masks are reproducible regardless of evaluation order elsewhere.
    """

    def __init__(self, seed: int, site: int):
        self.seed = seed & 0xFFFFFFFFFFFFFFFF
        self.site = site
        self.step = 0

    def next_mask(self, shape: tuple[int, ...], p: float) -> np.ndarray:
        bitgen = np.random.Philox(
            key=np.array([self.seed, self.site], dtype=np.uint64),
            counter=np.array([self.step, 0, 0, 0], dtype=np.uint64),
        )
        self.step += 1
        u = np.random.Generator(bitgen).random(shape)
        return (u >= p).astype(np.float64) / (1.0 - p)


def dropout(x: Tensor, p: float, stream: DropoutStream | None,
            training: bool) -> Tensor:
    """Inverted-scaling dropout; the identity outside training."""
    if not training or p <= 0.0:
        return x
    mask = stream.next_mask(x.data.shape, p)

    def backward(g):
        _accum(x, g * mask)

    return Tensor(x.data * mask, parents=(x,), backward_fn=backward)


def skew_rel_scores(raw: Tensor) -> Tensor:
    """Memory-efficient relative-position score alignment.

    Input ``raw[..., i, t]`` holds q_i dotted with the relative embedding
    whose offset is ``t - (L-1)`` (last column = offset 0). Output
    ``out[..., i, j]`` holds the score for key j, i.e. distance i-j, for
    the causal region j <= i; entries above the diagonal are artifacts
    the caller must mask.
    """
    *lead, L, R = raw.data.shape
    if R != L:
        raise ShapeMismatch(f"skew expects square trailing dims, got {raw.data.shape}")

    def _skew(x):
        pad = np.zeros((*lead, L, 1), dtype=x.dtype)
        y = np.concatenate([pad, x], axis=-1)
        y = y.reshape(*lead, L + 1, L)
        return y[..., 1:, :]

    def _unskew(g):
        pad = np.zeros((*lead, 1, L), dtype=g.dtype)
        y = np.concatenate([pad, g], axis=-2)
        y = y.reshape(*lead, L, L + 1)
        return y[..., :, 1:]

    def backward(g):
        _accum(raw, _unskew(g))

    return Tensor(_skew(raw.data), parents=(raw,), backward_fn=backward)


def sum_all(a: Tensor) -> Tensor:
    def backward(g):
        _accum(a, np.full_like(a.data, float(g)))

    return Tensor(a.data.sum(), parents=(a,), backward_fn=backward)


def cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray,
                  reduction: str = "mean") -> Tensor:
    """Masked next-token NLL over a (N, V) logit matrix.

    ``reduction="mean"`` averages over unmasked positions (perplexity is
    exp of this); ``"sum"`` leaves the division to the caller, which the
    trainer needs for exact gradient accumulation across micro-batches.
    """
    if logits.data.ndim != 2:
        raise ShapeMismatch("cross_entropy expects flattened (N, V) logits")
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise AllMasked("every position is masked")

    x = logits.data
    m = x.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=-1, keepdims=True))
    nll = lse[:, 0] - x[np.arange(x.shape[0]), targets]
    total = float((nll * mask).sum())
    value = total / count if reduction == "mean" else total

    def backward(g):
        soft = np.exp(x - lse)
        soft[np.arange(x.shape[0]), targets] -= 1.0
        soft *= mask[:, None]
        scale_factor = float(g) / count if reduction == "mean" else float(g)
        _accum(logits, soft * scale_factor)

    return Tensor(value, parents=(logits,), backward_fn=backward)
