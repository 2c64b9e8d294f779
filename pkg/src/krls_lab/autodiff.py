"""Dense float64 tensors with reverse-mode differentiation and Adam.

Every op is vectorised over numpy arrays. A result records its parents and
a closure mapping the upstream gradient to per-parent gradients; `backward`
orders the recorded graph topologically (the tape) and walks it once in
reverse. Tensors are limited to rank 3 (batch x time x feature); there is
no implicit broadcasting, biases go through `add_bias`.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

MAX_RANK = 3


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class GraphConsumedError(RuntimeError):
    pass


_local = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_local, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    prev = is_grad_enabled()
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim > MAX_RANK:
            raise ShapeError(f"rank {arr.ndim} tensors are not supported (max {MAX_RANK})")
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None and not self._consumed

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise TypeError("only division by a python scalar is supported")
        return scale(self, 1.0 / other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn: Callable, op: str) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._consumed = False
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return _node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    return _node(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return _node(a.data * c, (a,), lambda g: (g * c,), "scale")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x[..., j] + b[j]."""
    if b.ndim != 1 or b.shape[0] != x.shape[-1]:
        raise ShapeError(f"add_bias: bias {b.shape} does not match last axis of {x.shape}")
    lead = tuple(range(x.ndim - 1))
    return _node(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead)), "add_bias")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _node(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,), "relu")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _node(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    if (xd <= 0).any():
        raise NonFiniteError("log of a non-positive value")
    return _node(np.log(xd), (x,), lambda g: (g / xd,), "log")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    return _node(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clip")


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; ties route the gradient to `a`."""
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "minimum")
    take_a = a.data <= b.data
    out = np.where(take_a, a.data, b.data)
    return _node(out, (a, b), lambda g: (g * take_a, g * ~take_a), "minimum")


# ---------------------------------------------------------------- reductions

def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _node(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    if n == 0:
        raise ShapeError("mean of an empty tensor")
    shape = x.shape
    return _node(np.asarray(x.data.mean()), (x,), lambda g: (np.full(shape, float(g) / n),), "mean")


def sum_last(x: Tensor) -> Tensor:
    return _node(x.data.sum(axis=-1), (x,), lambda g: (np.repeat(g[..., None], x.shape[-1], axis=-1),), "sum_last")


def masked_mean(x: Tensor, mask) -> Tensor:
    """Mean of x over positions where mask is true."""
    m = np.asarray(mask, dtype=bool)
    if m.shape != x.shape:
        raise ShapeError(f"masked_mean: mask {m.shape} vs tensor {x.shape}")
    n = int(m.sum())
    if n == 0:
        raise ValueError("masked_mean: empty mask")
    w = m / n
    return _node(np.asarray((x.data * w).sum()), (x,), lambda g: (float(g) * w,), "masked_mean")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """2D@2D, 3D@2D (shared right factor) or batched 3D@3D."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or b.ndim > a.ndim:
        raise ShapeError(f"matmul: unsupported ranks {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ {a.shape} @ {b.shape}")
    if a.ndim == 3 and b.ndim == 3 and a.shape[0] != b.shape[0]:
        raise ShapeError(f"matmul: batch dimensions differ {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    if a.ndim == b.ndim:
        def backward(g):
            return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g
    else:
        k, m = bd.shape

        def backward(g):
            return g @ bd.T, ad.reshape(-1, k).T @ g.reshape(-1, m)

    return _node(out, (a, b), backward, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w (+ b); x may be rank 2 or 3, w is (in, out)."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
    xd, wd = x.data, w.data
    k, m = wd.shape
    out = xd @ wd
    if b is None:
        return _node(out, (x, w), lambda g: (g @ wd.T, xd.reshape(-1, k).T @ g.reshape(-1, m)), "linear")
    if b.shape != (m,):
        raise ShapeError(f"linear: bias {b.shape} does not match output width {m}")
    out = out + b.data
    lead = tuple(range(xd.ndim - 1))

    def backward(g):
        return g @ wd.T, xd.reshape(-1, k).T @ g.reshape(-1, m), g.sum(axis=lead)

    return _node(out, (x, w, b), backward, "linear")


def transpose_last(x: Tensor) -> Tensor:
    return _node(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if len(shape) > MAX_RANK:
        raise ShapeError(f"reshape to rank {len(shape)} exceeds {MAX_RANK}")
    old = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    """(B, L, H*d) -> (B*H, L, d)."""
    B, L, D = x.shape
    if D % n_heads:
        raise ShapeError(f"split_heads: width {D} not divisible by {n_heads} heads")
    d = D // n_heads
    out = x.data.reshape(B, L, n_heads, d).transpose(0, 2, 1, 3).reshape(B * n_heads, L, d)

    def backward(g):
        return (g.reshape(B, n_heads, L, d).transpose(0, 2, 1, 3).reshape(B, L, D),)

    return _node(out, (x,), backward, "split_heads")


def merge_heads(x: Tensor, n_heads: int) -> Tensor:
    """(B*H, L, d) -> (B, L, H*d)."""
    BH, L, d = x.shape
    B = BH // n_heads
    out = x.data.reshape(B, n_heads, L, d).transpose(0, 2, 1, 3).reshape(B, L, n_heads * d)

    def backward(g):
        return (g.reshape(B, L, n_heads, d).transpose(0, 2, 1, 3).reshape(BH, L, d),)

    return _node(out, (x,), backward, "merge_heads")


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        full[..., start:stop] = g
        return (full,)

    return _node(x.data[..., start:stop].copy(), (x,), backward, "slice_last")


def concat_last(xs: Sequence[Tensor]) -> Tensor:
    widths = np.cumsum([0] + [t.shape[-1] for t in xs])

    def backward(g):
        return tuple(g[..., widths[i]:widths[i + 1]] for i in range(len(xs)))

    return _node(np.concatenate([t.data for t in xs], axis=-1), tuple(xs), backward, "concat_last")


# ---------------------------------------------------------------- indexing

def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Rows of `table` (V, D) selected by integer `ids` of rank 1 or 2."""
    ids = np.asarray(ids)
    V = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise IndexError(f"embedding: ids outside [0, {V})")
    shape = table.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return _node(table.data[ids], (table,), backward, "embedding")


def gather_positions(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """x[rows[i], cols[i], :] stacked into (N, D)."""
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, (rows, cols), g)
        return (full,)

    return _node(x.data[rows, cols], (x,), backward, "gather_positions")


def pick(x: Tensor, idx: np.ndarray) -> Tensor:
    """x[i, idx[i]] for a rank-2 x."""
    idx = np.asarray(idx)
    if x.ndim != 2 or idx.shape != (x.shape[0],):
        raise ShapeError(f"pick: expected (N, V) and (N,), got {x.shape} and {idx.shape}")
    n = np.arange(x.shape[0])
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        full[n, idx] = g
        return (full,)

    return _node(x.data[n, idx], (x,), backward, "pick")


# ---------------------------------------------------------------- softmax family

def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")


def softmax_array(logits: np.ndarray, tau: float = 1.0) -> np.ndarray:
    """Plain numpy softmax along the last axis, max-subtracted."""
    _check_tau(tau)
    z = logits / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_array(logits: np.ndarray, tau: float = 1.0) -> np.ndarray:
    _check_tau(tau)
    z = logits / tau
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits: Tensor, tau: float = 1.0) -> Tensor:
    p = softmax_array(logits.data, tau)

    def backward(g):
        return ((p * (g - (g * p).sum(axis=-1, keepdims=True))) / tau,)

    return _node(p, (logits,), backward, "softmax")


softmax_with_temperature = softmax


def log_softmax(logits: Tensor, tau: float = 1.0) -> Tensor:
    lp = log_softmax_array(logits.data, tau)
    p = np.exp(lp)

    def backward(g):
        return ((g - p * g.sum(axis=-1, keepdims=True)) / tau,)

    return _node(lp, (logits,), backward, "log_softmax")


def causal_softmax(scores: Tensor) -> Tensor:
    """Softmax over the last axis of (N, L, L) scores with key j > query i masked out."""
    L = scores.shape[-1]
    if scores.shape[-2] != L:
        raise ShapeError(f"causal_softmax: expected square attention scores, got {scores.shape}")
    future = np.triu(np.ones((L, L), dtype=bool), k=1)
    z = np.where(future, -np.inf, scores.data)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _node(p, (scores,), backward, "causal_softmax")


def pick_log_softmax(logits: Tensor, targets: np.ndarray, tau: float = 1.0, support=None) -> Tensor:
    """log q(targets[i]) where q = softmax(logits[i] / tau) renormalised over `support[i]`.

    `support` is an optional (N, V) boolean mask; each target must lie inside it.
    """
    _check_tau(tau)
    targets = np.asarray(targets)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(f"pick_log_softmax: expected (N, V) and (N,), got {logits.shape} and {targets.shape}")
    n = np.arange(logits.shape[0])
    z = logits.data / tau
    if support is not None:
        support = np.asarray(support, dtype=bool)
        if support.shape != logits.shape:
            raise ShapeError(f"pick_log_softmax: support {support.shape} vs logits {logits.shape}")
        if not support[n, targets].all():
            raise ValueError("pick_log_softmax: target outside its support")
        z = np.where(support, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e.sum(axis=-1, keepdims=True)
    q = e / s
    out = z[n, targets] - np.log(s[:, 0])

    def backward(g):
        grad = -q * g[:, None]
        grad[n, targets] += g
        return (grad / tau,)

    return _node(out, (logits,), backward, "pick_log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    D = x.shape[-1]
    if gain.shape != (D,) or bias.shape != (D,):
        raise ShapeError(f"layer_norm: parameters must have shape ({D},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _node(xhat * gd + bias.data, (x, gain, bias), backward, "layer_norm")


# ---------------------------------------------------------------- losses

def nll_loss(log_probs: Tensor, targets, mask=None) -> Tensor:
    """Mean of -log p(target) over masked positions.

    `log_probs` is (T, V) or (B, T, V); `targets` and `mask` match its leading axes.
    """
    targets = np.asarray(targets)
    lead = log_probs.shape[:-1]
    if targets.shape != lead:
        raise ShapeError(f"nll_loss: targets {targets.shape} do not match {lead}")
    mask = np.ones(lead, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if mask.shape != lead:
        raise ShapeError(f"nll_loss: mask {mask.shape} does not match {lead}")
    if not mask.any():
        raise ValueError("nll_loss: mask selects no supervised positions")
    V = log_probs.shape[-1]
    if targets[mask].size and (targets[mask].min() < 0 or targets[mask].max() >= V):
        raise IndexError("nll_loss: target outside the vocabulary")
    flat = reshape(log_probs, (-1, V)) if log_probs.ndim == 3 else log_probs
    picked = pick(flat, np.where(mask, targets, 0).reshape(-1))
    return scale(masked_mean(picked, mask.reshape(-1)), -1.0)


# ---------------------------------------------------------------- backward

def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> list[Tensor]:
    """Accumulate d(loss)/d(leaf) into `.grad` of every requires_grad leaf.

    The recorded graph is consumed: intermediate nodes drop their closures.
    Returns the leaves that received gradient.
    """
    if loss.data.size != 1 or loss.ndim != 0:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphConsumedError("graph already consumed by a previous backward")
    if not loss.requires_grad:
        return []
    tape = _topological(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
    leaves = []
    for node in reversed(tape):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                leaves.append(node)
            continue
        if g is not None:
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
        node._parents = ()
        node._backward = None
        node._consumed = True
    for leaf in leaves:
        if not np.isfinite(leaf.grad).all():
            raise NonFiniteError(f"non-finite gradient for {leaf.name or 'parameter'}")
    return leaves


def gradcheck(fn: Callable[[], Tensor], params: Iterable[Tensor], h: float = 1e-5,
              coords_per_param: int | None = None, rng: np.random.Generator | None = None,
              floor: float = 1e-6) -> float:
    """Largest relative error between analytic and central-difference gradients.

    Relative error per coordinate is |a - n| / max(|a|, |n|, floor). With
    `coords_per_param` only that many random coordinates per tensor are probed.
    """
    params = list(params)
    for p in params:
        p.grad = None
    backward(fn())
    worst = 0.0
    rng = rng or np.random.default_rng(0)
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if coords_per_param is not None and flat.size > coords_per_param:
            idx = rng.choice(flat.size, size=coords_per_param, replace=False)
        for i in idx:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + h
                up = fn().item()
                flat[i] = orig - h
                down = fn().item()
            flat[i] = orig
            num = (up - down) / (2 * h)
            a = analytic.reshape(-1)[i]
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), floor))
    return worst


# ---------------------------------------------------------------- optimiser

@dataclass
class AdamState:
    """Adam moments plus a linear warmup / linear decay learning-rate schedule."""

    lr: float
    warmup_steps: int
    total_steps: int
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def scheduled_lr(self, step: int | None = None) -> float:
        s = self.step if step is None else step
        if self.warmup_steps > 0 and s < self.warmup_steps:
            return self.lr * s / self.warmup_steps
        span = max(1, self.total_steps - self.warmup_steps)
        return self.lr * max(0.0, (self.total_steps - s) / span)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState) -> float:
    """One in-place Adam update; returns the learning rate that was applied."""
    if len(params) != len(grads):
        raise ValueError("adam_step: params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    for p, g, m in zip(params, grads, state.m):
        if g is not None and g.shape != p.shape:
            raise ShapeError(f"adam_step: grad {g.shape} vs param {p.shape}")
        if m.shape != p.shape:
            raise ShapeError("adam_step: moment shapes do not match parameters")
        if g is not None and not np.isfinite(g).all():
            raise NonFiniteError(f"adam_step: non-finite gradient for {p.name or 'parameter'}")
    lr = state.scheduled_lr()
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if lr != 0.0:
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    state.step = t
    return lr


class Adam:
    """Convenience wrapper binding a parameter list to an AdamState."""

    def __init__(self, params: Sequence[Tensor], lr: float, warmup_steps: int, total_steps: int,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, warmup_steps=warmup_steps, total_steps=total_steps,
                               beta1=betas[0], beta2=betas[1], eps=eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> float:
        return adam_step(self.params, [p.grad for p in self.params], self.state)


def global_norm(arrays: Iterable[np.ndarray | None]) -> float:
    return math.sqrt(sum(float((a * a).sum()) for a in arrays if a is not None))
