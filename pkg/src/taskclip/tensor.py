"""Small dense-tensor engine with reverse-mode autodiff.

Everything in the pipeline is a 2-D matrix (plus the odd scalar loss), so
the engine only handles that case. Each differentiable op builds a node that
keeps references to its parents and a closure that pushes the upstream
gradient back to them; ``Tensor.backward`` walks the graph in reverse
topological order.

Precision defaults to float32. ``float64_mode()`` switches new tensors to
float64 and additionally routes matrix products and attention reductions
through order-canonical kernels, so results for one row never depend on
where that row sits in the batch (needed for bit-exact permutation checks).
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "ConfigError",
    "UsageError",
    "Tensor",
    "AttentionParams",
    "float64_mode",
    "get_dtype",
    "tensor",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "relu",
    "sigmoid",
    "row_softmax",
    "layer_norm",
    "transpose",
    "l2_normalize_rows",
    "concat_rows",
    "sum_all",
    "mean_all",
    "mse_loss",
    "scaled_dot_attention",
    "multi_head_attention",
    "grad_check",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ConfigError(ValueError):
    """A structural hyperparameter is invalid (e.g. D not divisible by heads)."""


class UsageError(RuntimeError):
    """An API was called in a context it does not support."""


_DTYPE = np.float32


def get_dtype() -> type:
    return _DTYPE


@contextlib.contextmanager
def float64_mode() -> Iterator[None]:
    """Create tensors in float64 and use order-canonical kernels while active."""
    global _DTYPE
    prev = _DTYPE
    _DTYPE = np.float64
    try:
        yield
    finally:
        _DTYPE = prev


def _exact() -> bool:
    return _DTYPE == np.float64


class Tensor:
    """A 2-D (or scalar) array node in the autodiff graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (),
                 _backward: Callable[[np.ndarray], None] | None = None, op: str = ""):
        arr = np.asarray(data)
        if arr.dtype != _DTYPE:
            arr = arr.astype(_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        """Backpropagate from this scalar through every reachable node."""
        if self.data.size != 1:
            raise UsageError(f"backward() needs a scalar output, got shape {self.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, _parents=tuple(parents) if needs else (),
                  _backward=backward if needs else None, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot combine shapes {a.shape} and {b.shape}") from None


# --- raw kernels -------------------------------------------------------------

def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if _exact():
        # per-element sequential sum over k: independent of row/column position
        return (a[:, :, None] * b[None, :, :]).sum(axis=1)
    return a @ b


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    if _exact():
        denom = np.sort(z, axis=-1).sum(axis=-1, keepdims=True)
    else:
        denom = z.sum(axis=-1, keepdims=True)
    return z / denom


# --- elementary ops ----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions differ for {a.shape} x {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_mm(g, b.data.T))
        if b.requires_grad:
            b._accumulate(_mm(a.data.T, g))

    return _node(_mm(a.data, b.data), (a, b), backward, "matmul")


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _node(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _node(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    """Elementwise (broadcasting) product."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, (a, b), backward, "mul")


def scale(x: Tensor, c: float) -> Tensor:
    x = _as_tensor(x)
    c = float(c)

    def backward(g):
        x._accumulate(g * c)

    return _node(x.data * x.data.dtype.type(c), (x,), backward, "scale")


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0

    def backward(g):
        x._accumulate(g * mask)

    return _node(np.where(mask, x.data, 0).astype(x.dtype), (x,), backward, "relu")


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    d = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype)

    def backward(g):
        x._accumulate(g * out * (1 - out))

    return _node(out, (x,), backward, "sigmoid")


def row_softmax(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = _softmax_rows(x.data)

    def backward(g):
        x._accumulate(out * (g - (g * out).sum(axis=-1, keepdims=True)))

    return _node(out, (x,), backward, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row to zero mean / unit variance, then apply gain and bias."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    n = x.shape[-1]
    if gain.shape != (1, n) or bias.shape != (1, n):
        raise DimensionError(f"layer_norm: gain {gain.shape} / bias {bias.shape} do not fit rows of {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        if gain.requires_grad:
            gain._accumulate((g * xhat).sum(axis=0, keepdims=True))
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=0, keepdims=True))
        if x.requires_grad:
            dxhat = g * gain.data
            dx = inv / n * (n * dxhat - dxhat.sum(axis=-1, keepdims=True)
                            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
            x._accumulate(dx)

    return _node(out, (x, gain, bias), backward, "layer_norm")


def transpose(x: Tensor) -> Tensor:
    x = _as_tensor(x)

    def backward(g):
        x._accumulate(g.T)

    return _node(np.ascontiguousarray(x.data.T), (x,), backward, "transpose")


def l2_normalize_rows(x: Tensor) -> Tensor:
    """Scale each row to unit Euclidean norm; all-zero rows are passed through."""
    x = _as_tensor(x)
    norms = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    zero = norms == 0
    safe = np.where(zero, 1, norms)
    out = x.data / safe

    def backward(g):
        proj = (g * out).sum(axis=1, keepdims=True)
        dx = np.where(zero, g, (g - out * proj) / safe)
        x._accumulate(dx)

    return _node(out, (x,), backward, "l2_normalize_rows")


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise DimensionError("concat_rows: nothing to concatenate")
    cols = {p.shape[1] for p in parts}
    if len(cols) != 1:
        raise DimensionError(f"concat_rows: column counts differ {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def backward(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if p.requires_grad:
                p._accumulate(g[lo:hi])

    return _node(np.concatenate([p.data for p in parts], axis=0), parts, backward, "concat_rows")


def sum_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)

    def backward(g):
        x._accumulate(np.broadcast_to(g, x.shape))

    return _node(np.asarray(x.data.sum()), (x,), backward, "sum")


def mean_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    n = x.data.size

    def backward(g):
        x._accumulate(np.broadcast_to(g / n, x.shape))

    return _node(np.asarray(x.data.mean()), (x,), backward, "mean")


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean squared difference between two equally shaped tensors."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"mse_loss: pred {pred.shape} vs target {target.shape}")
    diff = pred.data - target.data
    n = max(diff.size, 1)

    def backward(g):
        if pred.requires_grad:
            pred._accumulate(g * 2.0 * diff / n)
        if target.requires_grad:
            target._accumulate(-g * 2.0 * diff / n)

    return _node(np.asarray((diff * diff).sum() / n), (pred, target), backward, "mse")


# --- attention ---------------------------------------------------------------

def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    n, d = x.shape
    return x.reshape(n, heads, d // heads).transpose(1, 0, 2)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    h, n, dh = x.shape
    return x.transpose(1, 0, 2).reshape(n, h * dh)


def _bmm(a: np.ndarray, b: np.ndarray, sort_k: bool = False) -> np.ndarray:
    if not _exact():
        return a @ b
    prod = a[:, :, :, None] * b[:, None, :, :]
    if sort_k:
        prod = np.sort(prod, axis=2)
    return prod.sum(axis=2)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, heads: int,
                         weights_out: list | None = None) -> Tensor:
    """Multi-head softmax(q kᵀ / sqrt(d_head)) v on already-projected inputs.

    ``q`` is [Q×D]; ``k`` and ``v`` are [S×D]. Heads are contiguous column
    blocks. If ``weights_out`` is a list, the [heads×Q×S] attention weights are
    appended to it.
    """
    q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    d = q.shape[1]
    if k.shape != v.shape or k.shape[1] != d:
        raise DimensionError(f"attention: query {q.shape}, key {k.shape}, value {v.shape}")
    if heads < 1 or d % heads:
        raise ConfigError(f"attention: width {d} is not divisible by {heads} heads")
    c = 1.0 / math.sqrt(d // heads)
    qh, kh, vh = (_split_heads(t.data, heads) for t in (q, k, v))
    p = np.stack([_softmax_rows(s) for s in _bmm(qh, kh.transpose(0, 2, 1)) * c])
    # the key axis is the one a box permutation reorders, so sort it in exact mode
    out = _merge_heads(_bmm(p, vh, sort_k=True))
    if weights_out is not None:
        weights_out.append(p)

    def backward(g):
        gh = _split_heads(g, heads)
        dp = gh @ vh.transpose(0, 2, 1)
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True)) * c
        if q.requires_grad:
            q._accumulate(_merge_heads(ds @ kh))
        if k.requires_grad:
            k._accumulate(_merge_heads(ds.transpose(0, 2, 1) @ qh))
        if v.requires_grad:
            v._accumulate(_merge_heads(p.transpose(0, 2, 1) @ gh))

    return _node(out, (q, k, v), backward, "attention")


class AttentionParams:
    """Projection weights wq, wk, wv, wo, each [D×D]."""

    __slots__ = ("wq", "wk", "wv", "wo")

    def __init__(self, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor):
        self.wq, self.wk, self.wv, self.wo = wq, wk, wv, wo

    @classmethod
    def from_mapping(cls, params: Mapping[str, Tensor], prefix: str) -> "AttentionParams":
        return cls(*(params[f"{prefix}.{n}"] for n in ("wq", "wk", "wv", "wo")))


def multi_head_attention(query: Tensor, memory: Tensor, params: AttentionParams, heads: int,
                         weights_out: list | None = None) -> Tensor:
    """Project, attend per head, concatenate and output-project.

    Self-attention is the ``query is memory`` case.
    """
    d = query.shape[1]
    if memory.shape[1] != d:
        raise DimensionError(f"attention: query {query.shape} and memory {memory.shape} widths differ")
    if heads < 1 or d % heads:
        raise ConfigError(f"attention: width {d} is not divisible by {heads} heads")
    if memory.shape[0] == 0:
        raise DimensionError("attention: memory has no rows")
    q = matmul(query, params.wq)
    k = matmul(memory, params.wk)
    v = matmul(memory, params.wv)
    return matmul(scaled_dot_attention(q, k, v, heads, weights_out), params.wo)


# --- verification ------------------------------------------------------------

def grad_check(f: Callable[[], Tensor], inputs: Mapping[str, Tensor] | Iterable[Tensor],
               step: float = 1e-5, max_entries: int | None = None, seed: int = 0,
               floor: float = 1e-8) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``f`` recomputes a scalar from the current contents of ``inputs``. Per
    tensor the error is ``|a - n| / max(|a| + |n|, floor)`` (Euclidean norms
    over the checked entries). ``max_entries`` caps how many randomly chosen
    entries of each tensor are perturbed.
    """
    named = dict(inputs) if isinstance(inputs, Mapping) else {str(i): t for i, t in enumerate(inputs)}
    for name, t in named.items():
        if t.dtype != np.float64:
            raise UsageError(f"grad_check needs float64 tensors; {name} is {t.dtype}")
    for t in named.values():
        t.requires_grad = True
        t.zero_grad()
    out = f()
    if out.data.size != 1:
        raise UsageError(f"grad_check needs a scalar function, got shape {out.shape}")
    out.backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in named.values():
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        numeric = np.empty(idx.size)
        for n, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + step
            hi = f().item()
            flat[i] = orig - step
            lo = f().item()
            flat[i] = orig
            numeric[n] = (hi - lo) / (2 * step)
        a = analytic.reshape(-1)[idx]
        err = np.linalg.norm(a - numeric) / max(np.linalg.norm(a) + np.linalg.norm(numeric), floor)
        worst = max(worst, float(err))
    for t in named.values():
        t.zero_grad()
    return worst
