"""Dense float64 tensors with reverse-mode autodiff and a counter-based RNG.

The Tensor here is a thin wrapper over a numpy array plus a closure-based
tape (micrograd style, vectorized). Everything downstream — the frozen
encoder, the adapters, the contrastive losses — is built from the ops in
this module, so one finite-difference checker at the bottom validates the
whole stack.

Tensors are immutable once created; only `grad` buffers accumulate, and
the optimizer (the single writer during training) updates leaf `data`
in place between steps.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_INV_2_53 = float(2.0 ** -53)


def _mix64(x: np.ndarray | np.uint64) -> np.ndarray | np.uint64:
    # splitmix64 finalizer; uint64 arithmetic wraps mod 2^64 by design
    with np.errstate(over="ignore"):
        z = x + _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))


def derive_seed(seed: int, *labels: object) -> int:
    """Deterministically derive a 64-bit sub-seed from a seed and labels."""
    h = _mix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF))
    with np.errstate(over="ignore"):
        for label in labels:
            for byte in str(label).encode("utf-8"):
                h = (h ^ np.uint64(byte)) * np.uint64(0x100000001B3)
            h = _mix64(h)
    return int(h)


@dataclass
class RngState:
    """Counter-based RNG state: (seed, counter) fully determines every draw.

    Each 64-bit word is splitmix64 evaluated at seed-keyed counter i, so
    draws are reproducible across runs regardless of call interleaving
    elsewhere. No global state.
    """

    seed: int
    counter: int = 0

    def _words(self, n: int) -> np.ndarray:
        key = _mix64(np.uint64(self.seed & 0xFFFFFFFFFFFFFFFF))
        idx = np.arange(self.counter, self.counter + n, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            return _mix64(key + _GOLDEN * idx)

    def uniform(self, n: int) -> np.ndarray:
        """n doubles uniform on (0, 1]."""
        w = self._words(n)
        return ((w >> np.uint64(11)).astype(np.float64) + 1.0) * _INV_2_53

    def normal(self, n: int) -> np.ndarray:
        """n standard normal doubles via Box-Muller over uniform pairs."""
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs)
        r = np.sqrt(-2.0 * np.log(u[0::2]))
        theta = 2.0 * np.pi * u[1::2]
        out = np.empty(2 * pairs)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:n]

    def integers(self, n: int, high: int) -> np.ndarray:
        """n ints uniform on [0, high)."""
        if high <= 0:
            raise ValueError("high must be positive")
        w = self._words(n)
        return ((w >> np.uint64(11)).astype(np.float64) * _INV_2_53 * high).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        """Random permutation of range(n) via argsort of uniform keys."""
        keys = self.uniform(n)
        return np.argsort(keys, kind="stable")


class Tensor:
    """A float64 array node on a reverse-mode tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple = (),
        _backward: Callable[[], None] | None = None,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward

    # -- introspection ------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else _non_scalar(self)

    def detach(self) -> "Tensor":
        """A new leaf sharing data, cut off from the tape."""
        return Tensor(self.data)

    def _accum(self, g: np.ndarray, owned: bool = False) -> None:
        # owned=True promises g is a fresh array no other node aliases, so
        # it can be adopted as the grad buffer without a defensive copy
        if self.grad is None:
            if owned:
                self.grad = g
            else:
                self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    # -- arithmetic ---------------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = _as_tensor(other)
        out_data = self.data + other.data
        req = self.requires_grad or other.requires_grad
        out = Tensor(out_data, req, (self, other))
        if req:
            def bw():
                if self.requires_grad:
                    g = _unbroadcast(out.grad, self.shape)
                    self._accum(g, owned=g is not out.grad)
                if other.requires_grad:
                    g = _unbroadcast(out.grad, other.shape)
                    other._accum(g, owned=g is not out.grad)
            out._backward = bw
        return out

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        out = Tensor(-self.data, self.requires_grad, (self,))
        if self.requires_grad:
            out._backward = lambda: self._accum(-out.grad, owned=True)
        return out

    def __sub__(self, other) -> "Tensor":
        return self + (-_as_tensor(other))

    def __rsub__(self, other) -> "Tensor":
        return _as_tensor(other) + (-self)

    def __mul__(self, other) -> "Tensor":
        other = _as_tensor(other)
        out_data = self.data * other.data
        req = self.requires_grad or other.requires_grad
        out = Tensor(out_data, req, (self, other))
        if req:
            def bw():
                if self.requires_grad:
                    self._accum(_unbroadcast(out.grad * other.data, self.shape), owned=True)
                if other.requires_grad:
                    other._accum(_unbroadcast(out.grad * self.data, other.shape), owned=True)
            out._backward = bw
        return out

    __rmul__ = __mul__

    def __truediv__(self, scalar) -> "Tensor":
        if isinstance(scalar, Tensor) or not np.isscalar(scalar):
            raise ValueError("tensor division only supports scalar divisors")
        return self * (1.0 / float(scalar))

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    # -- shape --------------------------------------------------------

    def reshape(self, *shape: int) -> "Tensor":
        out = Tensor(self.data.reshape(shape), self.requires_grad, (self,))
        if self.requires_grad:
            out._backward = lambda: self._accum(out.grad.reshape(self.shape))
        return out

    def transpose_last2(self) -> "Tensor":
        if self.ndim < 2:
            raise ValueError("transpose_last2 needs ndim >= 2")
        out = Tensor(self.data.swapaxes(-1, -2), self.requires_grad, (self,))
        if self.requires_grad:
            out._backward = lambda: self._accum(out.grad.swapaxes(-1, -2))
        return out

    # -- elementwise --------------------------------------------------

    def tanh(self) -> "Tensor":
        y = np.tanh(self.data)
        out = Tensor(y, self.requires_grad, (self,))
        if self.requires_grad:
            out._backward = lambda: self._accum(out.grad * (1.0 - y * y), owned=True)
        return out

    def exp(self) -> "Tensor":
        y = np.exp(self.data)
        out = Tensor(y, self.requires_grad, (self,))
        if self.requires_grad:
            out._backward = lambda: self._accum(out.grad * y, owned=True)
        return out

    def log(self) -> "Tensor":
        out = Tensor(np.log(self.data), self.requires_grad, (self,))
        if self.requires_grad:
            out._backward = lambda: self._accum(out.grad / self.data, owned=True)
        return out

    # -- reductions ---------------------------------------------------

    def sum(self) -> "Tensor":
        out = Tensor(self.data.sum(), self.requires_grad, (self,))
        if self.requires_grad:
            out._backward = lambda: self._accum(
                np.full(self.shape, float(out.grad)), owned=True
            )
        return out

    def mean(self) -> "Tensor":
        return self.sum() / float(self.size)

    def backward(self) -> None:
        backward(self)


def _non_scalar(t: Tensor):
    raise ValueError(f"expected scalar tensor, got shape {t.shape}")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    g = grad
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; supports 2d x 2d, stacked 3d x 2d, and 3d x 3d.

    The stacked (3d x 2d) case folds the leading axes into one GEMM; each
    output row depends only on its own input row, so per-sample results do
    not change with batch composition.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if not ((a.ndim, b.ndim) in ((2, 2), (3, 2), (3, 3))):
        raise ValueError(f"matmul supports 2dx2d, 3dx2d, 3dx3d; got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"inner dimensions mismatch: {a.shape} @ {b.shape}")
    if a.ndim == 3 and b.ndim == 3 and a.shape[0] != b.shape[0]:
        raise ValueError(f"batch dimensions mismatch: {a.shape} @ {b.shape}")
    req = a.requires_grad or b.requires_grad

    if a.ndim == 3 and b.ndim == 2:
        bsz, rows, inner = a.shape
        cols = b.shape[1]
        a2 = a.data.reshape(bsz * rows, inner)
        out = Tensor((a2 @ b.data).reshape(bsz, rows, cols), req, (a, b))
        if req:
            def bw():
                g2 = out.grad.reshape(bsz * rows, cols)
                if a.requires_grad:
                    a._accum((g2 @ b.data.T).reshape(a.shape), owned=True)
                if b.requires_grad:
                    b._accum(a2.T @ g2, owned=True)
            out._backward = bw
        return out

    out = Tensor(np.matmul(a.data, b.data), req, (a, b))
    if req:
        def bw():
            g = out.grad
            if a.requires_grad:
                a._accum(np.matmul(g, b.data.swapaxes(-1, -2)), owned=True)
            if b.requires_grad:
                b._accum(np.matmul(a.data.swapaxes(-1, -2), g), owned=True)
        out._backward = bw
    return out


def softmax_rows(t: Tensor, temperature: float = 1.0) -> Tensor:
    """Softmax over the last axis with max-subtraction; rows sum to 1.

    Argmax per row is preserved for every positive temperature.
    """
    t = _as_tensor(t)
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if not np.isfinite(t.data).all():
        raise ValueError("softmax_rows requires finite logits")
    last = t.shape[-1]
    z = t.data.reshape(-1, last) / temperature
    y2 = kernels.softmax_rows(z)
    y = y2.reshape(t.shape)
    out = Tensor(y, t.requires_grad, (t,))
    if t.requires_grad:
        def bw():
            gy = out.grad.reshape(-1, last)
            gx = kernels.softmax_rows_grad(y2, gy) / temperature
            t._accum(gx.reshape(t.shape), owned=True)
        out._backward = bw
    return out


def logsumexp_rows(t: Tensor) -> Tensor:
    """log(sum(exp(x))) over the last axis of a 2-d tensor, stabilized."""
    t = _as_tensor(t)
    if t.ndim != 2:
        raise ValueError(f"logsumexp_rows expects 2d input, got {t.shape}")
    lse = kernels.logsumexp_rows(t.data)
    out = Tensor(lse, t.requires_grad, (t,))
    if t.requires_grad:
        def bw():
            # d lse / dx = softmax(x)
            sm = np.exp(t.data - lse[:, None])
            t._accum(sm * out.grad[:, None], owned=True)
        out._backward = bw
    return out


def affine(t: Tensor, scale: float, shift: np.ndarray | float = 0.0) -> Tensor:
    """Elementwise t * scale + shift for constant scale/shift (one node)."""
    t = _as_tensor(t)
    out = Tensor(t.data * scale + shift, t.requires_grad, (t,))
    if t.requires_grad:
        out._backward = lambda: t._accum(out.grad * scale, owned=True)
    return out


def rmsnorm(t: Tensor, eps: float = 1e-6) -> Tensor:
    """x / sqrt(mean(x^2) + eps) over the last axis."""
    t = _as_tensor(t)
    ms = (t.data * t.data).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(ms + eps)
    y = t.data * inv
    out = Tensor(y, t.requires_grad, (t,))
    if t.requires_grad:
        n = t.shape[-1]
        def bw():
            g = out.grad
            dot = (g * t.data).sum(axis=-1, keepdims=True)
            t._accum(inv * g - (inv ** 3 / n) * dot * t.data, owned=True)
        out._backward = bw
    return out


def l2_normalize_rows(t: Tensor, eps: float = 1e-12) -> Tensor:
    """x / ||x||_2 over the last axis."""
    t = _as_tensor(t)
    norm = np.sqrt((t.data * t.data).sum(axis=-1, keepdims=True) + eps)
    y = t.data / norm
    out = Tensor(y, t.requires_grad, (t,))
    if t.requires_grad:
        def bw():
            g = out.grad
            dot = (g * y).sum(axis=-1, keepdims=True)
            t._accum((g - y * dot) / norm, owned=True)
        out._backward = bw
    return out


def take_rows(t: Tensor, idx: Sequence[int]) -> Tensor:
    """Select rows of a 2-d tensor by index (gather; backward scatter-adds)."""
    t = _as_tensor(t)
    if t.ndim != 2:
        raise ValueError(f"take_rows expects 2d input, got {t.shape}")
    idx = np.asarray(idx, dtype=np.int64)
    out = Tensor(t.data[idx], t.requires_grad, (t,))
    if t.requires_grad:
        def bw():
            g = np.zeros_like(t.data)
            np.add.at(g, idx, out.grad)
            t._accum(g, owned=True)
        out._backward = bw
    return out


def take_positions(t: Tensor, pos: Sequence[int]) -> Tensor:
    """Per-sample position gather: [B,T,D] with pos[B] -> [B,D]."""
    t = _as_tensor(t)
    if t.ndim != 3:
        raise ValueError(f"take_positions expects 3d input, got {t.shape}")
    pos = np.asarray(pos, dtype=np.int64)
    rows = np.arange(t.shape[0])
    out = Tensor(t.data[rows, pos], t.requires_grad, (t,))
    if t.requires_grad:
        def bw():
            g = np.zeros_like(t.data)
            g[rows, pos] = out.grad
            t._accum(g, owned=True)
        out._backward = bw
    return out


def take_last(t: Tensor, index: int) -> Tensor:
    """Slice index i of the last axis, keeping the axis with size 1."""
    t = _as_tensor(t)
    out = Tensor(t.data[..., index:index + 1], t.requires_grad, (t,))
    if t.requires_grad:
        def bw():
            g = np.zeros_like(t.data)
            g[..., index:index + 1] = out.grad
            t._accum(g, owned=True)
        out._backward = bw
    return out


def concat_rows(parts: Iterable[Tensor]) -> Tensor:
    """Concatenate 2-d tensors along axis 0."""
    parts = list(parts)
    req = any(p.requires_grad for p in parts)
    out = Tensor(np.concatenate([p.data for p in parts], axis=0), req, tuple(parts))
    if req:
        sizes = [p.shape[0] for p in parts]
        def bw():
            off = 0
            for p, n in zip(parts, sizes):
                if p.requires_grad:
                    p._accum(out.grad[off:off + n])
                off += n
        out._backward = bw
    return out


def diag_part(t: Tensor) -> Tensor:
    """Diagonal of a square 2-d tensor."""
    t = _as_tensor(t)
    if t.ndim != 2 or t.shape[0] != t.shape[1]:
        raise ValueError(f"diag_part expects a square matrix, got {t.shape}")
    out = Tensor(np.diagonal(t.data).copy(), t.requires_grad, (t,))
    if t.requires_grad:
        n = t.shape[0]
        def bw():
            g = np.zeros_like(t.data)
            g[np.arange(n), np.arange(n)] = out.grad
            t._accum(g, owned=True)
        out._backward = bw
    return out


def backward(loss: Tensor) -> None:
    """Populate grad buffers of every requires_grad tensor reachable from loss.

    Repeated calls accumulate into existing grads; callers reset between
    steps.
    """
    if loss.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    loss._accum(np.ones_like(loss.data), owned=True)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward()


# ---------------------------------------------------------------------------
# initialization and verification


def randn(shape: Sequence[int], scale: float, rng: RngState) -> Tensor:
    """Seeded normal tensor with standard deviation `scale`.

    Box-Muller over the counter-based stream; same (shape, scale, seed,
    counter) always yields identical values. scale 0 is allowed and gives
    an exactly-zero tensor.
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0 or any(s <= 0 for s in shape):
        raise ValueError(f"shape must be non-empty with positive dims, got {shape}")
    if scale < 0:
        raise ValueError(f"scale must be non-negative, got {scale}")
    n = int(np.prod(shape))
    vals = rng.normal(n) * scale
    return Tensor(vals.reshape(shape))


def zeros(shape: Sequence[int], requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(tuple(shape)), requires_grad=requires_grad)


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    epsilon: float = 1e-5,
    *,
    coords: Sequence[int] | None = None,
) -> float:
    """Max relative error between tape gradients and central differences.

    Error per coordinate is |analytic - numeric| / max(1, |analytic|).
    `coords` restricts the check to a flat-index subset (all by default).
    """
    if not (1e-7 <= epsilon <= 1e-3):
        raise ValueError(f"epsilon must be in [1e-7, 1e-3], got {epsilon}")
    leaf = Tensor(x.data.copy(), requires_grad=True)
    loss = f(leaf)
    if loss.size != 1:
        raise ValueError("f must return a scalar tensor")
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("f returned a non-finite value")
    backward(loss)
    analytic = np.zeros(leaf.size) if leaf.grad is None else leaf.grad.reshape(-1)

    flat = x.data.reshape(-1).copy()
    indices = range(flat.size) if coords is None else coords
    worst = 0.0
    for i in indices:
        orig = flat[i]
        flat[i] = orig + epsilon
        fp = f(Tensor(flat.reshape(x.shape))).data
        flat[i] = orig - epsilon
        fm = f(Tensor(flat.reshape(x.shape))).data
        flat[i] = orig
        if not (np.isfinite(fp).all() and np.isfinite(fm).all()):
            raise FloatingPointError("f returned a non-finite value")
        numeric = float(fp - fm) / (2.0 * epsilon)
        err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
        worst = max(worst, err)
    return worst
