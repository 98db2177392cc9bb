"""Hot numeric kernels with a numba fast path and a pure-numpy fallback.

The backend is chosen at import time from the MOELAB_BACKEND environment
variable ("numba" or "numpy"). Default is numba when it imports cleanly,
numpy otherwise. `set_backend` switches at runtime (used by the tests and
the benchmark script). Matrix products are not kernels here: np.matmul
already dispatches to BLAS on both paths.

All kernels take and return float64 C-contiguous arrays. Within a backend
every kernel is deterministic: each output row/element is reduced in a
fixed order, so repeated calls are bit-identical.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit, prange

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dep, but stay usable
    HAS_NUMBA = False


# ---------------------------------------------------------------------------
# numpy implementations

def _softmax_rows_np(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=1, keepdims=True)


def _softmax_rows_grad_np(y: np.ndarray, gy: np.ndarray) -> np.ndarray:
    # dx = y * (gy - sum(y * gy)) row-wise
    dot = (y * gy).sum(axis=1, keepdims=True)
    return y * (gy - dot)


def _logsumexp_rows_np(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=1)
    return m + np.log(np.exp(x - m[:, None]).sum(axis=1))


def _pairwise_l1_np(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.empty((a.shape[0], b.shape[0]))
    for i in range(a.shape[0]):
        out[i] = np.abs(a[i] - b).sum(axis=1)
    return out


def _adamw_update_np(p, g, m, v, lr, beta1, beta2, eps, wd, bc1, bc2):
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    mhat = m / bc1
    vhat = v / bc2
    p -= lr * (mhat / (np.sqrt(vhat) + eps) + wd * p)


# ---------------------------------------------------------------------------
# numba implementations

if HAS_NUMBA:

    @njit(cache=True)
    def _softmax_rows_nb(x):
        rows, cols = x.shape
        out = np.empty_like(x)
        for i in range(rows):
            mx = x[i, 0]
            for j in range(1, cols):
                if x[i, j] > mx:
                    mx = x[i, j]
            s = 0.0
            for j in range(cols):
                e = np.exp(x[i, j] - mx)
                out[i, j] = e
                s += e
            inv = 1.0 / s
            for j in range(cols):
                out[i, j] *= inv
        return out

    @njit(cache=True)
    def _softmax_rows_grad_nb(y, gy):
        rows, cols = y.shape
        out = np.empty_like(y)
        for i in range(rows):
            dot = 0.0
            for j in range(cols):
                dot += y[i, j] * gy[i, j]
            for j in range(cols):
                out[i, j] = y[i, j] * (gy[i, j] - dot)
        return out

    @njit(cache=True)
    def _logsumexp_rows_nb(x):
        rows, cols = x.shape
        out = np.empty(rows)
        for i in range(rows):
            mx = x[i, 0]
            for j in range(1, cols):
                if x[i, j] > mx:
                    mx = x[i, j]
            s = 0.0
            for j in range(cols):
                s += np.exp(x[i, j] - mx)
            out[i] = mx + np.log(s)
        return out

    @njit(cache=True, parallel=True)
    def _pairwise_l1_nb(a, b):
        na, nb, dim = a.shape[0], b.shape[0], a.shape[1]
        out = np.empty((na, nb))
        for i in prange(na):
            for j in range(nb):
                s = 0.0
                for k in range(dim):
                    s += abs(a[i, k] - b[j, k])
                out[i, j] = s
        return out

    @njit(cache=True)
    def _adamw_update_nb(p, g, m, v, lr, beta1, beta2, eps, wd, bc1, bc2):
        n = p.size
        for i in range(n):
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i]
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i]
            mhat = m[i] / bc1
            vhat = v[i] / bc2
            p[i] -= lr * (mhat / (np.sqrt(vhat) + eps) + wd * p[i])


_IMPLS = {
    "numpy": {
        "softmax_rows": _softmax_rows_np,
        "softmax_rows_grad": _softmax_rows_grad_np,
        "logsumexp_rows": _logsumexp_rows_np,
        "pairwise_l1": _pairwise_l1_np,
        "adamw_update": _adamw_update_np,
    },
}
if HAS_NUMBA:
    _IMPLS["numba"] = {
        "softmax_rows": _softmax_rows_nb,
        "softmax_rows_grad": _softmax_rows_grad_nb,
        "logsumexp_rows": _logsumexp_rows_nb,
        "pairwise_l1": _pairwise_l1_nb,
        "adamw_update": _adamw_update_nb,
    }

_active = {}


def available_backends() -> tuple[str, ...]:
    return tuple(sorted(_IMPLS))


def get_backend() -> str:
    return _active["name"]


def set_backend(name: str) -> None:
    if name not in _IMPLS:
        raise ValueError(f"unknown backend {name!r}; available: {available_backends()}")
    _active.update(_IMPLS[name])
    _active["name"] = name


def _default_backend() -> str:
    env = os.environ.get("MOELAB_BACKEND", "").strip().lower()
    if env:
        if env not in _IMPLS:
            raise ValueError(
                f"MOELAB_BACKEND={env!r} not available; choose from {available_backends()}"
            )
        return env
    return "numba" if HAS_NUMBA else "numpy"


set_backend(_default_backend())


def _c2d(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float64)


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise stable softmax of a 2-d array."""
    return _active["softmax_rows"](_c2d(x))


def softmax_rows_grad(y: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Backward of row softmax given its output y and upstream grad gy."""
    return _active["softmax_rows_grad"](_c2d(y), _c2d(gy))


def logsumexp_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise stable log-sum-exp of a 2-d array."""
    return _active["logsumexp_rows"](_c2d(x))


def pairwise_l1(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """All-pairs L1 distances between rows of a [m,d] and rows of b [p,d]."""
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"feature dims differ: {a.shape} vs {b.shape}")
    return _active["pairwise_l1"](_c2d(a), _c2d(b))


def adamw_update(p, g, m, v, lr, beta1, beta2, eps, wd, bc1, bc2) -> None:
    """In-place fused AdamW step on flat float64 arrays (decoupled decay)."""
    _active["adamw_update"](p, g, m, v, lr, beta1, beta2, eps, wd, bc1, bc2)


def warmup() -> None:
    """Trigger JIT compilation of all kernels on tiny inputs."""
    x = np.array([[0.0, 1.0], [2.0, -1.0]])
    softmax_rows(x)
    softmax_rows_grad(x, x)
    logsumexp_rows(x)
    pairwise_l1(x, x)
    p = np.zeros(4)
    adamw_update(p, p.copy(), p.copy(), p.copy(), 0.0, 0.9, 0.999, 1e-8, 0.0, 1.0, 1.0)
