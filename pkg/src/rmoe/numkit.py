"""Dense numeric kernels.

Tensors are plain row-major ``numpy.ndarray`` values. Training paths run in
float32, verification paths in float64. Every kernel rejects non-finite
inputs/outputs with :class:`NonFiniteError`.

Reduction order
---------------
``matmul`` and ``batched_matmul`` accumulate sequentially over the inner
extent (``out[i, j] = ((a[i,0]*b[0,j]) + a[i,1]*b[1,j]) + ...``) in compiled
loops without fused multiply-add, so results match a naive triple loop
bit-for-bit. Other reductions use numpy's fixed pairwise order, which is
deterministic for a given shape and dtype.
"""

from __future__ import annotations

import math

import numba
import numpy as np

SVD_TOL = 1e-10
SVD_SWEEPS_PER_DIM = 100

GELU_C = math.sqrt(2.0 / math.pi)


class NonFiniteError(FloatingPointError):
    """A kernel received or would produce NaN/Inf."""


class ShapeError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    pass


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite values in {what}")
    return x


def tensor(data, dtype=np.float32) -> np.ndarray:
    """Build a validated contiguous tensor."""
    arr = np.ascontiguousarray(np.asarray(data, dtype=dtype))
    return check_finite(arr, "tensor construction")


# --------------------------------------------------------------------- rng


class SeededRng:
    """Counter-based Philox4x64 stream keyed by a 64-bit seed.

    ``spawn(*keys)`` derives an independent child stream whose key is a
    deterministic function of the parent seed and ``keys``; no parent state is
    consumed, so derivation order never matters.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))

    def spawn(self, *keys: int) -> "SeededRng":
        h = self.seed
        for k in keys:
            # splitmix64 finaliser over the combined key
            h = (h ^ (int(k) & 0xFFFFFFFFFFFFFFFF)) + 0x9E3779B97F4A7C15
            h &= 0xFFFFFFFFFFFFFFFF
            h = ((h ^ (h >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
            h = ((h ^ (h >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
            h ^= h >> 31
        return SeededRng(h)

    def normal(self, shape, dtype=np.float64) -> np.ndarray:
        return self._gen.standard_normal(shape).astype(dtype)

    def uniform(self, low=0.0, high=1.0, shape=None) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def gamma(self, shape_k, scale, shape=None) -> np.ndarray:
        return self._gen.gamma(shape_k, scale, shape)

    def integers(self, low, high=None, shape=None) -> np.ndarray:
        return self._gen.integers(low, high, shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


# ------------------------------------------------------------------ matmul


@numba.njit(cache=True)
def _mm_kernel(a, b, out):
    m, k = a.shape
    n = b.shape[1]
    acc = np.empty(n, dtype=np.float64)
    for i in range(m):
        acc[:] = 0.0
        for p in range(k):
            aip = np.float64(a[i, p])
            for j in range(n):
                acc[j] += aip * np.float64(b[p, j])
        for j in range(n):
            out[i, j] = acc[j]


@numba.njit(cache=True)
def _bmm_kernel(a, b, out):
    nb, m, k = a.shape
    n = b.shape[2]
    acc = np.empty(n, dtype=np.float64)
    for t in range(nb):
        for i in range(m):
            acc[:] = 0.0
            for p in range(k):
                aip = np.float64(a[t, i, p])
                for j in range(n):
                    acc[j] += aip * np.float64(b[t, p, j])
            for j in range(n):
                out[t, i, j] = acc[j]


def _common_dtype(a: np.ndarray, b: np.ndarray):
    return np.result_type(a.dtype, b.dtype, np.float32)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product ``a @ b``: float64 accumulation in sequential k order, one rounding to the output dtype."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    dt = _common_dtype(a, b)
    a = np.ascontiguousarray(a, dtype=dt)
    b = np.ascontiguousarray(b, dtype=dt)
    out = np.empty((a.shape[0], b.shape[1]), dtype=dt)
    if dt.itemsize > 8:
        # extended-precision reference path (finite-difference checks only)
        out[...] = np.matmul(a, b)
    else:
        _mm_kernel(a, b, out)
    return check_finite(out, "matmul result")


def batched_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b`` over matching leading batch dimensions."""
    if a.ndim < 3 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"batched_matmul batch shapes differ: {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"batched_matmul inner extents differ: {a.shape} x {b.shape}")
    lead = a.shape[:-2]
    dt = _common_dtype(a, b)
    a3 = np.ascontiguousarray(a, dtype=dt).reshape((-1,) + a.shape[-2:])
    b3 = np.ascontiguousarray(b, dtype=dt).reshape((-1,) + b.shape[-2:])
    out = np.empty((a3.shape[0], a.shape[-2], b.shape[-1]), dtype=dt)
    if dt.itemsize > 8:
        out[...] = np.matmul(a3, b3)
    else:
        _bmm_kernel(a3, b3, out)
    return check_finite(out.reshape(lead + out.shape[1:]), "batched_matmul result")


# -------------------------------------------------------- pointwise / norms


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    if x.shape[axis] == 0:
        raise ShapeError("softmax over an empty axis")
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def gelu(x: np.ndarray) -> np.ndarray:
    """tanh-form GELU."""
    inner = GELU_C * (x + 0.044715 * x**3)
    return 0.5 * x * (1.0 + np.tanh(inner))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    inner = GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    dinner = GELU_C * (1.0 + 3 * 0.044715 * x**2)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0, x).astype(x.dtype, copy=False)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return (0.5 * (1.0 + np.tanh(0.5 * x))).astype(x.dtype, copy=False)


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Normalise each row over the last axis, then apply ``gain``/``bias``."""
    if x.shape[-1] == 0:
        raise ShapeError("layer_norm over a zero-length row")
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ShapeError(f"gain/bias must have shape {x.shape[-1:]}")
    xhat, _ = _normalize(x, eps)
    return check_finite(xhat * gain + bias, "layer_norm result")


def _normalize(x, eps):
    mu = np.mean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    if eps == 0 and np.any(var == 0):
        raise NonFiniteError("layer_norm of a constant row with eps=0")
    inv = 1.0 / np.sqrt(var + eps)
    return xc * inv, inv


# --------------------------------------------------------------------- svd


@numba.njit(cache=True)
def _jacobi_sweeps(a, v, tol, max_sweeps):
    # one-sided (Hestenes) Jacobi on the columns of a (m x n, m >= n)
    m, n = a.shape
    for sweep in range(max_sweeps):
        off = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = 0.0
                beta = 0.0
                gamma = 0.0
                for i in range(m):
                    alpha += a[i, p] * a[i, p]
                    beta += a[i, q] * a[i, q]
                    gamma += a[i, p] * a[i, q]
                if gamma == 0.0:
                    continue
                denom = math.sqrt(alpha * beta)
                rel = abs(gamma) / denom
                if rel > off:
                    off = rel
                if rel <= tol:
                    continue
                zeta = (beta - alpha) / (2.0 * gamma)
                if zeta >= 0:
                    t = 1.0 / (zeta + math.sqrt(1.0 + zeta * zeta))
                else:
                    t = -1.0 / (-zeta + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                for i in range(m):
                    ap = a[i, p]
                    aq = a[i, q]
                    a[i, p] = c * ap - s * aq
                    a[i, q] = s * ap + c * aq
                for i in range(n):
                    vp = v[i, p]
                    vq = v[i, q]
                    v[i, p] = c * vp - s * vq
                    v[i, q] = s * vp + c * vq
        if off <= tol:
            return sweep + 1
    return -1


def _complete_orthonormal(u: np.ndarray, filled: np.ndarray) -> np.ndarray:
    """Fill columns of ``u`` where ``filled`` is False with orthonormal vectors."""
    m, r = u.shape
    basis = [u[:, j] for j in range(r) if filled[j]]
    candidates = iter(np.eye(m))
    for j in range(r):
        if filled[j]:
            continue
        while True:
            c = next(candidates).copy()
            for _ in range(2):
                for b in basis:
                    c -= (b @ c) * b
            norm = np.linalg.norm(c)
            if norm > 1e-6:
                break
        u[:, j] = c / norm
        basis.append(u[:, j])
    return u


def svd(w: np.ndarray, tol: float = SVD_TOL, max_sweeps: int | None = None):
    """Thin SVD ``w = U diag(S) V^T`` by one-sided Jacobi, in float64.

    Returns ``(U[d1 x r], S[r], V[d2 x r])`` with ``r = min(d1, d2)`` and
    ``S`` sorted descending. Raises :class:`ConvergenceError` if the
    off-diagonal mass is still above ``tol`` after ``100 * r`` sweeps.
    """
    if w.ndim != 2:
        raise ShapeError("svd expects a matrix")
    check_finite(w, "svd input")
    d1, d2 = w.shape
    transpose = d1 < d2
    a = np.array(w.T if transpose else w, dtype=np.float64, order="C")
    m, n = a.shape
    if n == 0:
        return np.zeros((d1, 0)), np.zeros(0), np.zeros((d2, 0))
    v = np.eye(n)
    cap = SVD_SWEEPS_PER_DIM * n if max_sweeps is None else max_sweeps
    if _jacobi_sweeps(a, v, tol, cap) < 0:
        raise ConvergenceError(f"svd did not converge in {cap} sweeps")
    s = np.sqrt(np.sum(a * a, axis=0))
    order = np.argsort(-s, kind="stable")
    s, a, v = s[order], a[:, order], v[:, order]
    scale = s[0] if s[0] > 0 else 1.0
    filled = s > scale * 1e-13
    u = np.zeros_like(a)
    u[:, filled] = a[:, filled] / s[filled]
    s = np.where(filled, s, 0.0)
    if not np.all(filled):
        u = _complete_orthonormal(u, filled)
    if transpose:
        return v, s, u
    return u, s, v


def truncate(u: np.ndarray, s: np.ndarray, v: np.ndarray, rank: int) -> np.ndarray:
    """Rank-``rank`` reconstruction ``U_K diag(S_K) V_K^T``."""
    return matmul(u[:, :rank] * s[:rank], np.ascontiguousarray(v[:, :rank].T))
