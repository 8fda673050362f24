"""Rank-1 low-rank factorization and conv-kernel slicing.

Tensors are plain ``float64`` numpy arrays. The best rank-1 approximation of
a matrix in Frobenius norm is its top singular pair (Eckart-Young), found here
by power iteration on ``A^T A`` with a dense eigen-solver fallback.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonConvergence, ShapeError

POWER_TOL = 1e-10
POWER_MAX_ITER = 1000
SLICE_LAYOUT = "per_input_channel"


def as_tensor(t) -> np.ndarray:
    a = np.asarray(t, dtype=np.float64)
    if a.size == 0:
        raise ShapeError("empty tensor")
    if not 1 <= a.ndim <= 4:
        raise ShapeError(f"tensor rank must be 1..4, got {a.ndim}")
    return a


def frobenius_norm(t) -> float:
    a = as_tensor(t)
    return float(np.sqrt(np.sum(a * a)))


def _as_matrix(a) -> np.ndarray:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


def _canonical_sign(u: np.ndarray, v: np.ndarray):
    """Flip (u, v) jointly so the first nonzero entry of u is positive."""
    nz = np.flatnonzero(u)
    if nz.size and u[nz[0]] < 0:
        return -u, -v
    return u, v


def top_singular_triplet(a, tol: float = POWER_TOL, max_iter: int = POWER_MAX_ITER,
                         rng: np.random.Generator | None = None):
    """Largest singular value and unit singular vectors of ``a``.

    Power iteration on ``a.T @ a`` from a seeded random start. Converged once
    successive right vectors differ by less than ``tol`` in 2-norm.
    Raises NonConvergence when ``max_iter`` is exhausted.

    Returns ``(sigma, u, v)`` with ``a @ v ~= sigma * u``.
    """
    a = _as_matrix(a)
    if max_iter < 1 or not tol > 0:
        raise ValueError("need max_iter >= 1 and tol > 0")
    n, m = a.shape
    scale = float(np.max(np.abs(a)))
    if scale == 0.0:
        u = np.zeros(n)
        v = np.zeros(m)
        u[0] = v[0] = 1.0
        return 0.0, u, v

    if m == 1 or n == 1:
        # one-dimensional factor: closed form
        if m == 1:
            sigma = frobenius_norm(a)
            u, v = a[:, 0] / sigma, np.ones(1)
        else:
            sigma = frobenius_norm(a)
            u, v = np.ones(1), a[0] / sigma
        u, v = _canonical_sign(u, v)
        return sigma, u, v

    if rng is None:
        rng = np.random.default_rng(0)
    b = a / scale  # keeps a^T a well inside float range
    v = rng.standard_normal(m)
    v /= np.linalg.norm(v)
    for _ in range(max_iter):
        w = b.T @ (b @ v)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            # start vector fell in the null space; restart
            v = rng.standard_normal(m)
            v /= np.linalg.norm(v)
            continue
        w /= nw
        if np.linalg.norm(w - v) < tol:
            v = w
            break
        v = w
    else:
        raise NonConvergence(f"power iteration did not reach tol={tol} in {max_iter} steps")

    av = a @ v
    sigma = float(np.linalg.norm(av))
    u = av / sigma
    u, v = _canonical_sign(u, v)
    return sigma, u, v


def _dense_top_pair(a: np.ndarray):
    """Top singular pair through a symmetric eigen-solve of the Gram matrix."""
    n, m = a.shape
    if m <= n:
        evals, evecs = np.linalg.eigh(a.T @ a)
        v = evecs[:, -1]
        av = a @ v
        sigma = float(np.linalg.norm(av))
        u = av / sigma if sigma > 0 else np.eye(n)[0]
    else:
        evals, evecs = np.linalg.eigh(a @ a.T)
        u = evecs[:, -1]
        atu = a.T @ u
        sigma = float(np.linalg.norm(atu))
        v = atu / sigma if sigma > 0 else np.eye(m)[0]
    u, v = _canonical_sign(u, v)
    return sigma, u, v


@dataclass(frozen=True)
class Rank1Pair:
    """``w`` (length n) times ``h`` (length m) reconstructs an n x m matrix.

    The singular value is split evenly: ``w = sqrt(s) u``, ``h = sqrt(s) v``.
    """

    w: np.ndarray
    h: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return np.outer(self.w, self.h)


def rank1_factorize(a, tol: float = POWER_TOL, max_iter: int = POWER_MAX_ITER,
                    rng: np.random.Generator | None = None,
                    fallback: bool = True) -> Rank1Pair:
    """Best rank-1 factorization ``w h`` of a matrix in Frobenius norm.

    When power iteration stalls (close top singular values) the dense
    eigen-solver path is used instead, unless ``fallback=False`` in which
    case NonConvergence propagates.
    """
    a = _as_matrix(a)
    try:
        sigma, u, v = top_singular_triplet(a, tol=tol, max_iter=max_iter, rng=rng)
    except NonConvergence:
        if not fallback:
            raise
        sigma, u, v = _dense_top_pair(a)
    if sigma == 0.0:
        return Rank1Pair(np.zeros(a.shape[0]), np.zeros(a.shape[1]))
    root = np.sqrt(sigma)
    return Rank1Pair(root * u, root * v)


@dataclass(frozen=True)
class KernelSlices:
    slices: tuple
    original_shape: tuple
    layout: str = SLICE_LAYOUT


def slice_conv_kernel(k) -> KernelSlices:
    """Split a (kh, kw, cin, cout) kernel into ``cin`` matrices of shape (kh*kw, cout).

    Rows run over filter-window positions (row-major over kh, kw), columns
    over output filters.
    """
    k = np.asarray(k, dtype=np.float64)
    if k.ndim != 4:
        raise ShapeError(f"conv kernel must be 4-D (kh, kw, cin, cout), got shape {k.shape}")
    kh, kw, cin, cout = k.shape
    slices = tuple(np.ascontiguousarray(k[:, :, c, :]).reshape(kh * kw, cout) for c in range(cin))
    return KernelSlices(slices=slices, original_shape=(kh, kw, cin, cout))


def unslice_conv_kernel(s: KernelSlices) -> np.ndarray:
    if s.layout != SLICE_LAYOUT:
        raise ShapeError(f"unknown slice layout {s.layout!r}")
    if len(s.original_shape) != 4:
        raise ShapeError("original_shape must have 4 entries")
    kh, kw, cin, cout = s.original_shape
    if len(s.slices) != cin:
        raise ShapeError(f"expected {cin} slices, got {len(s.slices)}")
    out = np.empty((kh, kw, cin, cout))
    for c, m in enumerate(s.slices):
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (kh * kw, cout):
            raise ShapeError(f"slice {c} has shape {m.shape}, expected {(kh * kw, cout)}")
        out[:, :, c, :] = m.reshape(kh, kw, cout)
    return out


def lrf_simplify(theta, rng: np.random.Generator | None = None) -> np.ndarray:
    """Replace a weight matrix (or each slice of a conv kernel) by its best rank-1 approximation."""
    theta = np.asarray(theta, dtype=np.float64)
    if theta.ndim == 2:
        return rank1_factorize(theta, rng=rng).reconstruct()
    if theta.ndim == 4:
        sl = slice_conv_kernel(theta)
        approx = tuple(rank1_factorize(m, rng=rng).reconstruct() for m in sl.slices)
        return unslice_conv_kernel(KernelSlices(approx, sl.original_shape, sl.layout))
    raise ShapeError(f"lrf_simplify expects a 2-D or 4-D weight tensor, got rank {theta.ndim}")
