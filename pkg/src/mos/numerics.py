"""Dense linear algebra helpers, seeded randomness and Gaussian sampling.

Matrices and vectors are plain ``numpy`` float64 arrays.  Randomness comes
from ``numpy.random.Generator`` over the PCG64 bit generator, whose output
stream is fixed for a given seed on every platform numpy supports.  Normal
variates use numpy's ziggurat ``standard_normal``.
"""
from __future__ import annotations

import hashlib

import numpy as np

JITTER = 1e-9
PIVOT_FLOOR = 1e-12
NORM_EPS = 1e-12


class NotPositiveDefinite(ValueError):
    """Raised when a covariance cannot be factorized even after jitter."""


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """PCG64 generator for ``seed``; extra ints select an independent substream."""
    if stream:
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, stream)])))
    return np.random.Generator(np.random.PCG64(int(seed)))


def fork_rng(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """Spawn ``n`` independent child generators (one per worker)."""
    return [np.random.Generator(bg) for bg in rng.bit_generator.spawn(n)]


def _factor(a: np.ndarray) -> np.ndarray | None:
    n = a.shape[0]
    low = np.zeros_like(a)
    for j in range(n):
        pivot = a[j, j] - low[j, :j] @ low[j, :j]
        if not pivot > PIVOT_FLOOR:
            return None
        ljj = np.sqrt(pivot)
        low[j, j] = ljj
        if j + 1 < n:
            low[j + 1:, j] = (a[j + 1:, j] - low[j + 1:, :j] @ low[j, :j]) / ljj
    return low


def cholesky(sigma: np.ndarray) -> np.ndarray:
    """Lower-triangular ``L`` with ``L @ L.T == sigma``.

    The factorization is attempted on ``sigma`` as given; if a pivot falls at
    or below ``PIVOT_FLOOR`` it is retried once with ``JITTER`` added to the
    diagonal, which rescues the singular covariances of one-sample classes.
    """
    a = np.asarray(sigma, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"cholesky expects a square matrix, got shape {a.shape}")
    scale = max(np.abs(a).max(initial=0.0), 1.0)
    if np.abs(a - a.T).max(initial=0.0) > 1e-9 * scale:
        raise ValueError("cholesky expects a symmetric matrix")
    low = _factor(a)
    if low is None:
        low = _factor(a + JITTER * np.eye(a.shape[0]))
    if low is None:
        raise NotPositiveDefinite("matrix is not positive definite (after jitter)")
    return low


def sample_gaussian(mu, chol_lower, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` rows ``mu + L @ z`` with ``z ~ N(0, I)``.

    Returns an ``(n, d)`` array; ``n == 0`` gives an empty ``(0, d)`` array.
    """
    mu = np.asarray(mu, dtype=np.float64)
    low = np.asarray(chol_lower, dtype=np.float64)
    d = mu.shape[0]
    if low.shape != (d, d):
        raise ValueError(f"cholesky factor shape {low.shape} does not match mean dim {d}")
    if n < 0:
        raise ValueError("sample count must be non-negative")
    z = rng.standard_normal((n, d))
    return mu + z @ low.T


def gaussian_factor(sigma: np.ndarray) -> np.ndarray:
    """Cholesky factor of ``sigma`` with a diagonal-only fallback."""
    try:
        return cholesky(sigma)
    except NotPositiveDefinite:
        return np.diag(np.sqrt(np.clip(np.diag(sigma), 0.0, None)))


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between ``a`` and ``b``; 0 if either is ~zero."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na < NORM_EPS or nb < NORM_EPS:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def normalize_rows(m: np.ndarray) -> np.ndarray:
    """Unit-normalize each row; rows with norm < ``NORM_EPS`` become zero."""
    m = np.asarray(m, dtype=np.float64)
    norms = np.linalg.norm(m, axis=-1, keepdims=True)
    safe = np.where(norms < NORM_EPS, 1.0, norms)
    return np.where(norms < NORM_EPS, 0.0, m / safe)


def checksum(*arrays: np.ndarray) -> str:
    """SHA-256 over the float64 bytes (and shapes) of ``arrays``."""
    h = hashlib.sha256()
    for arr in arrays:
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        h.update(np.asarray(arr.shape, dtype=np.int64).tobytes())
        h.update(arr.tobytes())
    return h.hexdigest()
