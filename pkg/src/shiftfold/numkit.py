"""Deterministic numeric substrate shared by every other module.

Tensors are plain ``numpy.ndarray`` values in float64, row-major.  Random
streams come from :class:`SeededRng`, which draws uniforms from PCG64 and
turns them into normals with a fixed Box-Muller transform so that a seed
pins the exact sequence on every platform.
"""
from __future__ import annotations

import hashlib
import math

import numpy as np

Tensor = np.ndarray


class NotPositiveDefiniteError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def as_tensor(x, name: str = "tensor") -> Tensor:
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains non-finite values")
    return arr


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner extents differ: {a.shape} x {b.shape}")
    return a @ b


def cholesky(a: Tensor) -> Tensor:
    """Lower-triangular ``L`` with ``L @ L.T == a``.

    Raises :class:`NotPositiveDefiniteError` for non-symmetric input or a
    non-positive pivot.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"cholesky expects a square matrix, got {a.shape}")
    scale = max(np.max(np.abs(a)), 1.0) if a.size else 1.0
    if not np.allclose(a, a.T, rtol=0.0, atol=1e-10 * scale):
        raise NotPositiveDefiniteError("matrix is not symmetric")
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError(str(exc)) from None


def logdet_from_cholesky(chol: Tensor) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(chol))))


def spd_logdet(a: Tensor) -> float:
    return logdet_from_cholesky(cholesky(a))


def spd_inverse(a: Tensor) -> Tensor:
    chol = cholesky(a)
    inv_chol = np.linalg.solve(chol, np.eye(a.shape[0]))
    out = inv_chol.T @ inv_chol
    return 0.5 * (out + out.T)


def derive_seed(seed: int, *tags) -> int:
    """Map a parent seed plus tags to an independent 64-bit child seed.

    The child is the first 8 bytes (little-endian) of
    ``sha256("<seed>/<tag1>/<tag2>...")``.
    """
    key = "/".join([str(int(seed))] + [str(t) for t in tags])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


class SeededRng:
    """Single-owner random stream.

    Uniforms come from ``numpy.random.PCG64(seed)``.  Normals use the
    Box-Muller pair ``sqrt(-2 ln u1) * (cos 2 pi u2, sin 2 pi u2)`` with
    ``u1 = 1 - U`` so the logarithm never sees zero; for an odd count the
    final sine half is discarded.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def child(self, *tags) -> "SeededRng":
        return SeededRng(derive_seed(self.seed, *tags))

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> Tensor:
        return low + (high - low) * self._gen.random(shape)

    def standard_normal(self, shape=()) -> Tensor:
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        count = int(np.prod(shape, dtype=np.int64))
        pairs = (count + 1) // 2
        u = self._gen.random((2, pairs))
        radius = np.sqrt(-2.0 * np.log1p(-u[0]))
        angle = 2.0 * math.pi * u[1]
        z = np.concatenate([radius * np.cos(angle), radius * np.sin(angle)])
        return z[:count].reshape(shape)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False, p=None) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace, p=p)


def sample_standard_normal(rng: SeededRng, shape) -> Tensor:
    return rng.standard_normal(shape)


def finite_diff_grad(f, x, h: float = 1e-5) -> Tensor:
    """Central-difference gradient of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NonFiniteError(f"f is not finite near component {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(a, b, floor: float = 0.0) -> float:
    """Norm-wise relative error ``|a-b| / max(|a|, |b|, floor)`` (0 when both vanish).

    ``floor`` keeps gradients that are identically zero (a bias feeding a
    batchnorm, say) from turning round-off into a relative error of 1.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)
