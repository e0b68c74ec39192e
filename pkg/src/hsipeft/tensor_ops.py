"""Dense array kernels shared by the rest of the package.

Arrays are plain numpy ndarrays, row-major, float32 for training state and
float64 inside test oracles. Every operation validates shapes and raises
ShapeError on mismatch instead of relying on numpy broadcasting surprises.

The vec/unvec convention is COLUMN-stacking, so the identity
(A kron B) vec(X) = vec(B X A^T) holds exactly. This is what lets
kron_matvec apply a Kronecker-factored matrix without materializing it.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def _require_2d(name: str, a: np.ndarray) -> None:
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product a @ b with explicit shape checking.

    Summation order is the BLAS order, which is deterministic for a fixed
    thread count.
    """
    _require_2d("a", a)
    _require_2d("b", b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul inner dims differ: {a.shape} vs {b.shape}"
        )
    return a @ b


def kron(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Kronecker product: block (i, j) of the result is a[i, j] * b."""
    _require_2d("a", a)
    _require_2d("b", b)
    r1, r2 = a.shape
    m, n = b.shape
    out = a[:, None, :, None] * b[None, :, None, :]
    return out.reshape(r1 * m, r2 * n)


def vec(m: np.ndarray) -> np.ndarray:
    """Column-stacking vectorization: vec(M)[j*p + i] = M[i, j] for M p-by-q."""
    _require_2d("m", m)
    return m.T.reshape(-1)


def unvec(x: np.ndarray, p: int, q: int) -> np.ndarray:
    """Inverse of vec: reshape a length p*q vector into a p-by-q matrix."""
    if x.ndim != 1:
        raise ShapeError(f"unvec expects a vector, got shape {x.shape}")
    if x.size != p * q:
        raise ShapeError(f"unvec size mismatch: {x.size} != {p}*{q}")
    return np.ascontiguousarray(x.reshape(q, p).T)


def kron_matvec(a: np.ndarray, b: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Apply (a kron b) to x without materializing the Kronecker product.

    Computed as vec(b @ unvec(x) @ a.T). x may carry leading batch
    dimensions; the product is applied to the last axis row-wise.
    """
    _require_2d("a", a)
    _require_2d("b", b)
    r1, r2 = a.shape
    m, n = b.shape
    if x.shape[-1] != r2 * n:
        raise ShapeError(
            f"kron_matvec length mismatch: x has {x.shape[-1]}, need {r2 * n}"
        )
    lead = x.shape[:-1]
    # unvec per row: X is n-by-r2 with X[i, j] = x[j*n + i]
    xm = x.reshape(lead + (r2, n))
    xm = np.swapaxes(xm, -1, -2)
    y = np.matmul(np.matmul(b, xm), a.T)  # (..., m, r1)
    y = np.swapaxes(y, -1, -2)
    return np.ascontiguousarray(y).reshape(lead + (r1 * m,))
