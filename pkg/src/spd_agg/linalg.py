"""Dense float64 linear-algebra primitives used by every layer.

All functions operate on plain numpy arrays.  Reductions that feed
training use a fixed summation order, so repeated runs (and different
BLAS thread counts) produce bit-identical results; nothing here chases
BLAS-level throughput.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .errors import ShapeMismatchError, SingularMatrixError

__all__ = ["QrFactors", "matmul", "qr_reduced", "sym_eigvals", "seeded_rng", "frobenius"]

#: |r_jj| below this multiple of ||a||_F marks a rank-deficient column.
QR_RANK_TOL = 1e-12

#: Allowed asymmetry ||a - a^T||_F for the symmetric eigensolver.
SYM_TOL = 1e-10


class QrFactors(NamedTuple):
    """Reduced QR factors; ``r`` has a strictly positive diagonal (unique form)."""

    q: np.ndarray
    r: np.ndarray


def _as_2d(a, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeMismatchError(f"{name} must be 2-D, got shape {a.shape}")
    return a


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with a fixed, sequential summation order.

    Accumulates one rank-1 update per inner index, which is bit-identical
    to the naive ``s += a[i, k] * b[k, j]`` triple loop while keeping the
    inner work vectorized.
    """
    a = _as_2d(a, "left operand")
    b = _as_2d(b, "right operand")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(
            f"inner dimensions differ: {a.shape[0]}x{a.shape[1]} times {b.shape[0]}x{b.shape[1]}"
        )
    out = np.zeros((a.shape[0], b.shape[1]))
    for k in range(a.shape[1]):
        out += a[:, k : k + 1] * b[k : k + 1, :]
    return out


def qr_reduced(a: np.ndarray) -> QrFactors:
    """Reduced QR via Householder reflections, sign-fixed so diag(r) > 0.

    The positive-diagonal convention makes the factorization unique and
    the derived retraction a deterministic function.

    Raises
    ------
    SingularMatrixError
        If any |r_jj| <= QR_RANK_TOL * ||a||_F (numerical rank deficiency).
    """
    a = _as_2d(a, "qr input")
    n, p = a.shape
    if n < p:
        raise ShapeMismatchError(f"qr_reduced needs rows >= cols, got {n}x{p}")
    q, r = np.linalg.qr(a, mode="reduced")
    diag = np.diag(r)
    tol = QR_RANK_TOL * frobenius(a)
    deficient = np.abs(diag) <= tol
    if deficient.any():
        j = int(np.argmax(deficient))
        raise SingularMatrixError(
            f"column {j} is numerically rank deficient: |r_jj|={abs(diag[j]):.3e} <= {tol:.3e}"
        )
    signs = np.where(diag < 0.0, -1.0, 1.0)
    return QrFactors(q=q * signs[np.newaxis, :], r=r * signs[:, np.newaxis])


def sym_eigvals(a: np.ndarray) -> np.ndarray:
    """Eigenvalues of a symmetric matrix, ascending.

    Certification-only helper (nothing on the training path depends on
    it).  Rejects inputs whose asymmetry exceeds ``SYM_TOL``.
    """
    a = _as_2d(a, "eigvals input")
    if a.shape[0] != a.shape[1]:
        raise ShapeMismatchError(f"eigvals input must be square, got {a.shape}")
    asym = frobenius(a - a.T)
    if asym > SYM_TOL:
        raise ValueError(f"matrix is not symmetric: ||a - a^T||_F = {asym:.3e} > {SYM_TOL:g}")
    return np.linalg.eigvalsh(a)


def seeded_rng(seed: int) -> np.random.Generator:
    """Deterministic PCG64 stream; one seed, one bit-exact sequence."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def frobenius(a: np.ndarray) -> float:
    """Frobenius norm as a Python float."""
    return float(np.linalg.norm(np.asarray(a, dtype=np.float64)))
