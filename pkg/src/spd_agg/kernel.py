"""Aggregation of convolutional feature maps into a channel-by-channel matrix.

The main aggregator treats each channel's feature map as one point in
R^N (N spatial positions) and builds the Gaussian-kernel Gram matrix
between the maps.  The Gram matrix of a strictly positive definite
kernel over distinct points is positive definite no matter how many maps
there are relative to N, which is exactly where the classic covariance
descriptor (also provided here, as a baseline) degenerates to a singular
PSD matrix: rank(Cov) <= min(C, N-1).

Gradients are hand-derived and checked against central finite
differences in the test suite.  The bandwidth is recomputed from each
input and treated as a constant during backpropagation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonFiniteError, ShapeMismatchError
from .linalg import matmul, sym_eigvals

__all__ = [
    "SpdMatrix",
    "KernelTape",
    "compute_sigma",
    "kernel_forward",
    "kernel_backward",
    "covariance_forward",
    "covariance_backward",
    "certify",
]

#: Lower bound on the bandwidth; hit only when all maps coincide.
SIGMA_FLOOR = 1e-12


@dataclass(frozen=True)
class SpdMatrix:
    """Square matrix made bit-for-bit symmetric on construction.

    Positive definiteness is *not* verified here; :func:`certify` returns
    the smallest eigenvalue when a caller needs the certificate.
    """

    m: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.m, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ShapeMismatchError(f"SpdMatrix needs a square matrix, got shape {m.shape}")
        object.__setattr__(self, "m", (m + m.T) / 2.0)

    @property
    def dim(self) -> int:
        return self.m.shape[0]


@dataclass(frozen=True)
class KernelTape:
    """Forward cache for one kernel aggregation: maps, output, bandwidth."""

    m: np.ndarray
    k: SpdMatrix
    sigma: float

    def __post_init__(self):
        if self.sigma <= 0.0:
            raise ValueError(f"bandwidth must be positive, got {self.sigma}")
        if self.k.dim != self.m.shape[0]:
            raise ShapeMismatchError(
                f"kernel dim {self.k.dim} does not match {self.m.shape[0]} feature maps"
            )


def as_feature_matrix(x) -> np.ndarray:
    """View a (C, H, W) feature stack — or an already flat (C, N) matrix —
    as the C x N matrix whose rows are the reshaped feature maps."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x.reshape(x.shape[0], x.shape[1] * x.shape[2])
    if x.ndim == 2:
        return x
    raise ShapeMismatchError(f"expected a (C, H, W) or (C, N) array, got shape {x.shape}")


def compute_sigma(m: np.ndarray) -> float:
    """Mean Euclidean distance over all unordered pairs of feature maps.

    Accumulation runs in row-major pair order with a plain sequential
    sum, so the value is reproducible bit-for-bit.  Returns the floor
    ``SIGMA_FLOOR`` for degenerate inputs where all maps coincide.
    """
    m = as_feature_matrix(m)
    c = m.shape[0]
    if c < 2:
        raise ValueError(f"bandwidth needs at least two feature maps, got {c}")
    dists: list[float] = []
    for i in range(c - 1):
        diffs = m[i + 1 :] - m[i]
        dists.extend(np.sqrt((diffs * diffs).sum(axis=1)).tolist())
    mean = sum(dists) / len(dists)
    return max(mean, SIGMA_FLOOR)


def kernel_forward(x, sigma: float | None = None) -> tuple[SpdMatrix, KernelTape]:
    """Gaussian-kernel Gram matrix between the feature maps of ``x``.

    K_ij = exp(-||f_i - f_j||^2 / (2 sigma^2)) computed densely through
    the Gram identity ||f_i - f_j||^2 = g_ii + g_jj - 2 g_ij with
    g = M M^T, so the whole matrix costs one matrix product plus
    elementwise exponentials.  Diagonal entries are exactly 1 (the
    exponent cancels identically), the result is explicitly symmetrized,
    and all entries lie in (0, 1].

    Parameters
    ----------
    x : (C, H, W) or (C, N) array with C >= 2, N >= 2, finite entries.
    sigma : optional bandwidth override.  Finite-difference harnesses
        pass the tape value of a reference forward so the bandwidth stays
        frozen while inputs are perturbed; by default it is recomputed.
    """
    m = as_feature_matrix(x)
    c, n = m.shape
    if c < 2 or n < 2:
        raise ValueError(f"kernel aggregation needs C >= 2 and N >= 2, got C={c}, N={n}")
    if not np.isfinite(m).all():
        raise NonFiniteError("kernel aggregation input contains non-finite values")
    if sigma is None:
        sigma = compute_sigma(m)
    elif sigma <= 0.0:
        raise ValueError(f"bandwidth must be positive, got {sigma}")
    gram = matmul(m, m.T)
    sq_norms = np.diag(gram).copy()
    # Rounding can push squared distances a hair below zero; clamp so the
    # kernel never exceeds 1.
    sq_dists = np.maximum(sq_norms[:, None] + sq_norms[None, :] - 2.0 * gram, 0.0)
    k = SpdMatrix(np.exp(-sq_dists / (2.0 * sigma * sigma)))
    return k, KernelTape(m=m.copy(), k=k, sigma=float(sigma))


def kernel_backward(tape: KernelTape, grad_k: np.ndarray) -> np.ndarray:
    """Backpropagate a kernel-matrix gradient onto the feature maps.

    With G the upstream gradient and the bandwidth held constant,

        dL/df_i = sum_j (G_ij + G_ji) * K_ij * (f_j - f_i) / sigma^2.

    The pairwise differences are formed explicitly before contraction, so
    coincident maps yield exact zeros.  Returns dL/dM with shape (C, N).
    """
    grad_k = np.asarray(grad_k, dtype=np.float64)
    c = tape.k.dim
    if grad_k.shape != (c, c):
        raise ShapeMismatchError(
            f"upstream gradient shape {grad_k.shape} does not match kernel shape {(c, c)}"
        )
    coeff = (grad_k + grad_k.T) * tape.k.m / (tape.sigma * tape.sigma)
    # diffs[i, j] = f_j - f_i
    diffs = tape.m[None, :, :] - tape.m[:, None, :]
    return np.einsum("ij,ijn->in", coeff, diffs)


def covariance_forward(x) -> np.ndarray:
    """Sample covariance of the per-position channel vectors.

    The columns of the reshaped map matrix are the N local features;
    normalization is by N - 1.  Returns a plain symmetric PSD matrix —
    deliberately not an :class:`SpdMatrix`, since it is singular whenever
    C > N - 1.
    """
    m = as_feature_matrix(x)
    n = m.shape[1]
    if n < 2:
        raise ValueError(f"covariance needs at least two local features, got N={n}")
    if not np.isfinite(m).all():
        raise NonFiniteError("covariance input contains non-finite values")
    centered = m - m.mean(axis=1, keepdims=True)
    cov = matmul(centered, centered.T) / (n - 1)
    return (cov + cov.T) / 2.0


def covariance_backward(m: np.ndarray, grad_cov: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`covariance_forward` back to the feature maps."""
    m = as_feature_matrix(m)
    c, n = m.shape
    grad_cov = np.asarray(grad_cov, dtype=np.float64)
    if grad_cov.shape != (c, c):
        raise ShapeMismatchError(
            f"upstream gradient shape {grad_cov.shape} does not match covariance shape {(c, c)}"
        )
    centered = m - m.mean(axis=1, keepdims=True)
    d = matmul(grad_cov + grad_cov.T, centered) / (n - 1)
    return d - d.mean(axis=1, keepdims=True)


def certify(k) -> float:
    """Smallest eigenvalue of an aggregated matrix (definiteness audit)."""
    m = k.m if isinstance(k, SpdMatrix) else np.asarray(k, dtype=np.float64)
    return float(sym_eigvals(m)[0])
