"""
-----------------------------------------------------------------------------------
Description: covariance, top-n eigenvectors (with the k x k small-system trick)
             and PCA projection
"""
import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import null_space

from errors import ArgumentError, NumericError, ShapeError

NEGATIVE_EIGENVALUE_TOLERANCE = 1e-8


@dataclass(frozen=True, eq=False)
class EigenBasis:
    """mean (x,), vectors (x, n) unit columns, values (n,) descending and nonnegative"""
    mean: np.ndarray
    vectors: np.ndarray
    values: np.ndarray

    @property
    def dim(self):
        return self.mean.shape[0]

    @property
    def size(self):
        return self.values.shape[0]


def _as_samples(samples):
    A = np.asarray(samples, dtype=np.float64)
    if A.ndim != 2:
        raise ShapeError(f'samples must be a k x x matrix, got shape {A.shape}')
    return A


def covariance(samples):
    """Population covariance, divisor k."""
    A = _as_samples(samples)
    k = A.shape[0]
    if k < 2:
        raise ArgumentError(f'covariance needs at least 2 samples, got {k}')
    centered = A - A.mean(axis=0)
    return centered.T @ centered / k


def _clamp(values):
    if values.size and values.min() < -NEGATIVE_EIGENVALUE_TOLERANCE:
        raise NumericError(f'covariance has a negative eigenvalue {values.min()}')
    return np.clip(values, 0.0, None)


def _fix_signs(vectors):
    # largest-magnitude component of every eigenvector made nonnegative
    rows = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[rows, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1
    return vectors * signs


def _symmetric_eigen(matrix):
    try:
        values, vectors = np.linalg.eigh(matrix)
    except np.linalg.LinAlgError as e:
        raise NumericError(f'eigendecomposition did not converge: {e}') from e
    order = np.argsort(values, kind='stable')[::-1]
    return values[order], vectors[:, order]


def eigen_top_n(samples, n) -> EigenBasis:
    """
    Top-n eigenpairs of the sample covariance. With fewer samples than dimensions
    (k < x) the k x k system C C^T / k is solved instead and each eigenvector u is
    mapped back to C^T u.
    """
    A = _as_samples(samples)
    k, x = A.shape
    if k < 2:
        raise ArgumentError(f'eigen decomposition needs at least 2 samples, got {k}')
    if not 1 <= n <= min(k, x):
        raise ArgumentError(f'n must lie in [1, {min(k, x)}], got {n}')
    mean = A.mean(axis=0)
    centered = A - mean

    if k < x:
        values, small_vectors = _symmetric_eigen(centered @ centered.T / k)
        values = _clamp(values[:n])
        vectors = centered.T @ small_vectors[:, :n]
        norms = np.linalg.norm(vectors, axis=0)
        # zero-variance directions map to the zero vector: complete them orthonormally
        good = norms > 1e-10 * max(1.0, norms.max(initial=0.0))
        vectors = vectors[:, good] / norms[good]
        missing = n - vectors.shape[1]
        if missing:
            logging.info(f'{missing} zero-variance eigenvector(s) completed from the orthogonal complement')
            completion = null_space(vectors.T)[:, :missing] if vectors.shape[1] else np.eye(x)[:, :missing]
            vectors = np.concatenate([vectors, completion], axis=1)
            values = np.concatenate([values[good], np.zeros(missing)])
    else:
        values, vectors = _symmetric_eigen(covariance(A))
        values = _clamp(values[:n])
        vectors = vectors[:, :n]

    return EigenBasis(mean=mean, vectors=_fix_signs(vectors), values=values)


def pca_project(points, basis: EigenBasis, n=None):
    """(point - M) . v_j for the first n eigenvectors."""
    P = np.asarray(points, dtype=np.float64)
    if P.ndim == 1:
        P = P[None, :]
    n = basis.size if n is None else n
    if P.shape[1] != basis.dim:
        raise ShapeError(f'points have dimension {P.shape[1]}, basis expects {basis.dim}')
    if not 1 <= n <= basis.size:
        raise ArgumentError(f'n must lie in [1, {basis.size}], got {n}')
    return (P - basis.mean) @ basis.vectors[:, :n]
