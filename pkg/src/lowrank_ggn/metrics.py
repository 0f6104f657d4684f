"""Eigenspace overlap and signal-to-noise ratios of directional derivatives."""

from __future__ import annotations

import numpy as np

from lowrank_ggn.errors import ColumnCountMismatchError, NotOrthonormalError, TooFewSamplesError

ORTHONORMAL_TOL = 1e-8


def _check_orthonormal(e: np.ndarray, name: str) -> None:
    err = np.max(np.abs(e.T @ e - np.eye(e.shape[1]))) if e.shape[1] else 0.0
    if err > ORTHONORMAL_TOL:
        raise NotOrthonormalError(f"{name} columns are not orthonormal (error {err:.2e})")


def overlap_topc(eigvecs_u, eigvecs_v) -> float:
    """Overlap ``Tr(P_U P_V) / C`` of two ``C``-dimensional subspaces.

    Both arguments hold orthonormal bases as columns. The trace is evaluated
    as ``||E_U^T E_V||_F^2`` so no ``D x D`` projector is formed. The result
    is 1 for identical and 0 for orthogonal subspaces.
    """
    u = np.asarray(eigvecs_u, dtype=np.float64)
    v = np.asarray(eigvecs_v, dtype=np.float64)
    if u.ndim != 2 or v.ndim != 2 or u.shape[1] != v.shape[1] or u.shape[0] != v.shape[0]:
        raise ColumnCountMismatchError(
            f"bases of shape {u.shape} and {v.shape} are not comparable"
        )
    if u.shape[1] == 0:
        raise ColumnCountMismatchError("bases must have at least one column")
    _check_orthonormal(u, "first")
    _check_orthonormal(v, "second")
    w = u.T @ v
    return float(np.sum(w * w) / u.shape[1])


def overlap_leading(eigvecs_u, eigvecs_v, c: int) -> tuple[float, int]:
    """Overlap of the leading ``c`` columns, truncating to what both provide.

    Returns the overlap and the number of columns actually compared.
    """
    eff = min(c, np.shape(eigvecs_u)[1], np.shape(eigvecs_v)[1])
    if eff == 0:
        return float("nan"), 0
    return overlap_topc(np.asarray(eigvecs_u)[:, :eff], np.asarray(eigvecs_v)[:, :eff]), eff


def snr(samples) -> float:
    """Squared sample mean over the unbiased sample variance.

    Returns ``inf`` when the variance is negligible compared with the squared
    mean (below ``1e-30`` of it) and ``nan`` for all-zero samples.
    """
    x = np.asarray(samples, dtype=np.float64).reshape(-1)
    if x.size < 2:
        raise TooFewSamplesError("SNR needs at least two samples")
    mean = x.mean()
    var = np.sum((x - mean) ** 2) / (x.size - 1)
    if var < 1e-30 * mean**2:
        return float("inf")
    if var == 0.0:
        return float("nan")
    return float(mean**2 / var)
