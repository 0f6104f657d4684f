"""Dense double-precision kernels and a symmetric eigensolver.

The eigensolver is a cyclic Jacobi method using a round-robin (parallel)
ordering, so that each round applies ``n // 2`` disjoint plane rotations as
one vectorized update. It targets the Gram matrices of the low-rank
curvature model, whose size is the number of backpropagated vectors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from lowrank_ggn.errors import (
    DimensionMismatchError,
    NoConvergenceError,
    NonSquareError,
    NotSymmetricError,
)

SYMMETRY_RTOL = 1e-10
JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 100
# Above this size "auto" dispatches to LAPACK's divide-and-conquer solver.
AUTO_JACOBI_MAX_DIM = 160


@dataclass(frozen=True)
class EigenDecomposition:
    """Eigenvalues sorted in descending order with matching orthonormal columns."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    def __len__(self) -> int:
        return self.eigenvalues.shape[0]


def as_matrix(a) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionMismatchError(f"expected a 2d array, got shape {m.shape}")
    return m


def check_symmetric(a: np.ndarray, rtol: float = SYMMETRY_RTOL) -> None:
    if a.shape[0] != a.shape[1]:
        raise NonSquareError(f"matrix of shape {a.shape} is not square")
    scale = np.max(np.abs(a)) if a.size else 0.0
    if a.size and np.max(np.abs(a - a.T)) > rtol * scale:
        raise NotSymmetricError("matrix is not symmetric within tolerance")


def matmul(a, b) -> np.ndarray:
    """Matrix product with a shape check."""
    a, b = as_matrix(a), as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionMismatchError(
            f"cannot multiply {a.shape} by {b.shape}: inner dimensions differ"
        )
    return a @ b


def gram_of_columns(m) -> np.ndarray:
    """Return ``m.T @ m``, exactly symmetric."""
    m = as_matrix(m)
    g = m.T @ m
    return 0.5 * (g + g.T)


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Pairings covering every index pair once, grouped into disjoint rounds.

    Odd sizes get a phantom player whose pairings are dropped.
    """
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        ps, qs = [], []
        for i in range(m // 2):
            p, q = players[i], players[m - 1 - i]
            if p < n and q < n:
                ps.append(min(p, q))
                qs.append(max(p, q))
        rounds.append((np.array(ps, dtype=np.intp), np.array(qs, dtype=np.intp)))
        players = [players[0], players[-1], *players[1:-1]]
    return rounds


def _off_norm(a: np.ndarray) -> float:
    return float(np.linalg.norm(a - np.diag(np.diag(a))))


def _jacobi(a: np.ndarray, tol: float, max_sweeps: int) -> tuple[np.ndarray, np.ndarray]:
    n = a.shape[0]
    a = a.copy()
    v = np.eye(n)
    norm = np.linalg.norm(a)
    if n < 2 or norm == 0.0:
        return np.diag(a).copy(), v
    threshold = tol * norm
    rounds = _round_robin(n)
    for _ in range(max_sweeps):
        if _off_norm(a) <= threshold:
            return np.diag(a).copy(), v
        for p, q in rounds:
            apq = a[p, q]
            active = np.abs(apq) > 1e-300
            if not np.any(active):
                continue
            p, q, apq = p[active], q[active], apq[active]
            tau = (a[q, q] - a[p, p]) / (2.0 * apq)
            t = np.where(tau >= 0.0, 1.0, -1.0) / (np.abs(tau) + np.hypot(1.0, tau))
            c = 1.0 / np.hypot(1.0, t)
            s = t * c
            # columns: A <- A J
            ap, aq = a[:, p].copy(), a[:, q]
            a[:, p] = c * ap - s * aq
            a[:, q] = s * ap + c * aq
            # rows: A <- J^T A
            ap, aq = a[p, :].copy(), a[q, :]
            a[p, :] = c[:, None] * ap - s[:, None] * aq
            a[q, :] = s[:, None] * ap + c[:, None] * aq
            a[p, q] = 0.0
            a[q, p] = 0.0
            vp, vq = v[:, p].copy(), v[:, q]
            v[:, p] = c * vp - s * vq
            v[:, q] = s * vp + c * vq
    off = _off_norm(a)
    if off <= threshold:
        return np.diag(a).copy(), v
    raise NoConvergenceError(
        f"Jacobi did not converge in {max_sweeps} sweeps (off-norm {off:.3e})"
    )


def _canonical_signs(vecs: np.ndarray) -> np.ndarray:
    """Flip columns so the largest-magnitude entry is positive (first on ties)."""
    if vecs.size == 0:
        return vecs
    idx = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[idx, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    return vecs * signs


def sym_eig(a, method: str = "auto", *, tol: float = JACOBI_TOL,
            max_sweeps: int = JACOBI_MAX_SWEEPS) -> EigenDecomposition:
    """Full eigendecomposition of a symmetric matrix.

    Args:
        a: Square matrix, symmetric up to ``1e-10 * max|a|``.
        method: ``"jacobi"`` (cyclic Jacobi rotations), ``"lapack"``
            (``numpy.linalg.eigh``) or ``"auto"``, which uses Jacobi up to
            ``AUTO_JACOBI_MAX_DIM`` rows and LAPACK beyond.
        tol: Jacobi stops once the off-diagonal Frobenius norm drops below
            ``tol * ||a||_F``.
        max_sweeps: Jacobi sweep budget.

    Returns:
        Descending eigenvalues with orthonormal eigenvectors as columns. Each
        eigenvector is sign-normalized so that its largest-magnitude entry is
        positive.

    Raises:
        NonSquareError, NotSymmetricError, NoConvergenceError
    """
    a = as_matrix(a)
    check_symmetric(a)
    a = 0.5 * (a + a.T)
    if method == "auto":
        method = "jacobi" if a.shape[0] <= AUTO_JACOBI_MAX_DIM else "lapack"
    if method == "jacobi":
        evals, evecs = _jacobi(a, tol, max_sweeps)
    elif method == "lapack":
        evals, evecs = np.linalg.eigh(a)
    else:
        raise ValueError(f"unknown eigensolver method {method!r}")
    order = np.argsort(-evals, kind="stable")
    return EigenDecomposition(evals[order], _canonical_signs(evecs[:, order]))
