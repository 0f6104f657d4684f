"""Matrix-free reference methods: GGN-vector products, power iteration, FD Hessian."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from lowrank_ggn.errors import DimensionCapError, DimensionMismatchError
from lowrank_ggn.lowrank import CurvatureConfig, LowRankGGN
from lowrank_ggn.net import (
    Batch,
    FeedForwardNet,
    backprop_to_layer,
    forward,
    jtv_layer,
    jvp,
    make_rng,
    mean_gradient,
    softmax,
)

FD_DIMENSION_CAP = 2000


def ggn_matvec(net: FeedForwardNet, batch: Batch, loss: str, v, trace=None) -> np.ndarray:
    """``G v = mean_n J_n^T H_n J_n v`` without forming ``G``.

    Forward-mode propagation gives ``J_n v``, the analytic loss Hessian is
    applied per sample, and one reverse pass maps back to parameters.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (net.num_params,):
        raise DimensionMismatchError(f"vector must have shape ({net.num_params},)")
    if trace is None:
        trace = forward(net, batch, loss)
    jv = jvp(net, trace, v)
    if loss == "square":
        hjv = 2.0 * jv
    else:
        p = softmax(trace.outputs)
        hjv = p * jv - p * np.sum(p * jv, axis=1, keepdims=True)
    parts = [
        jtv_layer(net, trace, i, backprop_to_layer(net, trace, i, hjv)).sum(axis=0)
        for i in range(net.num_layers)
    ]
    return np.concatenate(parts) / trace.num_samples


def make_ggn_operator(net: FeedForwardNet, batch: Batch, loss: str) -> Callable[[np.ndarray], np.ndarray]:
    """Closure over a cached forward pass, for repeated products."""
    trace = forward(net, batch, loss)
    return lambda v: ggn_matvec(net, batch, loss, v, trace)


@dataclass(frozen=True)
class PowerIterConfig:
    k: int = 1
    max_matvecs_per_eigenvalue: int = 100
    rel_tol: float = 1e-3
    seed: int = 0


@dataclass(frozen=True)
class PowerIterResult:
    eigenvalue: float
    eigenvector: np.ndarray
    matvecs: int
    converged: bool


def _orthogonalize(v: np.ndarray, basis: list[np.ndarray]) -> np.ndarray:
    for b in basis:
        v = v - (b @ v) * b
    return v


def power_iteration_topk(matvec: Callable[[np.ndarray], np.ndarray], dim: int,
                         config: PowerIterConfig = PowerIterConfig()) -> list[PowerIterResult]:
    """Leading eigenpairs of a symmetric PSD operator, one at a time.

    Each eigenvalue gets a fresh seeded Gaussian start vector and at most
    ``max_matvecs_per_eigenvalue`` products. Iterates are kept orthogonal to
    the eigenvectors already found, and iteration stops once the Rayleigh
    quotient changes by less than ``rel_tol`` relative to its magnitude.
    Running out of budget is reported through ``converged`` rather than
    raised.
    """
    rng = make_rng(config.seed)
    found: list[np.ndarray] = []
    results = []
    for _ in range(config.k):
        v = _orthogonalize(rng.standard_normal(dim), found)
        v /= np.linalg.norm(v)
        eigenvalue = None
        converged = False
        used = 0
        for used in range(1, config.max_matvecs_per_eigenvalue + 1):
            w = _orthogonalize(matvec(v), found)
            estimate = float(v @ w)
            norm = np.linalg.norm(w)
            if norm == 0.0:
                eigenvalue, converged = 0.0, True
                break
            v = _orthogonalize(w / norm, found)
            v /= np.linalg.norm(v)
            if eigenvalue is not None and abs(estimate - eigenvalue) < config.rel_tol * (abs(eigenvalue) + 1e-6):
                eigenvalue, converged = estimate, True
                break
            eigenvalue = estimate
        found.append(v)
        results.append(PowerIterResult(float(eigenvalue), v, used, converged))
    return results


def finite_difference_hessian(net: FeedForwardNet, batch: Batch, loss: str, step: float = 1e-5,
                              cap: int = FD_DIMENSION_CAP, symmetrize: bool = True) -> np.ndarray:
    """Loss Hessian by central differences of the analytic mean gradient.

    The step for coordinate ``j`` is ``step * max(1, |theta_j|)``.
    """
    theta = net.get_params()
    d = theta.size
    if d > cap:
        raise DimensionCapError(f"{d} parameters exceed the finite-difference cap of {cap}")
    h = np.zeros((d, d))
    for j in range(d):
        hj = step * max(1.0, abs(theta[j]))
        e = np.zeros(d)
        e[j] = hj
        gp = mean_gradient(net.with_params(theta + e), batch, loss)
        gm = mean_gradient(net.with_params(theta - e), batch, loss)
        h[:, j] = (gp - gm) / (2.0 * hj)
    return 0.5 * (h + h.T) if symmetrize else h


def gram_topk(net: FeedForwardNet, batch: Batch, loss: str, k: int,
              config: CurvatureConfig = CurvatureConfig()) -> tuple[np.ndarray, np.ndarray]:
    """Leading ``k`` eigenpairs through the Gram matrix, the timed path of the benchmark."""
    model = LowRankGGN(net, batch, loss, config)
    k = min(k, model.num_retained)
    return model.eigenvalues[:k], model.eigenvectors(k)


def power_topk(net: FeedForwardNet, batch: Batch, loss: str, k: int,
               config: PowerIterConfig = PowerIterConfig()) -> list[PowerIterResult]:
    op = make_ggn_operator(net, batch, loss)
    return power_iteration_topk(op, net.num_params, PowerIterConfig(
        k, config.max_matvecs_per_eigenvalue, config.rel_tol, config.seed))


def time_min(fn: Callable[[], object], repeats: int = 20) -> float:
    """Shortest wall time of ``repeats`` calls."""
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return float(best)


def benchmark_topk(net: FeedForwardNet, batch: Batch, loss: str, ks, repeats: int = 20,
                   curvature: CurvatureConfig = CurvatureConfig(),
                   power: PowerIterConfig = PowerIterConfig()) -> list[tuple[str, int, float]]:
    """Rows ``(method, k, seconds)`` for the Gram method and power iteration."""
    rows = []
    for method in ("gram", "power"):
        for k in ks:
            if method == "gram":
                fn = lambda k=k: gram_topk(net, batch, loss, k, curvature)
            else:
                fn = lambda k=k: power_topk(net, batch, loss, k, power)
            rows.append((method, int(k), time_min(fn, repeats)))
    return rows
