"""Damped Newton steps ``-(G + delta I)^{-1} g`` computed in Gram space."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import scipy.linalg

from lowrank_ggn.errors import ConfigError, NoRetainedDirectionsError, SingularGramSystemError
from lowrank_ggn.lowrank import (
    CurvatureConfig,
    GramSpectrum,
    LowRankFactor,
    LowRankGGN,
    build_factor,
    gram_matrix,
    spectrum,
    weighted_eigvec_sum,
)
from lowrank_ggn.net import Batch, FeedForwardNet, mean_gradient


@dataclass(frozen=True)
class NewtonConfig:
    damping: float = 1.0
    mode: str = "eigen"
    block_mode: str = "full"

    def __post_init__(self):
        if not self.damping > 0:
            raise ConfigError("damping must be positive")
        if self.mode not in ("eigen", "inversion_lemma"):
            raise ConfigError(f"unknown Newton mode {self.mode!r}")
        if self.block_mode not in ("full", "layerwise"):
            raise ConfigError(f"unknown block mode {self.block_mode!r}")


def _check_damping(delta: float) -> None:
    if not delta > 0:
        raise ConfigError("damping must be positive")


def newton_step_eigen(factor: LowRankFactor, spec: GramSpectrum, per_sample_grads,
                      delta: float) -> np.ndarray:
    """Newton update along the retained eigendirections only.

    Returns ``sum_k -gamma_k / (lambda_k + delta) * e_k`` where ``gamma_k`` is
    the slope of the mean gradient along ``e_k``. The sum is assembled in
    Gram space and mapped to parameter space with one product by ``V``.
    ``per_sample_grads`` may also be a single mean gradient vector.
    """
    _check_damping(delta)
    if spec.num_retained == 0:
        raise NoRetainedDirectionsError("no eigenvalue exceeds the clip threshold")
    grads = np.asarray(per_sample_grads, dtype=np.float64)
    g = grads if grads.ndim == 1 else grads.mean(axis=0)
    lam = spec.retained_eigenvalues
    gammas = spec.retained_eigenvectors.T @ factor.apply_transpose(g) / np.sqrt(lam)
    weights = -gammas * np.sqrt(lam) / (lam + delta)
    return weighted_eigvec_sum(factor, spec, weights)


def solve_damped_gram(gram: np.ndarray, delta: float, rhs: np.ndarray) -> np.ndarray:
    """Solve ``(delta I + gram) x = rhs`` by Cholesky, falling back to eigh."""
    a = gram + delta * np.eye(gram.shape[0])
    try:
        return scipy.linalg.cho_solve(scipy.linalg.cho_factor(a, lower=True), rhs)
    except np.linalg.LinAlgError:
        evals, evecs = np.linalg.eigh(a)
        if np.min(evals) <= 0 or not np.all(np.isfinite(evals)):
            raise SingularGramSystemError("damped Gram matrix is not positive definite")
        return evecs @ ((evecs.T @ rhs) / evals)


def _lemma_step(factor: LowRankFactor, gram: np.ndarray, grad: np.ndarray, delta: float) -> np.ndarray:
    # (delta I + V V^T)^{-1} g = (g - V (delta I + V^T V)^{-1} V^T g) / delta
    inner = solve_damped_gram(gram, delta, factor.apply_transpose(grad))
    return -(grad - factor.apply(inner)) / delta


def newton_step_inversion_lemma(factor: LowRankFactor, grad, delta: float,
                                gram: np.ndarray | None = None) -> np.ndarray:
    """Full damped Newton step ``-(delta I + V V^T)^{-1} g``.

    Only a system of the Gram matrix's size is solved.
    """
    _check_damping(delta)
    g = np.asarray(grad, dtype=np.float64)
    if gram is None:
        gram = gram_matrix(factor)
    return _lemma_step(factor, gram, g, delta)


def newton_step_blockwise(net: FeedForwardNet, batch: Batch, loss: str,
                          config: CurvatureConfig, delta: float) -> np.ndarray:
    """Newton step for the block-diagonal GGN, one layer at a time.

    For every layer the expanded factor block is formed, its damped Gram
    system is solved, the inverse is applied to that layer's gradient, and
    the block is dropped before the next layer is processed.
    """
    _check_damping(delta)
    factor = build_factor(net, batch, loss, config)
    grad = mean_gradient(net, batch, loss)
    steps = []
    for i, sl in enumerate(factor.layer_slices()):
        g_i = grad[sl]
        with factor.layer_block(i) as block:
            gram_i = block.T @ block
            inner = solve_damped_gram(gram_i, delta, block.T @ g_i)
            steps.append(-(g_i - block @ inner) / delta)
            del gram_i, inner
    return np.concatenate(steps)


def newton_step(net: FeedForwardNet, batch: Batch, loss: str,
                curvature: CurvatureConfig, newton: NewtonConfig) -> np.ndarray:
    """Dispatch on Newton mode and block mode."""
    delta = newton.damping
    if newton.mode == "inversion_lemma":
        if newton.block_mode == "layerwise":
            return newton_step_blockwise(net, batch, loss, curvature, delta)
        factor = build_factor(net, batch, loss, curvature)
        return newton_step_inversion_lemma(factor, mean_gradient(net, batch, loss), delta)
    grad = mean_gradient(net, batch, loss)
    if newton.block_mode == "full":
        factor = build_factor(net, batch, loss, curvature)
        spec = spectrum(gram_matrix(factor), curvature.clip_threshold)
        return newton_step_eigen(factor, spec, grad, delta)
    model = LowRankGGN(net, batch, loss, replace(curvature, block_mode="layerwise"))
    step = np.zeros(net.num_params)
    if model.num_retained == 0:
        raise NoRetainedDirectionsError("no eigenvalue exceeds the clip threshold")
    for block in model.blocks:
        if block.spectrum.num_retained:
            step[block.param_slice] = newton_step_eigen(
                block.factor, block.spectrum, grad[block.param_slice], delta)
    return step

