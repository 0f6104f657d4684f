"""Low-rank GGN factor, its Gram matrix, spectrum and directional derivatives.

The GGN of a mini-batch is ``G = V V^T`` where the columns of ``V`` are the
backpropagated square-root factors of the loss Hessians, scaled by
``1/sqrt(N * M)``. Everything interesting about ``G`` above its trivial null
space lives in the small Gram matrix ``V^T V``.

A :class:`LowRankFactor` never stores ``V`` itself. It keeps, per layer, the
layer inputs ``z_n`` and the vectors ``s_nk`` that arrive at the layer's
output during backpropagation. Products with ``V`` and ``V^T`` and the Gram
matrix are contracted from these directly; the expanded per-layer block is
only built on request through :meth:`LowRankFactor.layer_block`, which is
what the naive (reference) code paths use.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field, replace

import numpy as np

from lowrank_ggn import linalg
from lowrank_ggn.errors import (
    ClippedEigenvalueError,
    ConfigError,
    DimensionMismatchError,
    EmptySubsetError,
)
from lowrank_ggn.net import (
    Batch,
    FeedForwardNet,
    backprop_to_layer,
    forward,
    loss_hessian_factor_exact,
    loss_hessian_factor_mc,
    make_rng,
    per_sample_gradients,
)

DEFAULT_CLIP = 1e-4


@dataclass(frozen=True)
class CurvatureConfig:
    """Which approximation of the mini-batch GGN to build.

    ``sample_mode`` is ``"mb"`` (all samples) or ``"sub"`` (a seeded random
    subset of ``sub_size`` samples, ``floor(N/8)`` when left as ``None``).
    ``factor_mode`` is ``"exact"`` or ``"mc"`` with ``mc_samples`` draws per
    sample. ``block_mode`` selects the full GGN or its per-layer diagonal
    blocks.
    """

    sample_mode: str = "mb"
    factor_mode: str = "exact"
    mc_samples: int = 1
    sub_size: int | None = None
    block_mode: str = "full"
    clip_threshold: float = DEFAULT_CLIP
    seed: int = 0

    def __post_init__(self):
        if self.sample_mode not in ("mb", "sub"):
            raise ConfigError(f"sample_mode must be 'mb' or 'sub', got {self.sample_mode!r}")
        if self.factor_mode not in ("exact", "mc"):
            raise ConfigError(f"factor_mode must be 'exact' or 'mc', got {self.factor_mode!r}")
        if self.block_mode not in ("full", "layerwise"):
            raise ConfigError(f"block_mode must be 'full' or 'layerwise', got {self.block_mode!r}")
        if self.mc_samples < 1:
            raise ConfigError("mc_samples must be at least 1")
        if self.sub_size is not None and self.sub_size < 0:
            raise ConfigError("sub_size must be non-negative")
        if self.clip_threshold < 0:
            raise ConfigError("clip_threshold must be non-negative")

    def resolve_sub_size(self, n: int) -> int:
        if self.sample_mode == "mb":
            return n
        size = n // 8 if self.sub_size is None else self.sub_size
        if size > n:
            raise ConfigError(f"sub_size {size} exceeds batch size {n}")
        if size == 0:
            raise EmptySubsetError(f"curvature subset of a batch of {n} samples is empty")
        return size


class BlockTracker:
    """Counts expanded ``V^(i)`` blocks; installed with :func:`track_blocks`."""

    def __init__(self):
        self.live = 0
        self.peak = 0
        self.materialized = 0

    def acquire(self):
        self.live += 1
        self.materialized += 1
        self.peak = max(self.peak, self.live)

    def release(self):
        self.live -= 1


_trackers: list[BlockTracker] = []


@contextlib.contextmanager
def track_blocks():
    """Record how many expanded factor blocks exist at the same time.

    Example::

        with track_blocks() as t:
            gram_matrix(factor, method="naive")
        assert t.peak == 1
    """
    tracker = BlockTracker()
    _trackers.append(tracker)
    try:
        yield tracker
    finally:
        _trackers.remove(tracker)


@dataclass
class LowRankFactor:
    """Implicit ``D x (N_eff * K)`` factor with ``G = V V^T``.

    Column ``n * K + k`` belongs to curvature sample ``n`` and factor column
    ``k`` (a class for exact factors, an MC draw otherwise).

    Attributes:
        layer_inputs: Per layer, the inputs ``z_n`` of shape ``(N_eff, h_in)``.
        backprop_vectors: Per layer, ``s_nk`` at the layer output, shape
            ``(N_eff, K, h_out)``.
        has_bias: Per layer, whether the layer carries a bias.
        scale: Column scaling ``1/sqrt(N_eff * M)`` (``M = 1`` when exact).
        sample_indices: Positions of the curvature samples in the batch.
        mode: ``"exact"`` or ``"mc"``.
        mc_samples: Number of MC draws per sample.
        param_offset: Start of this factor's parameters in the full vector
            (non-zero only for single-layer sub-factors).
    """

    layer_inputs: list[np.ndarray]
    backprop_vectors: list[np.ndarray]
    has_bias: list[bool]
    scale: float
    sample_indices: np.ndarray
    mode: str = "exact"
    mc_samples: int = 1
    param_offset: int = 0
    layer_ids: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.layer_ids:
            self.layer_ids = list(range(len(self.layer_inputs)))

    @property
    def n_eff(self) -> int:
        return self.layer_inputs[0].shape[0]

    @property
    def cols_per_sample(self) -> int:
        return self.backprop_vectors[0].shape[1]

    @property
    def num_cols(self) -> int:
        return self.n_eff * self.cols_per_sample

    @property
    def num_layers(self) -> int:
        return len(self.layer_inputs)

    @property
    def layer_sizes(self) -> list[int]:
        return [
            z.shape[1] * s.shape[2] + (s.shape[2] if b else 0)
            for z, s, b in zip(self.layer_inputs, self.backprop_vectors, self.has_bias)
        ]

    @property
    def num_params(self) -> int:
        return sum(self.layer_sizes)

    @property
    def per_sample_rescale(self) -> float:
        """Factor turning stored columns into per-sample GGN square roots.

        With ``U_n = rescale * V[:, cols of n]`` one has
        ``G_n = U_n U_n^T`` (in expectation for MC), so that
        ``G = mean_n G_n``.
        """
        return float(np.sqrt(self.n_eff))

    def layer_slices(self) -> list[slice]:
        bounds = np.cumsum([0, *self.layer_sizes])
        return [slice(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]

    def layer_factor(self, i: int) -> LowRankFactor:
        """Sub-factor of a single layer; its ``V V^T`` is the diagonal block."""
        offset = self.param_offset + sum(self.layer_sizes[:i])
        return replace(
            self,
            layer_inputs=[self.layer_inputs[i]],
            backprop_vectors=[self.backprop_vectors[i]],
            has_bias=[self.has_bias[i]],
            param_offset=offset,
            layer_ids=[self.layer_ids[i]],
        )

    def _expand(self, i: int) -> np.ndarray:
        z, s = self.layer_inputs[i], self.backprop_vectors[i]
        n, k, h = s.shape
        cols = np.einsum("nj,nkr->nkjr", z, s).reshape(n * k, -1)
        if self.has_bias[i]:
            cols = np.concatenate([cols, s.reshape(n * k, h)], axis=1)
        return self.scale * cols.T

    @contextlib.contextmanager
    def layer_block(self, i: int):
        """Expanded ``V^(i)`` of shape ``(d_i, N_eff * K)`` for the ``with`` body."""
        block = self._expand(i)
        for t in _trackers:
            t.acquire()
        try:
            yield block
        finally:
            for t in _trackers:
                t.release()
            del block

    def dense(self) -> np.ndarray:
        """Stacked ``V``; materializes every block at once (oracle use only)."""
        blocks = []
        for i in range(self.num_layers):
            for t in _trackers:
                t.acquire()
            blocks.append(self._expand(i))
        out = np.concatenate(blocks, axis=0)
        for _ in blocks:
            for t in _trackers:
                t.release()
        return out

    def apply_layer(self, i: int, x: np.ndarray) -> np.ndarray:
        """``V^(i) x`` for ``x`` of shape ``(num_cols, r)``, without expanding."""
        z, s = self.layer_inputs[i], self.backprop_vectors[i]
        n, k, h = s.shape
        x = x.reshape(n, k, -1)
        y = np.einsum("nkr,nkh->nrh", x, s)
        w = np.einsum("nj,nrh->rjh", z, y).reshape(x.shape[2], -1)
        if self.has_bias[i]:
            w = np.concatenate([w, y.sum(axis=0)], axis=1)
        return self.scale * w.T

    def apply(self, x) -> np.ndarray:
        """``V x`` for a Gram-space vector or a ``(num_cols, r)`` matrix."""
        x = np.asarray(x, dtype=np.float64)
        flat = x.ndim == 1
        x2 = x.reshape(self.num_cols, -1)
        out = np.concatenate([self.apply_layer(i, x2) for i in range(self.num_layers)], axis=0)
        return out[:, 0] if flat else out

    def apply_transpose_layer(self, i: int, u: np.ndarray) -> np.ndarray:
        """``V^(i)^T u`` for ``u`` of shape ``(d_i, r)``, without expanding."""
        z, s = self.layer_inputs[i], self.backprop_vectors[i]
        h_in, h_out = z.shape[1], s.shape[2]
        nw = h_in * h_out
        uw = u[:nw].reshape(h_in, h_out, -1)  # column-stacked: [j, h] = W[h, j]
        p = np.einsum("jhr,nj->nrh", uw, z)
        if self.has_bias[i]:
            p = p + u[nw:].T[None, :, :]
        out = np.einsum("nkh,nrh->nkr", s, p)
        return self.scale * out.reshape(self.num_cols, -1)

    def apply_transpose(self, u) -> np.ndarray:
        """``V^T u`` for a parameter vector or a ``(D, r)`` matrix."""
        u = np.asarray(u, dtype=np.float64)
        flat = u.ndim == 1
        if u.shape[0] != self.num_params:
            raise DimensionMismatchError(
                f"expected {self.num_params} rows, got {u.shape[0]}"
            )
        u2 = u.reshape(self.num_params, -1)
        out = sum(
            self.apply_transpose_layer(i, u2[sl]) for i, sl in enumerate(self.layer_slices())
        )
        return out[:, 0] if flat else out


def _curvature_samples(n: int, config: CurvatureConfig) -> np.ndarray:
    size = config.resolve_sub_size(n)
    if config.sample_mode == "mb":
        return np.arange(n)
    shuffle_rng = make_rng(np.random.SeedSequence(config.seed).spawn(2)[0])
    return np.sort(shuffle_rng.permutation(n)[:size])


def build_factor(net: FeedForwardNet, batch: Batch, loss: str,
                 config: CurvatureConfig = CurvatureConfig()) -> LowRankFactor:
    """Backpropagate the loss-Hessian square roots of the curvature samples.

    Column ``(n, k)`` of the stacked factor is
    ``(J_theta f_n)^T s_nk / sqrt(N_eff * M)``. In ``sub`` mode the curvature
    samples are the sorted first ``sub_size`` entries of a seeded
    permutation, so ``sub_size = N`` reproduces ``mb`` mode exactly.
    """
    idx = _curvature_samples(batch.size, config)
    trace = forward(net, batch.subset(idx), loss)
    if config.factor_mode == "exact":
        hess = loss_hessian_factor_exact(trace, loss)
        m_div = 1
    else:
        mc_rng = make_rng(np.random.SeedSequence(config.seed).spawn(2)[1])
        hess = loss_hessian_factor_mc(trace, loss, config.mc_samples, mc_rng)
        m_div = config.mc_samples
    out_vectors = np.transpose(hess.columns, (0, 2, 1))  # (N_eff, K, C)
    backprop = [backprop_to_layer(net, trace, i, out_vectors) for i in range(net.num_layers)]
    return LowRankFactor(
        layer_inputs=list(trace.layer_inputs),
        backprop_vectors=backprop,
        has_bias=[layer.bias is not None for layer in net.layers],
        scale=1.0 / np.sqrt(len(idx) * m_div),
        sample_indices=idx,
        mode=config.factor_mode,
        mc_samples=m_div,
    )


def gram_block_linear_optimized(layer_inputs, backprop_vectors, scale: float = 1.0) -> np.ndarray:
    """Weight contribution of a linear layer to the Gram matrix.

    Entry ``(nk, n'k')`` is ``(z_n . z_n') * (s_nk . s_n'k') * scale**2``:
    two small Gram matrices multiplied elementwise, so the expanded
    ``d x NK`` factor block is never formed.

    Args:
        layer_inputs: ``(N, h_in)`` layer inputs.
        backprop_vectors: ``(N, K, h_out)`` vectors at the layer output.
        scale: Column scaling of the factor.
    """
    z = np.asarray(layer_inputs, dtype=np.float64)
    s = np.asarray(backprop_vectors, dtype=np.float64)
    n, k, h = s.shape
    zz = z @ z.T
    s2 = s.reshape(n * k, h)
    ss = s2 @ s2.T
    g = np.repeat(np.repeat(zz, k, axis=0), k, axis=1) * ss * scale**2
    return 0.5 * (g + g.T)


def layer_gram(factor: LowRankFactor, i: int, method: str = "optimized") -> np.ndarray:
    """Contribution ``V^(i)^T V^(i)`` of one layer."""
    if method == "naive":
        with factor.layer_block(i) as block:
            return linalg.gram_of_columns(block)
    if method != "optimized":
        raise ValueError(f"unknown Gram method {method!r}")
    g = gram_block_linear_optimized(
        factor.layer_inputs[i], factor.backprop_vectors[i], factor.scale
    )
    if factor.has_bias[i]:
        s = factor.backprop_vectors[i].reshape(factor.num_cols, -1)
        g = g + linalg.gram_of_columns(s.T) * factor.scale**2
    return g


def gram_matrix(factor: LowRankFactor, method: str = "optimized") -> np.ndarray:
    """Gram matrix ``V^T V``, accumulated layer by layer.

    ``method="naive"`` expands one ``V^(i)`` at a time and releases it before
    moving on; ``"optimized"`` contracts layer inputs and backpropagated
    vectors without expanding anything.
    """
    g = np.zeros((factor.num_cols, factor.num_cols))
    for i in range(factor.num_layers):
        g += layer_gram(factor, i, method)
    return g


@dataclass(frozen=True)
class GramSpectrum:
    """Eigendecomposition of a Gram matrix with the clipped retained part.

    ``eigenvalues`` and ``eigenvectors`` cover the full Gram spectrum in
    descending order; the first ``num_retained`` entries exceed
    ``clip_threshold``.
    """

    gram: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    clip_threshold: float
    num_retained: int

    @property
    def retained_eigenvalues(self) -> np.ndarray:
        return self.eigenvalues[: self.num_retained]

    @property
    def retained_eigenvectors(self) -> np.ndarray:
        return self.eigenvectors[:, : self.num_retained]

    def check_indices(self, indices) -> np.ndarray:
        idx = np.atleast_1d(np.asarray(indices, dtype=np.intp))
        if np.any(idx < 0) or np.any(idx >= self.num_retained):
            raise ClippedEigenvalueError(
                f"requested direction(s) {idx.tolist()} but only {self.num_retained} "
                f"eigenvalues exceed the clip threshold {self.clip_threshold:g}"
            )
        return idx


def spectrum(gram, clip_threshold: float = DEFAULT_CLIP, method: str = "auto") -> GramSpectrum:
    """Eigendecompose a Gram matrix and keep eigenvalues above the threshold."""
    gram = linalg.as_matrix(gram)
    eig = linalg.sym_eig(gram, method=method)
    retained = int(np.sum(eig.eigenvalues > clip_threshold))
    return GramSpectrum(gram, eig.eigenvalues, eig.eigenvectors, clip_threshold, retained)


def eigenvectors_to_parameter_space(factor: LowRankFactor, spec: GramSpectrum,
                                    indices=None) -> np.ndarray:
    """GGN eigenvectors ``e_k = V e~_k / sqrt(lambda_k)`` as columns.

    ``indices`` defaults to every retained direction.
    """
    idx = np.arange(spec.num_retained) if indices is None else spec.check_indices(indices)
    lam = spec.eigenvalues[idx]
    return factor.apply(spec.eigenvectors[:, idx] / np.sqrt(lam))


def weighted_eigvec_sum(factor: LowRankFactor, spec: GramSpectrum, weights) -> np.ndarray:
    """``sum_k c_k / sqrt(lambda_k) * e_k`` with a single application of ``V``.

    ``weights`` has one entry per retained direction. The sum is formed in
    Gram space as ``sum_k c_k / lambda_k * e~_k`` and transformed once.
    """
    c = np.asarray(weights, dtype=np.float64).reshape(-1)
    if c.shape[0] > spec.num_retained:
        raise ClippedEigenvalueError(
            f"{c.shape[0]} weights given for {spec.num_retained} retained directions"
        )
    k = c.shape[0]
    x = spec.eigenvectors[:, :k] @ (c / spec.eigenvalues[:k])
    return factor.apply(x)


@dataclass(frozen=True)
class DirectionalDerivs:
    """Per-sample slopes and curvatures along the retained eigenvectors.

    ``gammas`` is ``(N, K)`` over the whole batch; ``lambdas`` is
    ``(N_eff, K)`` over the curvature samples, whose batch positions are
    ``curvature_samples``.
    """

    gammas: np.ndarray
    lambdas: np.ndarray
    curvature_samples: np.ndarray

    @property
    def gamma_means(self) -> np.ndarray:
        return self.gammas.mean(axis=0)

    @property
    def lambda_means(self) -> np.ndarray:
        return self.lambdas.mean(axis=0)


def directional_derivatives(factor: LowRankFactor, spec: GramSpectrum, per_sample_grads,
                            indices=None) -> DirectionalDerivs:
    """First- and second-order directional derivatives per sample.

    ``gamma_nk = e~_k^T (V^T g_n) / sqrt(lambda_k)`` uses every row of
    ``per_sample_grads``; ``lambda_nk = ||U_n^T V e~_k||^2 / lambda_k`` reads
    ``U_n^T V`` off the Gram matrix, with ``U_n`` the columns of sample ``n``
    rescaled to square-root factors of that sample's GGN.
    """
    grads = np.asarray(per_sample_grads, dtype=np.float64)
    if grads.ndim != 2 or grads.shape[1] != factor.num_params:
        raise DimensionMismatchError(
            f"per-sample gradients must have shape (N, {factor.num_params})"
        )
    idx = np.arange(spec.num_retained) if indices is None else spec.check_indices(indices)
    if idx.size == 0:
        raise ClippedEigenvalueError("no eigenvalue exceeds the clip threshold")
    lam = spec.eigenvalues[idx]
    evecs = spec.eigenvectors[:, idx]
    vtg = factor.apply_transpose(grads.T)  # (num_cols, N)
    gammas = (evecs.T @ vtg).T / np.sqrt(lam)
    proj = (spec.gram @ evecs).reshape(factor.n_eff, factor.cols_per_sample, -1)
    proj = proj * factor.per_sample_rescale
    lambdas = np.sum(proj**2, axis=1) / lam
    return DirectionalDerivs(gammas, lambdas, factor.sample_indices)


@dataclass
class BlockEigen:
    """Eigenpairs of the GGN restricted to one layer's diagonal block."""

    layer: int
    param_slice: slice
    factor: LowRankFactor
    spectrum: GramSpectrum


class LowRankGGN:
    """Curvature of a mini-batch under a :class:`CurvatureConfig`.

    Bundles factor construction, Gram eigendecomposition and eigenvector
    transport. In ``layerwise`` block mode each layer gets its own Gram
    matrix and the eigenpairs of the block-diagonal GGN are the union of the
    per-layer ones, ordered by eigenvalue.
    """

    def __init__(self, net: FeedForwardNet, batch: Batch, loss: str,
                 config: CurvatureConfig = CurvatureConfig(), gram_method: str = "optimized",
                 eig_method: str = "auto"):
        self.net, self.batch, self.loss, self.config = net, batch, loss, config
        self.factor = build_factor(net, batch, loss, config)
        slices = self.factor.layer_slices()
        if config.block_mode == "full":
            g = gram_matrix(self.factor, gram_method)
            self.blocks = [BlockEigen(-1, slice(0, net.num_params), self.factor,
                                      spectrum(g, config.clip_threshold, eig_method))]
        else:
            self.blocks = []
            for i, sl in enumerate(slices):
                sub = self.factor.layer_factor(i)
                g = layer_gram(self.factor, i, gram_method)
                self.blocks.append(BlockEigen(i, sl, sub,
                                              spectrum(g, config.clip_threshold, eig_method)))
        order = [
            (-b.spectrum.eigenvalues[k], bi, k)
            for bi, b in enumerate(self.blocks)
            for k in range(b.spectrum.num_retained)
        ]
        order.sort()
        self._order = [(bi, k) for _, bi, k in order]

    @property
    def num_retained(self) -> int:
        return len(self._order)

    @property
    def eigenvalues(self) -> np.ndarray:
        """Retained eigenvalues in descending order."""
        return np.array([self.blocks[bi].spectrum.eigenvalues[k] for bi, k in self._order])

    def eigenvectors(self, k: int | None = None) -> np.ndarray:
        """Leading ``k`` parameter-space eigenvectors as a ``(D, k)`` matrix."""
        k = self.num_retained if k is None else k
        if k > self.num_retained:
            raise ClippedEigenvalueError(
                f"requested {k} eigenvectors, only {self.num_retained} retained"
            )
        out = np.zeros((self.net.num_params, k))
        for col, (bi, kk) in enumerate(self._order[:k]):
            b = self.blocks[bi]
            out[b.param_slice, col] = eigenvectors_to_parameter_space(b.factor, b.spectrum, [kk])[:, 0]
        return out

    def directional_derivatives(self, k: int | None = None) -> DirectionalDerivs:
        """Per-sample derivatives along the leading ``k`` directions.

        Gradients always use the full batch, also in ``sub`` mode.
        """
        k = self.num_retained if k is None else k
        if k > self.num_retained or self.num_retained == 0:
            raise ClippedEigenvalueError(
                f"requested {k} directions, only {self.num_retained} retained"
            )
        grads = per_sample_gradients(self.net, forward(self.net, self.batch, self.loss))
        gammas, lambdas = [], []
        for bi, kk in self._order[:k]:
            b = self.blocks[bi]
            d = directional_derivatives(b.factor, b.spectrum, grads[:, b.param_slice], [kk])
            gammas.append(d.gammas[:, 0])
            lambdas.append(d.lambdas[:, 0])
        return DirectionalDerivs(np.stack(gammas, axis=1), np.stack(lambdas, axis=1),
                                 self.factor.sample_indices)
