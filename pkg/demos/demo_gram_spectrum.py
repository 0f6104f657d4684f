"""
GGN eigenvalues from the Gram matrix
====================================

The GGN of a mini-batch is ``G = V V^T`` with ``V`` of shape ``D x NC``.
Its nonzero eigenvalues are those of the much smaller Gram matrix
``V^T V``. This script builds a small classifier, computes the spectrum
both ways and then tries the cheaper variants (Monte Carlo factors,
curvature sub-sampling, per-layer blocks).
"""

# %%
# A two-layer tanh network on random data. D is a few hundred, NC is 60.
import numpy as np

from lowrank_ggn import Batch, CurvatureConfig, FeedForwardNet, LowRankGGN, build_factor
from lowrank_ggn.lowrank import gram_matrix, track_blocks

rng = np.random.default_rng(0)
net = FeedForwardNet.init([8, 24, 4], ["tanh", "identity"], seed=0)
batch = Batch(rng.standard_normal((15, 8)), rng.integers(0, 4, 15))
print("parameters D =", net.num_params, " Gram size NC =", batch.size * net.output_dim)

# %%
# The Gram route. ``LowRankGGN`` keeps every eigenvalue above the clip
# threshold (1e-4 by default).
model = LowRankGGN(net, batch, "cross_entropy")
print("retained directions:", model.num_retained)
print("top five eigenvalues:", np.round(model.eigenvalues[:5], 6))

# %%
# The brute-force route, only possible because D is small: expand V and
# eigendecompose the D x D matrix.
v = model.factor.dense()
dense = np.linalg.eigvalsh(v @ v.T)[::-1][: model.num_retained]
print("largest relative difference:", np.max(np.abs(dense - model.eigenvalues) / dense))

# %%
# Eigenvectors come back in parameter space and are orthonormal.
e = model.eigenvectors(5)
print("orthonormality error:", np.max(np.abs(e.T @ e - np.eye(5))))

# %%
# For linear layers the Gram matrix is contracted from layer inputs and
# backpropagated vectors directly, so no D x NC block is ever expanded.
factor = build_factor(net, batch, "cross_entropy")
with track_blocks() as tracker:
    gram_matrix(factor)
print("expanded blocks on the optimized path:", tracker.materialized)

# %%
# Cheaper approximations: one Monte Carlo column per sample shrinks the
# Gram matrix from NC to N, and ``sub`` uses only floor(N/8) samples.
for cfg in (CurvatureConfig(factor_mode="mc", mc_samples=1),
            CurvatureConfig(sample_mode="sub"),
            CurvatureConfig(block_mode="layerwise")):
    approx = LowRankGGN(net, batch, "cross_entropy", cfg)
    print(f"{cfg.sample_mode:>3} {cfg.factor_mode:>5} {cfg.block_mode:>9}: "
          f"{approx.num_retained:3d} directions, top eigenvalue {approx.eigenvalues[0]:.4f}")
