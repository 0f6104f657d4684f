"""
How well does a mini-batch see the top eigenspace?
==================================================

The overlap of two ``C``-dimensional subspaces is ``||E_U^T E_V||_F^2 / C``,
1 for identical and 0 for orthogonal ones. Here the top-C eigenspace of the
full-batch GGN serves as reference and the approximations are computed on
mini-batches of increasing size.
"""

# %%
import numpy as np

from lowrank_ggn import Batch, CurvatureConfig, LowRankGGN
from lowrank_ggn.experiments import DEFAULT_CONFIG, build_net, gen_synthetic
from lowrank_ggn.metrics import overlap_leading

x, y = gen_synthetic(classes=4, dim=6, n_per_class=64, spread=1.0, seed=4)
data = Batch(x, y)
net = build_net(DEFAULT_CONFIG, input_dim=6, num_classes=4)
c = net.output_dim
reference = LowRankGGN(net, data, "cross_entropy").eigenvectors(c)

# %%
# Five random mini-batches per size, exact and Monte Carlo factors.
rng = np.random.default_rng(0)
for n in (8, 32, 128):
    for mode in ("exact", "mc"):
        values = []
        for _ in range(5):
            idx = rng.choice(data.size, n, replace=False)
            approx = LowRankGGN(net, data.subset(idx), "cross_entropy", CurvatureConfig(factor_mode=mode))
            values.append(overlap_leading(approx.eigenvectors(min(c, approx.num_retained)), reference, c)[0])
        print(f"N={n:4d} {mode:>5}: overlap {np.mean(values):.3f} +- {np.std(values):.3f}")
