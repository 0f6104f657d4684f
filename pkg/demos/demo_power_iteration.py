"""
Gram method against power iteration
===================================

Power iteration pays for every eigenpair with a fresh run of GGN-vector
products, so its cost grows with the number of requested directions. The
Gram method eigendecomposes once and gets all directions at nearly the same
cost. Both give the same leading eigenvalues when the spectrum is well
separated.
"""

# %%
import numpy as np

from lowrank_ggn import Batch, FeedForwardNet, LowRankGGN
from lowrank_ggn.baseline import benchmark_topk, power_topk

rng = np.random.default_rng(3)
net = FeedForwardNet.init([32, 64, 10], ["tanh", "identity"], seed=3)
batch = Batch(rng.standard_normal((32, 32)), rng.integers(0, 10, 32))
print("parameters:", net.num_params)

# %%
# Leading eigenvalues from both methods. Power iteration stops once the
# estimate changes by less than 1e-3 relative, or after 100 products.
gram = LowRankGGN(net, batch, "cross_entropy").eigenvalues[:3]
power = power_topk(net, batch, "cross_entropy", 3)
for k in range(3):
    print(f"k={k + 1}: gram {gram[k]:.6f}  power {power[k].eigenvalue:.6f}  "
          f"({power[k].matvecs} products, converged={power[k].converged})")

# %%
# Best-of-5 wall times for one and ten directions.
rows = benchmark_topk(net, batch, "cross_entropy", [1, 10], repeats=5)
t = {(m, k): s for m, k, s in rows}
for method in ("gram", "power"):
    print(f"{method:>5}: k=1 {t[method, 1] * 1e3:7.1f} ms   k=10 {t[method, 10] * 1e3:7.1f} ms   "
          f"ratio {t[method, 10] / t[method, 1]:.2f}")
