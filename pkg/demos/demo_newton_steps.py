"""
Damped Newton steps in Gram space
=================================

``-(G + delta I)^{-1} g`` needs only a solve with the ``NC x NC`` damped
Gram matrix (inversion lemma). Restricted to the retained eigenvectors the
step is a weighted sum of them, which is also assembled in Gram space.
The per-layer variant processes one layer's block at a time.
"""

# %%
import numpy as np

from lowrank_ggn import Batch, CurvatureConfig, FeedForwardNet, NewtonConfig, forward, newton_step

rng = np.random.default_rng(2)
net = FeedForwardNet.init([5, 12, 3], ["tanh", "identity"], seed=2)
batch = Batch(rng.standard_normal((24, 5)), rng.integers(0, 3, 24))
loss0 = forward(net, batch, "cross_entropy").mean_loss
print(f"loss before: {loss0:.6f}")

# %%
# All four combinations of solver and block structure with damping 1.
steps = {}
for mode in ("eigen", "inversion_lemma"):
    for block in ("full", "layerwise"):
        step = newton_step(net, batch, "cross_entropy", CurvatureConfig(),
                           NewtonConfig(1.0, mode, block))
        after = forward(net.with_params(net.get_params() + step), batch, "cross_entropy").mean_loss
        steps[mode, block] = step
        print(f"{mode:>15} {block:>9}: |step| = {np.linalg.norm(step):.4f}, loss after = {after:.6f}")

# %%
# The eigen step leaves out the component of the gradient outside the
# retained span. The two full-GGN steps differ by exactly that part, -g_perp/delta.
diff = steps["inversion_lemma", "full"] - steps["eigen", "full"]
print("norm of the difference:", np.linalg.norm(diff))

# %%
# Larger damping shortens the step.
for delta in (0.01, 0.1, 1.0, 10.0, 100.0):
    step = newton_step(net, batch, "cross_entropy", CurvatureConfig(),
                       NewtonConfig(delta, "inversion_lemma"))
    print(f"delta = {delta:6g}: |step| = {np.linalg.norm(step):.5f}")
