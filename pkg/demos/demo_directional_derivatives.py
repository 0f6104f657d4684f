"""
Per-sample slopes and curvatures along eigenvectors
===================================================

Along each GGN eigenvector ``e_k`` the loss has a slope ``gamma_k`` and a
curvature ``lambda_k``. Both are averages over samples, and the per-sample
terms ``gamma_nk`` and ``lambda_nk`` fall out of quantities the Gram route
already has. Their signal-to-noise ratio tells how reliably a mini-batch
estimates the direction's slope or curvature.
"""

# %%
import numpy as np

from lowrank_ggn import Batch, FeedForwardNet, LowRankGGN, mean_gradient, snr

rng = np.random.default_rng(1)
net = FeedForwardNet.init([6, 16, 3], ["relu", "identity"], seed=1)
batch = Batch(rng.standard_normal((32, 6)), rng.integers(0, 3, 32))
model = LowRankGGN(net, batch, "cross_entropy")
d = model.directional_derivatives(3)
print("gammas:", d.gammas.shape, " lambdas:", d.lambdas.shape)

# %%
# Sample means recover the slope of the mean gradient and the eigenvalue.
e = model.eigenvectors(3)
print("mean gamma_nk  :", np.round(d.gamma_means, 6))
print("e_k . gradient :", np.round(e.T @ mean_gradient(net, batch, "cross_entropy"), 6))
print("mean lambda_nk :", np.round(d.lambda_means, 6))
print("eigenvalues    :", np.round(model.eigenvalues[:3], 6))

# %%
# Squared mean over variance. Curvatures are all non-negative, which often
# gives them a higher SNR than the slopes.
for k in range(3):
    print(f"k={k + 1}: SNR(gamma) = {snr(d.gammas[:, k]):8.3f}   SNR(lambda) = {snr(d.lambdas[:, k]):8.3f}")
