"""Low-rank GGN curvature for small feed-forward networks.

The generalized Gauss-Newton matrix of a mini-batch is handled through its
factor ``V`` (``G = V V^T``). Eigenpairs, directional derivatives and damped
Newton steps are computed from the small Gram matrix ``V^T V``.
"""

from lowrank_ggn.baseline import (
    PowerIterConfig,
    PowerIterResult,
    finite_difference_hessian,
    ggn_matvec,
    power_iteration_topk,
)
from lowrank_ggn.linalg import EigenDecomposition, sym_eig
from lowrank_ggn.lowrank import (
    CurvatureConfig,
    DirectionalDerivs,
    GramSpectrum,
    LowRankFactor,
    LowRankGGN,
    build_factor,
    directional_derivatives,
    eigenvectors_to_parameter_space,
    gram_matrix,
    spectrum,
    track_blocks,
)
from lowrank_ggn.metrics import overlap_topc, snr
from lowrank_ggn.net import (
    Batch,
    FeedForwardNet,
    Layer,
    forward,
    loss_hessian,
    loss_hessian_factor_exact,
    loss_hessian_factor_mc,
    mean_gradient,
    per_sample_gradients,
)
from lowrank_ggn.newton import (
    NewtonConfig,
    newton_step,
    newton_step_blockwise,
    newton_step_eigen,
    newton_step_inversion_lemma,
)
from lowrank_ggn.serialization import load_checkpoint, save_checkpoint

__version__ = "0.1.0"
