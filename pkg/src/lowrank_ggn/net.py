"""Fully-connected networks with hand-written forward and reverse passes.

Each layer computes ``z = act(W @ z_prev + b)``. Parameters are flattened
layer by layer: the column-stacked weight matrix, then the bias. With this
ordering the Jacobian of a layer's pre-activation with respect to its
weights is ``kron(z_prev^T, I)``.

Per-sample quantities carry the sample index on axis 0. Functions that
backpropagate several vectors per sample accept arrays of shape
``(N, K, dim)``; a plain ``(N, dim)`` array is treated as ``K = 1`` and
returned in the same layout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from lowrank_ggn.errors import (
    BadLayerIndexError,
    DimensionMismatchError,
    StaleTraceError,
    UnknownActivationError,
    UnknownLossError,
)

ACTIVATIONS = ("relu", "tanh", "sigmoid", "identity")
LOSSES = ("cross_entropy", "square")


def make_rng(seed) -> np.random.Generator:
    """Counter-based generator (Philox) for a seed, or pass a generator through."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.Philox(seed))


def _activate(name: str, a: np.ndarray) -> np.ndarray:
    if name == "identity":
        return a
    if name == "relu":
        return np.maximum(a, 0.0)
    if name == "tanh":
        return np.tanh(a)
    if name == "sigmoid":
        return 0.5 * (1.0 + np.tanh(0.5 * a))
    raise UnknownActivationError(name)


def _activation_derivative(name: str, a: np.ndarray) -> np.ndarray:
    if name == "identity":
        return np.ones_like(a)
    if name == "relu":
        # derivative at exactly 0 is 0
        return (a > 0.0).astype(np.float64)
    if name == "tanh":
        return 1.0 - np.tanh(a) ** 2
    if name == "sigmoid":
        s = 0.5 * (1.0 + np.tanh(0.5 * a))
        return s * (1.0 - s)
    raise UnknownActivationError(name)


def _check_loss(loss: str) -> None:
    if loss not in LOSSES:
        raise UnknownLossError(f"unknown loss {loss!r}; expected one of {LOSSES}")


@dataclass
class Layer:
    weight: np.ndarray
    bias: np.ndarray | None = None
    activation: str = "identity"

    def __post_init__(self):
        self.weight = np.array(self.weight, dtype=np.float64, ndmin=2)
        if self.weight.ndim != 2:
            raise DimensionMismatchError("weight must be a matrix")
        if self.bias is not None:
            self.bias = np.array(self.bias, dtype=np.float64).reshape(-1)
            if self.bias.shape[0] != self.weight.shape[0]:
                raise DimensionMismatchError(
                    f"bias of length {self.bias.shape[0]} does not match "
                    f"{self.weight.shape[0]} outputs"
                )
        if self.activation not in ACTIVATIONS:
            raise UnknownActivationError(self.activation)

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def num_params(self) -> int:
        return self.weight.size + (0 if self.bias is None else self.bias.size)

    def flat_params(self) -> np.ndarray:
        parts = [self.weight.ravel(order="F")]
        if self.bias is not None:
            parts.append(self.bias)
        return np.concatenate(parts)


@dataclass
class FeedForwardNet:
    """Ordered stack of dense layers."""

    layers: list[Layer]

    def __post_init__(self):
        if not self.layers:
            raise DimensionMismatchError("a network needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise DimensionMismatchError(
                    f"layer dims do not chain: {prev.out_dim} -> {nxt.in_dim}"
                )

    @classmethod
    def init(cls, sizes, activations, seed=0, bias: bool = True) -> FeedForwardNet:
        """Xavier-uniform weights and zero biases.

        ``sizes`` lists the input dimension followed by every layer's output
        dimension; ``activations`` has one entry per layer.
        """
        if len(activations) != len(sizes) - 1:
            raise DimensionMismatchError("need one activation per layer")
        rng = make_rng(seed)
        layers = []
        for fan_in, fan_out, act in zip(sizes[:-1], sizes[1:], activations):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
            layers.append(Layer(w, np.zeros(fan_out) if bias else None, act))
        return cls(layers)

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def layer_sizes(self) -> list[int]:
        return [layer.num_params for layer in self.layers]

    @property
    def num_params(self) -> int:
        return sum(self.layer_sizes)

    def layer_slices(self) -> list[slice]:
        bounds = np.cumsum([0, *self.layer_sizes])
        return [slice(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]

    def signature(self) -> tuple:
        return tuple((l.weight.shape, l.bias is not None, l.activation) for l in self.layers)

    def get_params(self) -> np.ndarray:
        return np.concatenate([layer.flat_params() for layer in self.layers])

    def with_params(self, theta) -> FeedForwardNet:
        """Copy of the network with parameters taken from a flat vector."""
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.num_params,):
            raise DimensionMismatchError(
                f"expected {self.num_params} parameters, got shape {theta.shape}"
            )
        layers = []
        for layer, sl in zip(self.layers, self.layer_slices()):
            chunk = theta[sl]
            nw = layer.weight.size
            w = chunk[:nw].reshape(layer.weight.shape, order="F")
            b = chunk[nw:].copy() if layer.bias is not None else None
            layers.append(Layer(w.copy(), b, layer.activation))
        return FeedForwardNet(layers)


@dataclass
class Batch:
    """Inputs of shape ``(N, input_dim)`` with targets.

    Cross-entropy targets are integer class indices of shape ``(N,)``;
    square-loss targets are real arrays of shape ``(N, C)``.
    """

    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.inputs = np.array(self.inputs, dtype=np.float64, ndmin=2)
        self.targets = np.asarray(self.targets)
        if self.inputs.shape[0] < 1:
            raise DimensionMismatchError("a batch needs at least one sample")
        if self.targets.shape[0] != self.inputs.shape[0]:
            raise DimensionMismatchError("inputs and targets disagree in sample count")

    @property
    def size(self) -> int:
        return self.inputs.shape[0]

    def subset(self, indices) -> Batch:
        indices = np.asarray(indices, dtype=np.intp)
        return Batch(self.inputs[indices], self.targets[indices])


@dataclass
class ForwardTrace:
    """Everything the backward passes need from a forward pass.

    ``layer_inputs[i]`` holds the input of layer ``i`` for every sample and
    ``preactivations[i]`` its output before the activation.
    """

    layer_inputs: list[np.ndarray]
    preactivations: list[np.ndarray]
    outputs: np.ndarray
    losses: np.ndarray
    targets: np.ndarray
    loss: str
    signature: tuple = field(repr=False)

    @property
    def mean_loss(self) -> float:
        return float(np.mean(self.losses))

    @property
    def num_samples(self) -> int:
        return self.outputs.shape[0]


@dataclass
class LossHessianFactor:
    """Symmetric square-root factors of the per-sample loss Hessians.

    ``columns[n]`` is a ``(C, K)`` matrix whose columns are the vectors
    ``s_nk``; ``K = C`` for the exact factorization and ``K = M`` for Monte
    Carlo. In ``mc`` mode ``columns[n] @ columns[n].T / M`` is an unbiased
    estimate of the loss Hessian.
    """

    columns: np.ndarray
    mode: str
    mc_samples: int = 1

    @property
    def num_columns(self) -> int:
        return self.columns.shape[2]


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _check_targets(batch: Batch, loss: str, out_dim: int) -> np.ndarray:
    t = batch.targets
    if loss == "cross_entropy":
        t = np.asarray(t).reshape(-1)
        if not np.issubdtype(t.dtype, np.integer):
            if np.any(t != np.round(t)):
                raise DimensionMismatchError("cross-entropy targets must be class indices")
            t = t.astype(np.int64)
        if t.shape[0] != batch.size or np.any(t < 0) or np.any(t >= out_dim):
            raise DimensionMismatchError(f"class indices must lie in [0, {out_dim})")
        return t
    t = np.asarray(t, dtype=np.float64).reshape(batch.size, -1)
    if t.shape[1] != out_dim:
        raise DimensionMismatchError(
            f"square-loss targets have {t.shape[1]} columns, network outputs {out_dim}"
        )
    return t


def forward(net: FeedForwardNet, batch: Batch, loss: str) -> ForwardTrace:
    """Run the network on a batch and record per-layer inputs and losses.

    Square loss is ``||f - y||^2`` without a factor 1/2; cross-entropy is the
    negative log-softmax probability of the target class.
    """
    _check_loss(loss)
    if batch.inputs.shape[1] != net.input_dim:
        raise DimensionMismatchError(
            f"inputs have dimension {batch.inputs.shape[1]}, network expects {net.input_dim}"
        )
    targets = _check_targets(batch, loss, net.output_dim)
    z = batch.inputs
    inputs, preacts = [], []
    for layer in net.layers:
        inputs.append(z)
        a = z @ layer.weight.T
        if layer.bias is not None:
            a = a + layer.bias
        preacts.append(a)
        z = _activate(layer.activation, a)
    if loss == "square":
        losses = np.sum((z - targets) ** 2, axis=1)
    else:
        shifted = z - z.max(axis=1, keepdims=True)
        logsumexp = np.log(np.sum(np.exp(shifted), axis=1))
        losses = logsumexp - shifted[np.arange(batch.size), targets]
    return ForwardTrace(inputs, preacts, z, losses, targets, loss, net.signature())


def _check_trace(net: FeedForwardNet, trace: ForwardTrace) -> None:
    if trace.signature != net.signature():
        raise StaleTraceError("trace was produced by a network with different structure")


def _check_layer_index(net: FeedForwardNet, i: int) -> None:
    if not (isinstance(i, (int, np.integer)) and 0 <= i < net.num_layers):
        raise BadLayerIndexError(f"layer index {i} out of range for {net.num_layers} layers")


def _as_stacked(vectors: np.ndarray) -> tuple[np.ndarray, bool]:
    v = np.asarray(vectors, dtype=np.float64)
    if v.ndim == 2:
        return v[:, None, :], True
    if v.ndim != 3:
        raise DimensionMismatchError("expected per-sample vectors of shape (N, dim) or (N, K, dim)")
    return v, False


def backprop_to_layer(net: FeedForwardNet, trace: ForwardTrace, layer_index: int,
                      output_vectors) -> np.ndarray:
    """Apply ``(J_a f_n)^T`` where ``a`` is the pre-activation of a layer.

    Vectors living in output space are pulled back through activations and
    transposed weights down to layer ``layer_index``.
    """
    _check_trace(net, trace)
    _check_layer_index(net, layer_index)
    v, flat = _as_stacked(output_vectors)
    if v.shape[0] != trace.num_samples or v.shape[2] != net.output_dim:
        raise DimensionMismatchError("output vectors do not match trace")
    last = net.num_layers - 1
    delta = v * _activation_derivative(net.layers[last].activation, trace.preactivations[last])[:, None, :]
    for j in range(last, layer_index, -1):
        below = net.layers[j - 1]
        delta = (delta @ net.layers[j].weight) * _activation_derivative(
            below.activation, trace.preactivations[j - 1]
        )[:, None, :]
    return delta[:, 0, :] if flat else delta


def backprop_to_input(net: FeedForwardNet, trace: ForwardTrace, output_vectors) -> np.ndarray:
    """Apply ``(J_x f_n)^T`` to vectors in output space."""
    v, flat = _as_stacked(output_vectors)
    delta = backprop_to_layer(net, trace, 0, v) @ net.layers[0].weight
    return delta[:, 0, :] if flat else delta


def jtv_layer(net: FeedForwardNet, trace: ForwardTrace, layer_index: int, upstream) -> np.ndarray:
    """Map vectors at a layer's pre-activation to that layer's parameter space.

    For sample ``n`` and vector ``s`` the weight part is ``vec(s z_n^T)``
    (column-stacked, i.e. ``kron(z_n, s)``) and the bias part is ``s``.
    """
    _check_trace(net, trace)
    _check_layer_index(net, layer_index)
    layer = net.layers[layer_index]
    s, flat = _as_stacked(upstream)
    z = trace.layer_inputs[layer_index]
    if s.shape[0] != z.shape[0] or s.shape[2] != layer.out_dim:
        raise DimensionMismatchError("upstream vectors do not match layer output")
    n, k = s.shape[:2]
    weight_part = np.einsum("nj,nkr->nkjr", z, s).reshape(n, k, layer.weight.size)
    out = weight_part if layer.bias is None else np.concatenate([weight_part, s], axis=2)
    return out[:, 0, :] if flat else out


def output_gradients(trace: ForwardTrace) -> np.ndarray:
    """Per-sample gradients of the loss with respect to the network output."""
    f = trace.outputs
    if trace.loss == "square":
        return 2.0 * (f - trace.targets)
    g = softmax(f)
    g[np.arange(f.shape[0]), trace.targets] -= 1.0
    return g


def per_sample_gradients(net: FeedForwardNet, trace: ForwardTrace, loss: str | None = None) -> np.ndarray:
    """Gradients of every per-sample loss, as an ``(N, D)`` matrix."""
    _check_trace(net, trace)
    if loss is not None and loss != trace.loss:
        raise StaleTraceError(f"trace was recorded for loss {trace.loss!r}, not {loss!r}")
    grad_out = output_gradients(trace)
    parts = [
        jtv_layer(net, trace, i, backprop_to_layer(net, trace, i, grad_out))
        for i in range(net.num_layers)
    ]
    return np.concatenate(parts, axis=1)


def mean_gradient(net: FeedForwardNet, batch: Batch, loss: str) -> np.ndarray:
    trace = forward(net, batch, loss)
    return per_sample_gradients(net, trace).mean(axis=0)


def loss_hessian(trace: ForwardTrace) -> np.ndarray:
    """Analytic per-sample Hessians of the loss w.r.t. the output, ``(N, C, C)``."""
    n, c = trace.outputs.shape
    if trace.loss == "square":
        return np.broadcast_to(2.0 * np.eye(c), (n, c, c)).copy()
    p = softmax(trace.outputs)
    return np.einsum("ni,ij->nij", p, np.eye(c)) - np.einsum("ni,nj->nij", p, p)


def loss_hessian_factor_exact(trace: ForwardTrace, loss: str | None = None) -> LossHessianFactor:
    """Exact square root ``S_n`` with ``S_n S_n^T`` equal to the loss Hessian.

    Square loss uses ``sqrt(2) I``; cross-entropy uses
    ``diag(sqrt(p)) - p sqrt(p)^T`` with softmax probabilities ``p``.
    """
    loss = trace.loss if loss is None else loss
    _check_loss(loss)
    n, c = trace.outputs.shape
    if loss == "square":
        cols = np.broadcast_to(np.sqrt(2.0) * np.eye(c), (n, c, c)).copy()
    else:
        p = softmax(trace.outputs)
        sqrt_p = np.sqrt(p)
        cols = np.einsum("ni,ij->nij", sqrt_p, np.eye(c)) - np.einsum("ni,nj->nij", p, sqrt_p)
    return LossHessianFactor(cols, "exact", 1)


def loss_hessian_factor_mc(trace: ForwardTrace, loss: str | None = None, m: int = 1,
                           rng=0) -> LossHessianFactor:
    """Sampled factor columns whose outer products average to the loss Hessian.

    Cross-entropy draws labels from the model's predictive distribution and
    uses ``p - onehot(label)``; square loss draws ``sqrt(2) * N(0, I)``.
    """
    loss = trace.loss if loss is None else loss
    _check_loss(loss)
    if m < 1:
        raise ValueError("need at least one Monte-Carlo sample")
    rng = make_rng(rng)
    n, c = trace.outputs.shape
    if loss == "square":
        cols = np.sqrt(2.0) * rng.standard_normal((n, c, m))
    else:
        p = softmax(trace.outputs)
        cdf = np.cumsum(p, axis=1)
        u = rng.random((n, m))
        labels = np.minimum((u[:, :, None] >= cdf[:, None, :]).sum(axis=2), c - 1)
        onehot = np.eye(c)[labels]  # (n, m, c)
        cols = np.transpose(p[:, None, :] - onehot, (0, 2, 1))
    return LossHessianFactor(np.ascontiguousarray(cols), "mc", m)


def jvp(net: FeedForwardNet, trace: ForwardTrace, direction) -> np.ndarray:
    """Forward-mode product ``J_theta f_n @ v`` for every sample, ``(N, C)``."""
    _check_trace(net, trace)
    v = np.asarray(direction, dtype=np.float64)
    if v.shape != (net.num_params,):
        raise DimensionMismatchError(f"direction must have shape ({net.num_params},)")
    dz = np.zeros_like(trace.layer_inputs[0])
    for i, (layer, sl) in enumerate(zip(net.layers, net.layer_slices())):
        chunk = v[sl]
        dw = chunk[: layer.weight.size].reshape(layer.weight.shape, order="F")
        da = trace.layer_inputs[i] @ dw.T + dz @ layer.weight.T
        if layer.bias is not None:
            da = da + chunk[layer.weight.size:]
        dz = da * _activation_derivative(layer.activation, trace.preactivations[i])
    return dz
