import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from conftest import random_problem
from lowrank_ggn.errors import (
    BadLayerIndexError,
    DimensionMismatchError,
    StaleTraceError,
    UnknownActivationError,
    UnknownLossError,
)
from lowrank_ggn.net import (
    Batch,
    FeedForwardNet,
    Layer,
    backprop_to_input,
    backprop_to_layer,
    forward,
    jtv_layer,
    jvp,
    loss_hessian,
    loss_hessian_factor_exact,
    loss_hessian_factor_mc,
    mean_gradient,
    per_sample_gradients,
)


def test_parameter_count_and_flattening():
    net = FeedForwardNet([Layer(np.arange(6.0).reshape(2, 3), [10.0, 11.0], "tanh"),
                          Layer([[1.0, 2.0]], None, "identity")])
    assert net.num_params == 6 + 2 + 2
    # weights column-stacked, then bias
    np.testing.assert_array_equal(net.get_params(), [0, 3, 1, 4, 2, 5, 10, 11, 1, 2])
    theta = np.arange(10.0)
    assert np.array_equal(net.with_params(theta).get_params(), theta)


def test_init_chains_and_counts():
    net = FeedForwardNet.init([4, 7, 3], ["relu", "identity"], seed=0)
    assert net.layer_sizes == [4 * 7 + 7, 7 * 3 + 3]
    assert net.num_params == sum(net.layer_sizes)
    bound = np.sqrt(6 / (4 + 7))
    assert np.all(np.abs(net.layers[0].weight) <= bound)
    with pytest.raises(DimensionMismatchError):
        FeedForwardNet([Layer(np.ones((2, 3))), Layer(np.ones((2, 3)))])
    with pytest.raises(UnknownActivationError):
        Layer(np.ones((1, 1)), None, "softplus")


def test_forward_scalar_square():
    net = FeedForwardNet([Layer([[1.0]], [0.0], "identity")])
    trace = forward(net, Batch([[3.0]], [[0.0]]), "square")
    assert trace.outputs[0, 0] == 3.0
    assert trace.losses[0] == 9.0


def test_forward_uniform_softmax():
    net = FeedForwardNet([Layer(np.zeros((2, 3)), np.zeros(2), "identity")])
    trace = forward(net, Batch(np.ones((4, 3)), [0, 1, 1, 0]), "cross_entropy")
    np.testing.assert_allclose(trace.losses, np.log(2), rtol=1e-15)


@pytest.mark.parametrize("loss", ["cross_entropy", "square"])
def test_forward_matches_independent_reimplementation(loss):
    net, batch = random_problem(0, loss=loss, activations=("sigmoid", "identity"))
    trace = forward(net, batch, loss)
    ref = [oracles.sample_loss(oracles.net_forward(net, x)[0], y, loss)
           for x, y in zip(batch.inputs, batch.targets)]
    np.testing.assert_allclose(trace.losses, ref, rtol=1e-12, atol=1e-12)
    assert abs(trace.mean_loss - np.mean(trace.losses)) <= 1e-12


def test_forward_errors():
    net, batch = random_problem(1)
    with pytest.raises(UnknownLossError):
        forward(net, batch, "hinge")
    with pytest.raises(DimensionMismatchError):
        forward(net, Batch(np.ones((2, 9)), [0, 1]), "cross_entropy")


def test_scalar_gradient(scalar_problem):
    net, batch, loss = scalar_problem
    g = per_sample_gradients(net, forward(net, batch, loss))
    np.testing.assert_allclose(g, [[6.0]])


def test_identical_samples_identical_rows():
    net, _ = random_problem(2)
    batch = Batch(np.tile([0.1, -0.2, 0.3, 0.5], (3, 1)), [1, 1, 1])
    g = per_sample_gradients(net, forward(net, batch, "cross_entropy"))
    assert np.array_equal(g[0], g[1]) and np.array_equal(g[1], g[2])


@pytest.mark.parametrize("loss", ["cross_entropy", "square"])
@pytest.mark.parametrize("acts", [("tanh", "identity"), ("relu", "sigmoid")])
def test_gradients_match_finite_differences(loss, acts):
    net, batch = random_problem(3, loss=loss, activations=acts)
    g = per_sample_gradients(net, forward(net, batch, loss))
    assert np.max(np.abs(g - oracles.fd_sample_gradients(net, batch, loss))) <= 1e-6
    np.testing.assert_allclose(g.mean(axis=0), mean_gradient(net, batch, loss), atol=1e-14)


def test_stale_trace():
    net, batch = random_problem(4)
    other, _ = random_problem(4, sizes=(4, 5, 3))
    with pytest.raises(StaleTraceError):
        per_sample_gradients(other, forward(net, batch, "cross_entropy"))


def test_square_factor_scalar():
    net = FeedForwardNet([Layer([[1.0]], None, "identity")])
    f = loss_hessian_factor_exact(forward(net, Batch([[1.0]], [[0.5]]), "square"))
    np.testing.assert_allclose(f.columns, [[[np.sqrt(2)]]])


def test_cross_entropy_factor_uniform():
    net = FeedForwardNet([Layer(np.zeros((2, 1)), None, "identity")])
    f = loss_hessian_factor_exact(forward(net, Batch([[1.0]], [0]), "cross_entropy"))
    s = f.columns[0]
    np.testing.assert_allclose(s @ s.T, [[0.25, -0.25], [-0.25, 0.25]], atol=1e-15)


@pytest.mark.parametrize("c", [2, 5, 10])
def test_cross_entropy_factor_random_logits(c):
    rng = np.random.default_rng(c)
    net = FeedForwardNet([Layer(rng.standard_normal((c, 3)) * 2, rng.standard_normal(c))])
    trace = forward(net, Batch(rng.standard_normal((4, 3)), rng.integers(0, c, 4)), "cross_entropy")
    cols = loss_hessian_factor_exact(trace).columns
    for n in range(4):
        ref = oracles.loss_hessian(trace.outputs[n], "cross_entropy")
        assert np.max(np.abs(cols[n] @ cols[n].T - ref)) <= 1e-12
    assert np.max(np.abs(loss_hessian(trace) - np.einsum("nck,ndk->ncd", cols, cols))) <= 1e-12


def test_mc_one_hot_probabilities_give_zero():
    net = FeedForwardNet([Layer(np.zeros((3, 1)), [800.0, 0.0, 0.0])])
    trace = forward(net, Batch([[1.0]], [0]), "cross_entropy")
    np.testing.assert_array_equal(loss_hessian_factor_mc(trace, m=50, rng=0).columns, 0.0)


def _z_scores(samples, target):
    mean = samples.mean(axis=0)
    se = samples.std(axis=0, ddof=1) / np.sqrt(samples.shape[0])
    mask = se > 0
    assert np.allclose(mean[~mask], target[~mask])
    return np.abs(mean[mask] - target[mask]) / se[mask]


def test_mc_cross_entropy_unbiased():
    net = FeedForwardNet([Layer(np.zeros((3, 1)), [0.5, -0.3, 0.1])])
    trace = forward(net, Batch([[1.0]], [0]), "cross_entropy")
    cols = loss_hessian_factor_mc(trace, m=100_000, rng=7).columns[0]  # (C, M)
    outer = np.einsum("cm,dm->mcd", cols, cols)
    assert np.max(_z_scores(outer, loss_hessian(trace)[0])) <= 3.0


def test_mc_square_unbiased():
    net = FeedForwardNet([Layer([[1.0]], None)])
    trace = forward(net, Batch([[1.0]], [[0.0]]), "square")
    s = loss_hessian_factor_mc(trace, m=100_000, rng=11).columns[0, 0]
    assert np.max(_z_scores((s**2)[:, None, None], np.array([[2.0]]))) <= 3.0


def test_mc_deterministic():
    net, batch = random_problem(5)
    trace = forward(net, batch, "cross_entropy")
    a = loss_hessian_factor_mc(trace, m=4, rng=3).columns
    b = loss_hessian_factor_mc(trace, m=4, rng=3).columns
    assert np.array_equal(a, b)


def test_jtv_layer_examples():
    net = FeedForwardNet([Layer([[1.5]], [0.0])])
    trace = forward(net, Batch([[2.0], [0.0]], [[0.0], [0.0]]), "square")
    out = jtv_layer(net, trace, 0, np.array([[3.0], [3.0]]))
    np.testing.assert_array_equal(out, [[6.0, 3.0], [0.0, 3.0]])
    with pytest.raises(BadLayerIndexError):
        jtv_layer(net, trace, 1, np.array([[3.0], [3.0]]))


def test_jtv_layer_matches_finite_differences():
    net, batch = random_problem(6)
    trace = forward(net, batch, "cross_entropy")
    layer = net.layers[0]
    u = np.random.default_rng(0).standard_normal((batch.size, layer.out_dim))
    out = jtv_layer(net, trace, 0, u)
    theta0 = np.concatenate([layer.weight.ravel(order="F"), layer.bias])
    for n in range(batch.size):
        def pre(theta):
            w = theta[:layer.weight.size].reshape(layer.weight.shape, order="F")
            return w @ batch.inputs[n] + theta[layer.weight.size:]
        fd = np.zeros_like(theta0)
        for j in range(theta0.size):
            e = np.zeros_like(theta0)
            e[j] = 1e-5
            fd[j] = u[n] @ (pre(theta0 + e) - pre(theta0 - e)) / 2e-5
        assert np.max(np.abs(out[n] - fd)) <= 1e-6


def test_backprop_identity_net_is_identity():
    net = FeedForwardNet([Layer(np.eye(3), np.zeros(3)), Layer(np.eye(3), None)])
    trace = forward(net, Batch(np.ones((2, 3)), [0, 2]), "cross_entropy")
    v = np.random.default_rng(0).standard_normal((2, 3))
    np.testing.assert_array_equal(backprop_to_layer(net, trace, 0, v), v)


def test_backprop_single_linear_layer():
    w = np.random.default_rng(1).standard_normal((3, 4))
    net = FeedForwardNet([Layer(w, None)])
    trace = forward(net, Batch(np.ones((2, 4)), [0, 2]), "cross_entropy")
    v = np.random.default_rng(2).standard_normal((2, 3))
    np.testing.assert_allclose(backprop_to_input(net, trace, v), v @ w, atol=1e-15)


def test_backprop_matches_finite_differences():
    net, batch = random_problem(7, sizes=(3, 5, 4, 2), activations=("tanh", "sigmoid", "identity"))
    trace = forward(net, batch, "cross_entropy")
    v = np.random.default_rng(3).standard_normal((batch.size, 2))
    got = backprop_to_layer(net, trace, 1, v)
    for n in range(batch.size):
        a1 = trace.preactivations[1][n]
        def f_of(a):
            z = 1 / (1 + np.exp(-a))  # sigmoid of layer 1
            last = net.layers[2]
            return v[n] @ (last.weight @ z + last.bias)
        fd = np.array([(f_of(a1 + e) - f_of(a1 - e)) / 2e-5 for e in 1e-5 * np.eye(a1.size)])
        assert np.max(np.abs(got[n] - fd)) <= 1e-6


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), loss=st.sampled_from(["cross_entropy", "square"]))
def test_jvp_is_transpose_of_backprop(seed, loss):
    net, batch = random_problem(seed, loss=loss)
    trace = forward(net, batch, loss)
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(net.num_params)
    u = rng.standard_normal((batch.size, net.output_dim))
    lhs = np.sum(u * jvp(net, trace, v), axis=1)
    jtu = np.concatenate([jtv_layer(net, trace, i, backprop_to_layer(net, trace, i, u))
                          for i in range(net.num_layers)], axis=1)
    np.testing.assert_allclose(lhs, jtu @ v, rtol=1e-10, atol=1e-12)


def test_relu_derivative_zero_at_zero():
    net = FeedForwardNet([Layer([[1.0]], [0.0], "relu"), Layer([[1.0]], None)])
    trace = forward(net, Batch([[0.0]], [[1.0]]), "square")
    g = per_sample_gradients(net, trace)
    np.testing.assert_array_equal(g, [[0.0, 0.0, 0.0]])
