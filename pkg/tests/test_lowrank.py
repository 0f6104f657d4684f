from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from conftest import random_problem
from lowrank_ggn.errors import ClippedEigenvalueError, ConfigError, DimensionMismatchError, EmptySubsetError
from lowrank_ggn.lowrank import (
    CurvatureConfig,
    LowRankGGN,
    build_factor,
    directional_derivatives,
    eigenvectors_to_parameter_space,
    gram_block_linear_optimized,
    gram_matrix,
    layer_gram,
    spectrum,
    track_blocks,
    weighted_eigvec_sum,
)
from lowrank_ggn.net import Batch, FeedForwardNet, Layer, forward, per_sample_gradients


def _two_identical(scalar_problem):
    net, _, loss = scalar_problem
    return net, Batch([[1.0], [1.0]], [[0.0], [0.0]]), loss


def test_config_validation():
    with pytest.raises(ConfigError):
        CurvatureConfig(sample_mode="all")
    with pytest.raises(ConfigError):
        CurvatureConfig(mc_samples=0)
    with pytest.raises(ConfigError):
        CurvatureConfig(clip_threshold=-1.0)
    assert CurvatureConfig(sample_mode="sub").resolve_sub_size(17) == 2
    with pytest.raises(EmptySubsetError):
        CurvatureConfig(sample_mode="sub").resolve_sub_size(7)
    with pytest.raises(ConfigError):
        CurvatureConfig(sample_mode="sub", sub_size=9).resolve_sub_size(8)


def test_scalar_factor(scalar_problem):
    f = build_factor(*scalar_problem)
    np.testing.assert_allclose(f.dense(), [[np.sqrt(2)]])
    g = gram_matrix(f)
    np.testing.assert_allclose(g, [[2.0]])
    spec = spectrum(g)
    assert spec.num_retained == 1
    np.testing.assert_allclose(spec.retained_eigenvalues, [2.0])
    np.testing.assert_allclose(eigenvectors_to_parameter_space(f, spec), [[1.0]])


def test_two_identical_samples(scalar_problem):
    net, batch, loss = _two_identical(scalar_problem)
    f = build_factor(net, batch, loss)
    np.testing.assert_allclose(f.dense(), [[1.0, 1.0]])
    np.testing.assert_allclose(gram_matrix(f), [[1.0, 1.0], [1.0, 1.0]])
    spec = spectrum(gram_matrix(f))
    grads = per_sample_gradients(net, forward(net, batch, loss))
    d = directional_derivatives(f, spec, grads)
    np.testing.assert_allclose(d.lambdas, [[2.0], [2.0]])
    np.testing.assert_allclose(d.lambda_means, spec.retained_eigenvalues)


def test_scalar_directional_derivatives(scalar_problem):
    net, batch, loss = scalar_problem
    model = LowRankGGN(net, batch, loss)
    d = model.directional_derivatives()
    np.testing.assert_allclose(d.gammas, [[6.0]])
    np.testing.assert_allclose(d.lambdas, [[2.0]])


@pytest.mark.parametrize("loss", ["cross_entropy", "square"])
@pytest.mark.parametrize("bias", [True, False])
def test_factor_reproduces_dense_ggn(loss, bias):
    net, batch = random_problem(10, loss=loss, bias=bias)
    v = build_factor(net, batch, loss).dense()
    dense = oracles.dense_ggn(net, batch, loss)
    assert np.linalg.norm(v @ v.T - dense) <= 1e-10
    assert v.shape == (net.num_params, batch.size * net.output_dim)


def test_gram_accumulation_matches_stacked():
    net, batch = random_problem(11, sizes=(3, 5, 4, 3), activations=("relu", "tanh", "identity"))
    f = build_factor(net, batch, "cross_entropy")
    v = f.dense()
    for method in ("optimized", "naive"):
        assert np.max(np.abs(gram_matrix(f, method) - v.T @ v)) <= 1e-12


def test_rank_bound():
    net, batch = random_problem(12, sizes=(2, 2, 3), n=2)
    assert net.num_params == 15
    model = LowRankGGN(net, batch, "cross_entropy")
    assert model.num_retained <= 6


@pytest.mark.parametrize("loss", ["cross_entropy", "square"])
def test_spectrum_and_transport_against_dense(loss):
    net, batch = random_problem(13, loss=loss, n=4)
    f = build_factor(net, batch, loss)
    spec = spectrum(gram_matrix(f))
    dense = oracles.dense_ggn(net, batch, loss)
    ref = np.linalg.eigvalsh(dense)[::-1]
    ref = ref[ref > 1e-4]
    np.testing.assert_allclose(spec.retained_eigenvalues, ref, rtol=1e-8)
    e = eigenvectors_to_parameter_space(f, spec)
    assert np.max(np.abs(dense @ e - e * spec.retained_eigenvalues)) <= 1e-8
    assert np.max(np.abs(e.T @ e - np.eye(e.shape[1]))) <= 1e-8
    w, u = np.linalg.eigh(dense)
    for k in range(e.shape[1]):
        ref_vec = u[:, np.argmin(np.abs(w - spec.eigenvalues[k]))]
        assert min(np.max(np.abs(e[:, k] - ref_vec)), np.max(np.abs(e[:, k] + ref_vec))) <= 1e-6


def test_clipped_index_raises():
    net, batch = random_problem(14, n=1)
    f = build_factor(net, batch, "cross_entropy")
    spec = spectrum(gram_matrix(f))
    with pytest.raises(ClippedEigenvalueError):
        eigenvectors_to_parameter_space(f, spec, [spec.num_retained])
    empty = spectrum(gram_matrix(f), clip_threshold=1e6)
    assert empty.num_retained == 0
    with pytest.raises(ClippedEigenvalueError):
        directional_derivatives(f, empty, np.zeros((1, net.num_params)))


def test_weighted_eigvec_sum():
    net, batch = random_problem(15, loss="square")
    f = build_factor(net, batch, "square")
    spec = spectrum(gram_matrix(f))
    k = spec.num_retained
    assert np.array_equal(weighted_eigvec_sum(f, spec, np.zeros(k)), np.zeros(net.num_params))
    e = eigenvectors_to_parameter_space(f, spec)
    lam = spec.retained_eigenvalues
    onehot = np.zeros(k)
    onehot[2] = np.sqrt(lam[2])
    np.testing.assert_allclose(weighted_eigvec_sum(f, spec, onehot), e[:, 2], atol=1e-12)
    c = np.random.default_rng(0).standard_normal(k)
    naive = sum(c[j] / np.sqrt(lam[j]) * e[:, j] for j in range(k))
    assert np.max(np.abs(weighted_eigvec_sum(f, spec, c) - naive)) <= 1e-10
    with pytest.raises(ClippedEigenvalueError):
        weighted_eigvec_sum(f, spec, np.ones(k + 1))


@pytest.mark.parametrize("loss", ["cross_entropy", "square"])
def test_directional_derivatives_against_dense(loss):
    net, batch = random_problem(16, loss=loss)
    f = build_factor(net, batch, loss)
    spec = spectrum(gram_matrix(f))
    grads = per_sample_gradients(net, forward(net, batch, loss))
    d = directional_derivatives(f, spec, grads)
    e = eigenvectors_to_parameter_space(f, spec)
    ggns = oracles.per_sample_ggns(net, batch, loss)
    g_ref = oracles.dense_gradients(net, batch, loss) @ e
    l_ref = np.einsum("dk,nde,ek->nk", e, ggns, e)
    assert np.max(np.abs(d.gammas - g_ref)) <= 1e-8
    assert np.max(np.abs(d.lambdas - l_ref)) <= 1e-8
    assert np.max(np.abs(d.gamma_means - grads.mean(axis=0) @ e)) <= 1e-10
    np.testing.assert_allclose(d.lambda_means, spec.retained_eigenvalues, rtol=1e-8)
    assert d.lambdas.min() >= -1e-10
    with pytest.raises(DimensionMismatchError):
        directional_derivatives(f, spec, grads[:, :-1])


def test_mc_lambda_aggregation_with_several_draws():
    net, batch = random_problem(17)
    model = LowRankGGN(net, batch, "cross_entropy", CurvatureConfig(factor_mode="mc", mc_samples=3))
    d = model.directional_derivatives()
    np.testing.assert_allclose(d.lambda_means, model.eigenvalues, rtol=1e-8)


def test_sub_with_full_size_equals_mb():
    net, batch = random_problem(18, n=8)
    mb = LowRankGGN(net, batch, "cross_entropy")
    sub = LowRankGGN(net, batch, "cross_entropy", CurvatureConfig(sample_mode="sub", sub_size=8))
    assert np.array_equal(mb.eigenvalues, sub.eigenvalues)
    assert np.array_equal(mb.eigenvectors(), sub.eigenvectors())


def test_sub_mode_uses_subset_for_curvature_only():
    net, batch = random_problem(19, n=16)
    cfg = CurvatureConfig(sample_mode="sub", seed=4)
    model = LowRankGGN(net, batch, "cross_entropy", cfg)
    idx = model.factor.sample_indices
    assert idx.size == 2 and np.all(np.diff(idx) > 0)
    d = model.directional_derivatives()
    assert d.gammas.shape[0] == 16 and d.lambdas.shape[0] == 2
    dense = oracles.dense_ggn(net, batch.subset(idx), "cross_entropy")
    v = model.factor.dense()
    assert np.linalg.norm(v @ v.T - dense) <= 1e-10
    again = LowRankGGN(net, batch, "cross_entropy", cfg)
    assert np.array_equal(again.factor.sample_indices, idx)


@pytest.mark.parametrize("loss", ["cross_entropy", "square"])
def test_mc_average_approaches_exact(loss):
    net, batch = random_problem(20, loss=loss, n=4)
    exact = oracles.dense_ggn(net, batch, loss)
    running = np.zeros_like(exact)
    errors = {}
    for r in range(1, 201):
        v = build_factor(net, batch, loss, CurvatureConfig(factor_mode="mc", seed=r)).dense()
        running += v @ v.T
        if r in (2, 8, 32, 200):
            errors[r] = np.linalg.norm(running / r - exact)
    counts = np.array(sorted(errors))
    errs = np.array([errors[c] for c in counts])
    slope = np.polyfit(np.log(counts), np.log(errs), 1)[0]
    assert slope < -0.25
    assert errs[-1] < errs[0]


def test_optimized_linear_gram_examples():
    # orthogonal inputs: no cross-sample terms
    z = np.array([[1.0, 0.0], [0.0, 2.0]])
    s = np.random.default_rng(0).standard_normal((2, 3, 4))
    g = gram_block_linear_optimized(z, s)
    assert np.all(g[:3, 3:] == 0) and np.all(g[3:, :3] == 0)
    # single sample with unit input: block equals S^T S
    s1 = np.random.default_rng(1).standard_normal((1, 2, 2))
    np.testing.assert_allclose(gram_block_linear_optimized([[1.0, 0.0]], s1), s1[0] @ s1[0].T,
                               atol=1e-15)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000), bias=st.booleans())
def test_optimized_vs_naive_gram(seed, bias):
    net, batch = random_problem(seed, sizes=(5, 4, 3), bias=bias, n=3)
    f = build_factor(net, batch, "cross_entropy")
    for i in range(net.num_layers):
        with track_blocks() as t:
            opt = layer_gram(f, i, "optimized")
        assert t.materialized == 0
        assert np.linalg.norm(opt - layer_gram(f, i, "naive")) <= 1e-10


def test_naive_gram_holds_one_block_at_a_time():
    net, batch = random_problem(21, sizes=(3, 4, 4, 2), activations=("tanh", "relu", "identity"))
    f = build_factor(net, batch, "cross_entropy")
    with track_blocks() as t:
        gram_matrix(f, "naive")
    assert t.peak == 1 and t.materialized == 3 and t.live == 0


def test_layerwise_blocks_are_diagonal_blocks():
    net, batch = random_problem(22, loss="square")
    model = LowRankGGN(net, batch, "square", CurvatureConfig(block_mode="layerwise"))
    dense = oracles.layer_block_ggn(net, batch, "square")
    ref = np.linalg.eigvalsh(dense)[::-1]
    ref = ref[ref > 1e-4]
    np.testing.assert_allclose(model.eigenvalues, ref, rtol=1e-8)
    e = model.eigenvectors()
    assert np.max(np.abs(dense @ e - e * model.eigenvalues)) <= 1e-8
    f = model.factor
    full = gram_matrix(f)
    np.testing.assert_allclose(full, sum(layer_gram(f, i) for i in range(f.num_layers)), atol=1e-14)
    v = f.dense()
    for i, sl in enumerate(f.layer_slices()):
        np.testing.assert_allclose(layer_gram(f, i), v[sl].T @ v[sl], atol=1e-12)
    d = model.directional_derivatives()
    np.testing.assert_allclose(d.lambda_means, model.eigenvalues, rtol=1e-8)


def test_structured_products_match_dense():
    net, batch = random_problem(23)
    f = build_factor(net, batch, "cross_entropy")
    v = f.dense()
    rng = np.random.default_rng(0)
    x = rng.standard_normal(f.num_cols)
    u = rng.standard_normal(f.num_params)
    np.testing.assert_allclose(f.apply(x), v @ x, atol=1e-13)
    np.testing.assert_allclose(f.apply_transpose(u), v.T @ u, atol=1e-13)


def test_factor_deterministic_under_seed():
    net, batch = random_problem(24)
    cfg = CurvatureConfig(factor_mode="mc", mc_samples=2, seed=5)
    a = build_factor(net, batch, "cross_entropy", cfg).dense()
    b = build_factor(net, batch, "cross_entropy", cfg).dense()
    c = build_factor(net, batch, "cross_entropy", replace(cfg, seed=6)).dense()
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_single_layer_net():
    net = FeedForwardNet([Layer(np.random.default_rng(0).standard_normal((3, 4)), np.zeros(3))])
    batch = Batch(np.random.default_rng(1).standard_normal((5, 4)), [0, 1, 2, 1, 0])
    model = LowRankGGN(net, batch, "cross_entropy")
    ref = np.linalg.eigvalsh(oracles.dense_ggn(net, batch, "cross_entropy"))[::-1]
    np.testing.assert_allclose(model.eigenvalues, ref[ref > 1e-4], rtol=1e-8)
