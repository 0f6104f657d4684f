import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lowrank_ggn.errors import ColumnCountMismatchError, NotOrthonormalError, TooFewSamplesError
from lowrank_ggn.metrics import overlap_leading, overlap_topc, snr


def _basis(rng, d, c):
    return np.linalg.qr(rng.standard_normal((d, c)))[0]


def test_overlap_examples():
    eye = np.eye(4)
    assert abs(overlap_topc(eye[:, :2], eye[:, :2]) - 1.0) <= 1e-12
    assert abs(overlap_topc(eye[:, :2], eye[:, 2:])) <= 1e-12
    assert abs(overlap_topc(eye[:, [0, 1]], eye[:, [0, 2]]) - 0.5) <= 1e-12


def test_overlap_errors():
    eye = np.eye(4)
    with pytest.raises(ColumnCountMismatchError):
        overlap_topc(eye[:, :2], eye[:, :3])
    with pytest.raises(NotOrthonormalError):
        overlap_topc(2 * eye[:, :2], eye[:, :2])


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31), d=st.integers(3, 30), c=st.integers(1, 3))
def test_overlap_properties(seed, d, c):
    rng = np.random.default_rng(seed)
    u, v = _basis(rng, d, c), _basis(rng, d, c)
    o = overlap_topc(u, v)
    assert -1e-12 <= o <= 1 + 1e-10
    assert abs(o - overlap_topc(v, u)) <= 1e-12
    mix = _basis(rng, c, c)
    assert abs(o - overlap_topc(u @ mix, v)) <= 1e-10
    assert abs(o - overlap_topc(u, v @ mix)) <= 1e-10


def test_overlap_leading_truncates():
    eye = np.eye(5)
    value, eff = overlap_leading(eye[:, :3], eye[:, :2], 4)
    assert eff == 2 and value == 1.0
    value, eff = overlap_leading(eye[:, :0], eye[:, :2], 2)
    assert eff == 0 and np.isnan(value)


def test_snr_examples():
    assert snr([1.0, 3.0]) == 2.0
    assert snr([0.5, 0.5, 0.5]) == float("inf")
    assert np.isnan(snr([0.0, 0.0]))
    with pytest.raises(TooFewSamplesError):
        snr([1.0])


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31), alpha=st.floats(-1e3, 1e3).filter(lambda a: abs(a) > 1e-3))
def test_snr_scale_invariant(seed, alpha):
    x = np.random.default_rng(seed).standard_normal(10) + 0.5
    assert snr(alpha * x) == pytest.approx(snr(x), rel=1e-10)


def test_snr_not_translation_invariant():
    x = np.array([1.0, 2.0, 4.0])
    assert snr(x + 10.0) != pytest.approx(snr(x))
