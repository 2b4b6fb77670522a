import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import check_gradient
from evdnet.haze import (
    HazeParams,
    apply_K,
    apply_K_backward,
    compute_K,
    invert_haze,
    synthesize_haze,
    transmission_from_depth,
)
from evdnet.tensor import ContractError


def test_transmission_closed_forms():
    assert transmission_from_depth(np.array([math.log(2)]), 1.0)[0] == pytest.approx(0.5, abs=1e-15)
    assert transmission_from_depth(np.zeros(3), 2.0).tolist() == [1.0, 1.0, 1.0]
    np.testing.assert_array_equal(transmission_from_depth(np.linspace(0, 5, 7), 0.0), 1.0)
    with pytest.raises(ContractError):
        transmission_from_depth(np.ones(2), -0.1)


def test_synthesize_limits(rng):
    J = rng.uniform(size=(1, 3, 5, 5))
    np.testing.assert_array_equal(synthesize_haze(J, np.ones((1, 1, 5, 5)), 0.8), J)
    opaque = synthesize_haze(J, np.full((1, 1, 5, 5), 1e-12), 0.8)
    np.testing.assert_allclose(opaque, 0.8, atol=1e-9)


def test_synthesize_matches_elementwise_oracle(rng):
    J = rng.uniform(size=(2, 3, 4, 4))
    t = rng.uniform(0.05, 1, size=(2, 1, 4, 4))
    A = (0.7, 0.8, 0.9)
    I = synthesize_haze(J, t, A)
    for idx in np.ndindex(J.shape):
        n, c, y, x = idx
        want = J[idx] * t[n, 0, y, x] + A[c] * (1 - t[n, 0, y, x])
        assert abs(I[idx] - want) < 1e-12


def test_synthesize_contracts():
    with pytest.raises(ContractError):
        synthesize_haze(np.full((1, 3, 2, 2), 1.5), np.ones((1, 1, 2, 2)), 0.8)
    with pytest.raises(ContractError):
        synthesize_haze(np.zeros((1, 3, 2, 2)), np.zeros((1, 1, 2, 2)), 0.8)
    with pytest.raises(ContractError):
        HazeParams(A=1.2)
    with pytest.raises(ContractError):
        HazeParams(beta=-1)


def test_invert_fixed_points(rng):
    I = rng.uniform(size=(1, 3, 4, 4))
    t = rng.uniform(0.1, 1, size=(1, 1, 4, 4))
    np.testing.assert_array_equal(invert_haze(np.full_like(I, 0.7), t, 0.7), 0.7)
    np.testing.assert_array_equal(invert_haze(I, np.ones_like(t), 0.8), I)
    clamped = invert_haze(I, np.full_like(t, 0.01), 0.8, clamp=True)
    assert clamped.min() >= 0 and clamped.max() <= 1
    with pytest.raises(ContractError):
        invert_haze(I, t, 0.8, t_floor=0)


def test_compute_K_hand_value():
    A = 0.75
    I = np.full((1, 3, 2, 2), A)
    K = compute_K(I, np.ones((1, 1, 2, 2)), A)
    np.testing.assert_allclose(K, A / (A - 1), rtol=1e-15)
    np.testing.assert_allclose(apply_K(I, K), A, rtol=1e-14)


def test_compute_K_identity_dehaze(rng):
    I = rng.uniform(size=(1, 3, 8, 8))
    K = compute_K(I, np.ones((1, 1, 8, 8)), 0.8)
    ok = np.abs(I - 1) >= 0.01
    np.testing.assert_allclose(apply_K(I, K)[ok], I[ok], atol=1e-12)


def test_compute_K_guard_sign_at_one():
    I = np.ones((1, 3, 1, 1))
    K = compute_K(I, np.full((1, 1, 1, 1), 0.5), 0.8, denom_eps=1e-4)
    # (I - A)/t + A = 1.2 -> divided by -1e-4
    np.testing.assert_allclose(K, -1.2e4, rtol=1e-12)


def test_compute_K_with_bias(rng):
    J = rng.uniform(size=(1, 3, 6, 6))
    t = rng.uniform(0.2, 1, size=(1, 1, 6, 6))
    I = synthesize_haze(J, t, 0.9)
    K = compute_K(I, t, 0.9, bias=1.0)
    ok = np.abs(I - 1) >= 0.01
    np.testing.assert_allclose(apply_K(I, K, 1.0)[ok], J[ok], atol=1e-9)


def test_apply_K_trivial_cases(rng):
    I = rng.uniform(size=(1, 3, 3, 3))
    np.testing.assert_array_equal(apply_K(I, np.zeros_like(I), 0.5), 0.5)
    np.testing.assert_array_equal(apply_K(I, np.ones_like(I)), I - 1)
    with pytest.raises(ContractError):
        apply_K(I, np.zeros((1, 3, 3, 2)))


def test_apply_K_gradient(rng):
    I = rng.uniform(size=(1, 3, 4, 4))
    K = rng.normal(size=(1, 3, 4, 4))
    r = rng.normal(size=(1, 3, 4, 4))
    gI, gK = apply_K_backward(I, K, r)
    f = lambda: float(np.sum(r * apply_K(I, K, 1.0)))
    for arr, an in ((I, gI), (K, gK)):
        err, _ = check_gradient(f, arr, an, rng)
        assert err < 1e-6


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31), A=st.floats(0.6, 1.0), lo=st.floats(0.05, 1.0))
def test_round_trip_property(seed, A, lo):
    rng = np.random.default_rng(seed)
    J = rng.uniform(size=(1, 3, 5, 5))
    t = rng.uniform(lo, 1.0, size=(1, 1, 5, 5))
    I = synthesize_haze(J, t, A)
    assert np.max(np.abs(invert_haze(I, t, A) - J)) < 1e-9


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31), A=st.floats(0.6, 1.0))
def test_K_equivalence_property(seed, A):
    rng = np.random.default_rng(seed)
    J = rng.uniform(size=(1, 3, 5, 5))
    t = rng.uniform(0.05, 1.0, size=(1, 1, 5, 5))
    I = synthesize_haze(J, t, A)
    ok = np.abs(I - 1) >= 0.01
    diff = np.abs(apply_K(I, compute_K(I, t, A)) - invert_haze(I, t, A))
    assert np.all(diff[ok] < 1e-6)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31), A=st.floats(0.01, 1.0))
def test_haze_is_convex_combination(seed, A):
    rng = np.random.default_rng(seed)
    J = rng.uniform(size=(1, 3, 4, 4))
    t = rng.uniform(1e-6, 1.0, size=(1, 1, 4, 4))
    I = synthesize_haze(J, t, A)
    assert np.all(I >= np.minimum(J, A) - 1e-15)
    assert np.all(I <= np.maximum(J, A) + 1e-15)


@settings(max_examples=50, deadline=None)
@given(b1=st.floats(0, 5), b2=st.floats(0, 5), seed=st.integers(0, 2**31))
def test_transmission_monotone_in_beta(b1, b2, seed):
    d = np.random.default_rng(seed).uniform(0, 10, size=20)
    lo, hi = sorted((b1, b2))
    assert np.all(transmission_from_depth(d, hi) <= transmission_from_depth(d, lo))
