import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from evdnet.metrics import psnr, score, ssim
from evdnet.tensor import ContractError

# a fixed 16x16 RGB pair: smooth ramp plus deterministic texture, and a
# brightened, noised copy
_Y, _X = np.mgrid[0:16, 0:16] / 15.0
PAIR_A = np.stack([0.2 + 0.6 * _X, 0.5 + 0.3 * np.sin(5 * _Y), 0.3 + 0.4 * _X * _Y])
PAIR_B = np.clip(0.9 * PAIR_A + 0.08 + 0.05 * np.cos(7 * _X + 3 * _Y), 0, 1)


def psnr_oracle(a, b, peak=1.0):
    total, n = 0.0, 0
    for va, vb in zip(np.ravel(a), np.ravel(b)):
        total += (float(va) - float(vb)) ** 2
        n += 1
    return 10 * math.log10(peak * peak / (total / n))


def ssim_oracle(a, b, peak=1.0):
    """Direct formula: explicit 2-D Gaussian window at every valid position."""
    r = np.arange(11) - 5.0
    g1 = np.exp(-r * r / (2 * 1.5 ** 2))
    win = np.outer(g1, g1)
    win /= win.sum()
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    vals = []
    for c in range(a.shape[0]):
        for y in range(a.shape[1] - 10):
            for x in range(a.shape[2] - 10):
                pa = a[c, y:y + 11, x:x + 11]
                pb = b[c, y:y + 11, x:x + 11]
                ma, mb = np.sum(win * pa), np.sum(win * pb)
                va = np.sum(win * (pa - ma) ** 2)
                vb = np.sum(win * (pb - mb) ** 2)
                cov = np.sum(win * (pa - ma) * (pb - mb))
                vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def test_psnr_identical_is_inf(rng):
    a = rng.uniform(size=(1, 3, 8, 8))
    assert psnr(a, a) == math.inf


def test_psnr_constant_difference_closed_form(rng):
    a = rng.uniform(0, 0.9, size=(2, 3, 8, 8))
    assert abs(psnr(a, a + 0.1) - 20.0) < 1e-9


def test_psnr_matches_loop_oracle(rng):
    a, b = rng.uniform(size=(2, 3, 9, 7)), rng.uniform(size=(2, 3, 9, 7))
    assert abs(psnr(a, b) - psnr_oracle(a, b)) < 1e-9


def test_psnr_peak_and_shape_contract(rng):
    a = rng.uniform(size=(1, 3, 8, 8))
    assert psnr(255 * a, 255 * a + 25.5, peak=255.0) == pytest.approx(20.0, abs=1e-9)
    with pytest.raises(ContractError):
        psnr(a, a[:, :, :4])


def test_ssim_identity(rng):
    a = rng.uniform(size=(3, 16, 16))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)


def test_ssim_matches_direct_formula_oracle():
    want = ssim_oracle(PAIR_A, PAIR_B)
    assert abs(ssim(PAIR_A, PAIR_B) - want) < 1e-9
    assert 0.5 < want < 1.0


def test_ssim_inverted_texture_symmetric(rng):
    a = rng.uniform(size=(3, 20, 20))
    s = ssim(a, 1 - a)
    assert s < 1.0
    assert ssim(1 - a, a) == pytest.approx(s, abs=1e-12)


def test_ssim_window_contract():
    with pytest.raises(ContractError, match="window"):
        ssim(np.zeros((3, 10, 16)), np.zeros((3, 10, 16)))


def test_score_bundle():
    q = score(PAIR_A, PAIR_B)
    assert q.psnr == psnr(PAIR_A, PAIR_B) and q.ssim == ssim(PAIR_A, PAIR_B)


images = st.integers(0, 2**31).map(lambda s: np.random.default_rng(s).uniform(size=(2, 3, 13, 14)))


@settings(max_examples=30, deadline=None)
@given(a=images, b=images)
def test_ssim_symmetric_and_bounded(a, b):
    s = ssim(a, b)
    assert s <= 1.0 + 1e-12
    assert ssim(b, a) == pytest.approx(s, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(a=images, b=images)
def test_metrics_flip_invariant(a, b):
    fa, fb = a[..., ::-1], b[..., ::-1]
    assert psnr(fa, fb) == pytest.approx(psnr(a, b), rel=1e-12)
    assert ssim(fa, fb) == pytest.approx(ssim(a, b), abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(a=images, e1=st.floats(0.001, 0.3), e2=st.floats(0.001, 0.3))
def test_psnr_monotone_in_mse(a, e1, e2):
    lo, hi = sorted((e1, e2))
    assert psnr(a, a + hi) <= psnr(a, a + lo)
