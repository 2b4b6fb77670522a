"""Shared fixtures and the finite-difference gradient checker."""

import numpy as np
import pytest

STEP = 1e-6


def rel_err(fd, an, floor=1e-6):
    return abs(fd - an) / max(abs(fd), abs(an), floor)


def check_gradient(f, x, analytic, rng, n_samples=None, step=STEP, pattern=None):
    """Central differences of scalar ``f`` w.r.t. entries of ``x`` (in place).

    ``pattern()`` (optional) returns a boolean array describing the ReLU
    active set; entries whose +-step flips the pattern sit on a kink and
    are skipped. Returns ``(max_rel_err, n_checked)``.
    """
    flat = x.reshape(-1)
    gflat = analytic.reshape(-1)
    idx = np.arange(flat.size)
    if n_samples is not None and n_samples < flat.size:
        idx = rng.choice(flat.size, size=n_samples, replace=False)
    base = pattern() if pattern else None
    worst, checked = 0.0, 0
    for i in idx:
        old = flat[i]
        flat[i] = old + step
        fp = f()
        pp = pattern() if pattern else None
        flat[i] = old - step
        fm = f()
        pm = pattern() if pattern else None
        flat[i] = old
        if pattern and (not np.array_equal(pp, base) or not np.array_equal(pm, base)):
            continue
        worst = max(worst, rel_err((fp - fm) / (2 * step), gflat[i]))
        checked += 1
    return worst, checked


def relu_pattern(net, cache):
    return np.concatenate([(cache.feats[n.name] > 0).ravel() for n in net.nodes if n.relu])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed after the run
ACCEPTANCE = {}


@pytest.fixture
def record():
    def _record(n, title, ok, detail, seconds):
        ACCEPTANCE[n] = f"[{'PASS' if ok else 'FAIL'}] {n:>2}. {title}: {detail} ({seconds:.1f} s)"
        return ok
    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
