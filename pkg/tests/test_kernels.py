import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from certdispatch import _pykernels as py

try:
    from certdispatch import _ckernels as cy
except ImportError:  # pragma: no cover
    cy = None

BACKENDS = [py] + ([cy] if cy is not None else [])
ids = [b.__name__.rsplit(".", 1)[-1] for b in BACKENDS]
needs_c = pytest.mark.skipif(cy is None, reason="compiled extension not built")

finite = st.floats(-1e3, 1e3, allow_nan=False)


@pytest.mark.parametrize("k", BACKENDS, ids=ids)
def test_proportional_response_examples(k):
    lo, hi = np.zeros(2), np.full(2, 10.0)
    p, eta, code = k.proportional_response(np.array([[2.0, 4.0]]), np.array([9.0]), lo, hi)
    np.testing.assert_allclose(p[0], [26 / 7, 37 / 7], rtol=1e-14)
    assert eta[0] == pytest.approx(3 / 14) and code[0] == 1
    assert p.sum() == pytest.approx(9.0)
    # already balanced: unchanged
    p, eta, _ = k.proportional_response(np.array([[2.0, 4.0]]), np.array([6.0]), lo, hi)
    np.testing.assert_array_equal(p[0], [2.0, 4.0])
    assert eta[0] == 0
    # full stretch from the lower bound
    p, eta, _ = k.proportional_response(np.array([[0.0, 0.0]]), np.array([20.0]), lo, hi)
    np.testing.assert_array_equal(p[0], hi)
    assert eta[0] == 1
    # zero demand with zero lower bounds
    p, _, _ = k.proportional_response(np.array([[3.0, 1.0]]), np.array([0.0]), lo, hi)
    np.testing.assert_allclose(p[0], 0.0, atol=1e-15)


@pytest.mark.parametrize("k", BACKENDS, ids=ids)
def test_proportional_response_snap(k):
    lo, hi = np.zeros(2), np.full(2, 10.0)
    # deficit but the prediction already sits at the upper bounds: snap, code +2
    p, eta, code = k.proportional_response(np.array([[10.0, 10.0]]), np.array([20.0 + 1e-13]), lo, hi)
    assert code[0] == 2 and eta[0] == 1
    np.testing.assert_array_equal(p[0], hi)
    p, eta, code = k.proportional_response(np.array([[0.0, 0.0]]), np.array([0.0]), lo, hi)
    assert code[0] == -2


@pytest.mark.parametrize("k", BACKENDS, ids=ids)
def test_proportional_response_vjp_fd(k):
    rng = np.random.default_rng(0)
    lo, hi = rng.uniform(0, 5, 6), rng.uniform(20, 40, 6)
    p = rng.uniform(lo, hi, (2, 6))
    s = p.sum(axis=1)
    total = np.array([s[0] + 20.0, s[1] - 20.0])     # one row per branch
    _, eta, code = k.proportional_response(p, total, lo, hi)
    assert sorted(code.tolist()) == [-1, 1]
    g = rng.standard_normal((2, 6))
    an = k.proportional_response_vjp(g, p, total, lo, hi, eta, code)
    h = 1e-6
    num = np.zeros_like(p)
    for r in range(2):
        for j in range(6):
            e = np.zeros_like(p)
            e[r, j] = h
            up = np.sum(g * k.proportional_response(p + e, total, lo, hi)[0])
            dn = np.sum(g * k.proportional_response(p - e, total, lo, hi)[0])
            num[r, j] = (up - dn) / (2 * h)
    np.testing.assert_allclose(an, num, rtol=1e-6, atol=1e-7)


@pytest.mark.parametrize("k", BACKENDS, ids=ids)
def test_smooth_split_values(k):
    lo, up, _ = k.smooth_split(np.array([[3.0, 0.0]]), np.array([0.5, 0.5]))
    assert lo[0, 0] == pytest.approx(2 + np.sqrt(2.5), abs=1e-12)
    assert lo[0, 0] == pytest.approx(3.5811, abs=1e-4)
    assert up[0, 0] == pytest.approx(0.5811, abs=1e-4)
    assert lo[0, 1] == up[0, 1] == 1.0


@pytest.mark.parametrize("k", BACKENDS, ids=ids)
def test_double_softplus_identities(k):
    x = np.array([[5.0, -1e6, 1e4, 7.0]])
    lo = np.array([0.0, 0.0, 0.0, 3.0])
    hi = np.array([10.0, 1.0, 1.0, 3.0])
    y, dy = k.double_softplus(x, lo, hi)
    assert y[0, 0] == 5.0
    assert abs(y[0, 1]) < 1e-12
    assert y[0, 2] == pytest.approx(1.0, abs=1e-12)
    assert y[0, 3] == 3.0
    assert np.all(np.isfinite(dy))


@needs_c
@settings(max_examples=60, deadline=None)
@given(hnp.arrays(float, (3, 5), elements=finite), hnp.arrays(float, 5, elements=st.floats(-50, 50)),
       hnp.arrays(float, 5, elements=st.floats(0, 100)))
def test_backends_agree_double_softplus(x, lower, width):
    upper = lower + width
    upper[0] = np.inf
    lower[1] = -np.inf
    for a, b in zip(py.double_softplus(x, lower, upper), cy.double_softplus(x, lower, upper)):
        np.testing.assert_allclose(a, b, rtol=1e-13, atol=1e-12)


@needs_c
@settings(max_examples=60, deadline=None)
@given(hnp.arrays(float, (4, 5), elements=st.floats(0, 1)), st.floats(0, 1))
def test_backends_agree_proportional(frac, share):
    lo = np.array([0.0, 1.0, 2.0, 0.0, 5.0])
    hi = np.array([10.0, 4.0, 9.0, 3.0, 20.0])
    p = lo + frac * (hi - lo)
    total = np.full(4, lo.sum() + share * (hi.sum() - lo.sum()))
    out_py = py.proportional_response(p, total, lo, hi)
    out_cy = cy.proportional_response(p, total, lo, hi)
    for a, b in zip(out_py, out_cy):
        np.testing.assert_allclose(a, b, rtol=1e-13, atol=1e-12)
    g = np.ones_like(p)
    np.testing.assert_allclose(
        py.proportional_response_vjp(g, p, total, lo, hi, out_py[1], out_py[2]),
        cy.proportional_response_vjp(g, p, total, lo, hi, out_cy[1], out_cy[2]),
        rtol=1e-12, atol=1e-12,
    )


@needs_c
@settings(max_examples=60, deadline=None)
@given(hnp.arrays(float, (3, 4), elements=finite), st.floats(1e-4, 10))
def test_backends_agree_splits(a, s):
    sv = np.full(4, s)
    for x, y in zip(py.smooth_split(a, sv), cy.smooth_split(a, sv)):
        np.testing.assert_allclose(x, y, rtol=1e-13, atol=1e-13)
    for x, y in zip(py.hard_split(a), cy.hard_split(a)):
        np.testing.assert_array_equal(x, y)
    lo, hi = np.full(4, -5.0), np.full(4, 5.0)
    for x, y in zip(py.overflow(a, lo, hi), cy.overflow(a, lo, hi)):
        np.testing.assert_array_equal(x, y)


@needs_c
@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("bland", [False, True])
def test_backends_agree_ratio_test(seed, bland):
    rng = np.random.default_rng(seed)
    m = 12
    x_b = rng.uniform(0, 5, m)
    delta = rng.standard_normal(m)
    delta[rng.random(m) < 0.2] = 0.0
    lb = np.where(rng.random(m) < 0.2, -np.inf, 0.0)
    ub = np.where(rng.random(m) < 0.3, np.inf, 6.0)
    x_b[:3] = 0.0      # degenerate ties
    basis = rng.permutation(40)[:m].astype(np.int64)
    flip = float(rng.choice([np.inf, 0.5, 3.0]))
    assert py.ratio_test(x_b, delta, lb, ub, 1e-9, flip, bland, basis) == \
        cy.ratio_test(x_b, delta, lb, ub, 1e-9, flip, bland, basis)


def test_pure_python_switch():
    code = "import certdispatch.kernels as k; print(k.BACKEND)"
    env = dict(os.environ, CERTDISPATCH_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True)
    assert out.stdout.strip() == "python"
    if cy is not None:
        env.pop("CERTDISPATCH_PURE_PYTHON")
        out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True)
        assert out.stdout.strip() == "compiled"
