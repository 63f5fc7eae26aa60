import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tcgme.diagrams import (
    CoefficientRequest, LoopDiagram, coefficient, coefficient_band,
    coefficient_lr, cyclic_identity_check, delta_limit, enumerate_diagrams,
)
from tcgme.window import WindowFunction

W1 = WindowFunction(tau=1.0)


def test_enumerate_trivial():
    ds = enumerate_diagrams(1, 0)
    assert len(ds) == 1 and ds[0].loops == ((1, 0),)


def test_enumerate_2_0():
    ds = enumerate_diagrams(2, 0)
    assert sorted(d.loops for d in ds) == [((1, 0), (1, 0)), ((2, 0),)]


def test_enumerate_2_2_has_sixteen():
    assert len(enumerate_diagrams(2, 2)) == 16


def test_enumerate_counts_match_independent_recursion():
    def count(l, r, first=True):
        # compositions into nonzero parts, first(=w1 loop) needs upper >= 1
        if l == 0 and r == 0:
            return 1 if not first else 0
        total = 0
        for u in range(l + 1):
            for d in range(r + 1):
                if (u, d) == (0, 0):
                    continue
                if first and u == 0:
                    continue
                if (l - u, r - d) == (0, 0):
                    total += 1
                else:
                    total += count(l - u, r - d, first=False)
        return total

    for l in range(1, 5):
        for r in range(0, 5 - l + 2):
            if l + r > 6:
                continue
            assert len(enumerate_diagrams(l, r)) == count(l, r)


def test_enumerate_guard():
    with pytest.raises(ValueError):
        enumerate_diagrams(8, 8)


def test_first_loop_constraint():
    with pytest.raises(ValueError):
        LoopDiagram(loops=((0, 1), (1, 0)))


def test_c10_is_filter():
    assert coefficient_lr(1, 0, (0.0,), W1) == 1.0
    w = 1.7
    assert np.isclose(coefficient_lr(1, 0, (w,), W1), W1.filter(w), rtol=1e-14)


def test_c20_closed_form():
    w1, w2 = 0.9, 1.4
    got = coefficient_lr(2, 0, (w1, w2), W1)
    f = W1.filter
    expect = -(f(w1 + w2) - f(w1) * f(w2)) / w2
    assert np.isclose(got, expect, rtol=1e-13)


def test_c11_closed_form():
    w1, w2 = 0.9, -0.6
    got = coefficient_lr(1, 1, (w1, w2), W1)
    f = W1.filter
    expect = (f(w1 + w2) - f(w1) * f(w2)) / w2
    assert np.isclose(got, expect, rtol=1e-13)


def test_c20_regularized_limit():
    # C_{2,0}(w, 0) -> -f'(w) = w tau^2 exp(-w^2 tau^2 / 2)
    w = 1.3
    got = coefficient_lr(2, 0, (w, 0.0), W1)
    expect = w * W1.tau ** 2 * np.exp(-0.5 * (w * W1.tau) ** 2)
    assert np.isclose(got, expect, rtol=1e-10)
    # and against the independent shift-limit oracle
    assert np.isclose(got, delta_limit(2, 0, (w, 0.0), W1), rtol=1e-8)


def test_c20_double_zero():
    assert abs(coefficient_lr(2, 0, (0.0, 0.0), W1)) < 1e-12


def test_singular_total_finite_random():
    rng = np.random.default_rng(3)
    for _ in range(20):
        k = int(rng.integers(2, 5))
        l = int(rng.integers(1, k + 1))
        freqs = rng.normal(size=k)
        # engineer a zero prefix sum
        j = int(rng.integers(1, k))
        freqs[j] = -freqs[:j].sum()
        v = coefficient_lr(l, k - l, tuple(freqs), W1)
        assert np.isfinite(v)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 4), st.data())
def test_delta_limit_agrees(k, data):
    l = data.draw(st.integers(1, k))
    freqs = tuple(data.draw(st.floats(-3, 3).filter(lambda x: abs(x) > 1e-3))
                  for _ in range(k))
    got = coefficient_lr(l, k - l, freqs, W1)
    ref = delta_limit(l, k - l, freqs, W1)
    assert np.isclose(got, ref, rtol=1e-6, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.data())
def test_cyclic_identity(k, data):
    k1 = data.draw(st.integers(1, k))
    freqs = [data.draw(st.floats(-3, 3)) for _ in range(k)]
    assert cyclic_identity_check(freqs, k1, W1)


def test_cyclic_identity_k1_filter_evenness():
    assert cyclic_identity_check([1.234], 1, W1)


def test_cyclic_identity_with_engineered_zeros():
    freqs = [1.0, -1.0, 0.5]
    for k1 in (1, 2, 3):
        assert cyclic_identity_check(freqs, k1, W1)


def test_finite_tau_converges_to_ir_limit():
    freqs = (1.1, -1.1, 0.7)  # engineered zero prefix at position 2
    ir = coefficient_lr(2, 1, freqs, W1, mode="ir_limit")
    prev = None
    for tau in (20.0, 40.0, 80.0):
        v = coefficient_lr(2, 1, freqs, WindowFunction(tau=tau))
        prev = v
    assert np.isclose(prev, ir, rtol=1e-6, atol=1e-12)


def test_ir_limit_nonzero_total_vanishes():
    assert coefficient_lr(1, 0, (0.5,), W1, mode="ir_limit") == 0.0
    assert coefficient_lr(1, 0, (0.0,), W1, mode="ir_limit") == 1.0


def test_hermiticity_seed():
    # C is real for the (real, even) gaussian filter; negating every frequency
    # is filter-invariant while each factorial picks up (-1)^len, and the
    # total factorial length is l+r-1 (w_1 is excluded from its loop).
    rng = np.random.default_rng(11)
    for _ in range(10):
        k = int(rng.integers(1, 5))
        l = int(rng.integers(1, k + 1))
        freqs = tuple(rng.normal(size=k))
        a = coefficient_lr(l, k - l, freqs, W1)
        b = coefficient_lr(l, k - l, tuple(-f for f in freqs), W1)
        assert np.isclose(np.conj(a) * (-1.0) ** (k - 1), b, rtol=1e-10, atol=1e-14)


def test_coefficient_request_validation():
    with pytest.raises(ValueError):
        CoefficientRequest(0, 1, (1.0,), W1)
    req = CoefficientRequest(1, 1, (0.3, 0.4), W1)
    assert np.isfinite(coefficient(req))


def test_band_evaluation_matches_scalar():
    grid = np.linspace(0.5, 4.0, 37)
    # frequencies: (w - 2.0, 1.5) as affine maps of w
    fns = [(-2.0, 1.0), (1.5, 0.0)]
    vals = coefficient_band(2, 0, fns, grid, W1)
    for i in (0, 11, 29):
        w = grid[i]
        direct = coefficient_lr(2, 0, (w - 2.0, 1.5), W1)
        assert np.isclose(vals[i], direct, rtol=1e-12)


def test_band_evaluation_handles_identically_singular_prefix():
    grid = np.linspace(0.5, 4.0, 7)
    fns = [(0.0, 1.0), (0.0, -1.0)]  # second prefix sum identically zero
    vals = coefficient_band(2, 0, fns, grid, W1)
    for i, w in enumerate(grid):
        direct = coefficient_lr(2, 0, (w, -w), W1)
        assert np.isclose(vals[i], direct, rtol=1e-10)


def test_dot_dump():
    d = enumerate_diagrams(2, 1)[0]
    text = d.dot()
    assert text.startswith("digraph") and "->" in text
