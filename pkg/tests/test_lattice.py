import itertools
import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lyapflex.exceptions import ConstructionFailedError, InvalidInputError
from lyapflex.lattice import (
    CAT_MAP,
    ExponentPattern,
    HyperbolicAutomorphism,
    build_polynomial,
    companion,
    default_pattern,
    exact_determinant,
    exact_inverse,
    matrix_from_json,
    matrix_to_json,
    sign_at_power,
    verify_anosov,
)


def laplace_det(m):
    # independent route: cofactor expansion along the first row
    if len(m) == 1:
        return m[0][0]
    return sum((-1) ** j * m[0][j] * laplace_det([r[:j] + r[j + 1:] for r in m[1:]])
               for j in range(len(m)))


@st.composite
def patterns(draw, d_max=5):
    """Admissible patterns: gaps >= 2, zero sum, sign change at u."""
    d = draw(st.integers(2, d_max))
    u = draw(st.integers(1, d - 1))
    gaps = draw(st.lists(st.integers(2, 4), min_size=d - 1, max_size=d - 1))
    a = np.concatenate([[0], -np.cumsum(gaps)])
    # shift so the sum is zero: only possible when d divides the total
    total = int(a.sum())
    shift = -total // d
    a = a + shift
    rem = int(a.sum())
    if rem:
        a[0] -= rem  # widen the top gap to absorb the remainder
    if not (a[u - 1] > 0 > a[u]):
        # move the sign change to u by shifting mass between the ends
        return draw(st.just(default_pattern(d, u)))
    b = draw(st.sampled_from([3, 4]))
    try:
        return ExponentPattern(tuple(int(v) for v in a), u, b)
    except InvalidInputError:
        return default_pattern(d, u, b)


def test_default_pattern_examples():
    assert default_pattern(2, 1).a == (1, -1)
    assert default_pattern(3, 1).a == (4, -1, -3)
    p = default_pattern(3, 2)
    assert sum(p.a) == 0 and p.a[1] > 0 > p.a[2]


def test_pattern_validation():
    with pytest.raises(InvalidInputError):
        ExponentPattern((2, 1, -3), 2)  # gap of one
    with pytest.raises(InvalidInputError):
        ExponentPattern((3, 1, -3), 2)  # non-zero sum
    with pytest.raises(InvalidInputError):
        ExponentPattern((4, -1, -3), 2)  # sign change at 1
    with pytest.raises(InvalidInputError):
        ExponentPattern((1, -1), 1, b=2)


def test_polynomial_text():
    assert str(build_polynomial(ExponentPattern((4, -1, -3), 1))) == "x^3 - 81x^2 + 27x - 1"


def test_cat_map_properties():
    L = HyperbolicAutomorphism(CAT_MAP)
    lam = np.log((3 + np.sqrt(5)) / 2)
    assert np.allclose(L.spectrum.entries, [lam, -lam], atol=1e-14)
    assert L.unstable_index == 1
    assert L.inverse_matrix == ((1, -1), (-1, 2))
    v = L.eigenvectors
    assert np.allclose(L.float_matrix @ v, v * L.eigenvalues, atol=1e-12)


def test_non_hyperbolic_rejected():
    with pytest.raises(ConstructionFailedError):
        HyperbolicAutomorphism([[1, 1], [0, 1]])
    rep = verify_anosov([[0, -1], [1, 0]])
    assert not rep.passed and not rep.all_real
    assert not verify_anosov([[2, 0], [0, 1]]).passed


def test_matrix_json_is_exact_strings():
    m = ((2, 1), (1, 1))
    obj = matrix_to_json(m)
    assert obj == [["2", "1"], ["1", "1"]]
    assert matrix_from_json(json.loads(json.dumps({"matrix": obj}))) == m
    with pytest.raises(InvalidInputError):
        matrix_from_json([["2", "x"], ["1", "1"]])
    with pytest.raises(InvalidInputError):
        matrix_from_json({"rows": obj})


def test_large_entries_stay_exact():
    p = ExponentPattern((9, 2, -3, -8), 2)
    poly = build_polynomial(p)
    L = companion(poly)
    assert exact_determinant(L.matrix) in (1, -1)
    assert max(abs(v) for r in L.matrix for v in r) == 3 ** 11


def test_sign_at_power_refuses_pattern_entries():
    poly = build_polynomial(default_pattern(3, 1))
    with pytest.raises(InvalidInputError):
        sign_at_power(poly, 3, 4)


@settings(max_examples=40, deadline=None)
@given(patterns())
def test_sign_claim_and_construction(p):
    poly = build_polynomial(p)
    for n in range(p.a[-1] - 2, p.a[0] + 3):
        if n in p.a:
            continue
        expected = int(np.sign(np.prod([n - a for a in p.a])))
        assert sign_at_power(poly, p.b, n) == expected
    L = companion(poly)
    rep = verify_anosov(L.matrix)
    assert rep.passed and rep.determinant in (1, -1)
    assert L.unstable_index == p.u
    # bracketed roots agree with a general eigensolver
    ev = np.sort(np.abs(np.linalg.eigvals(L.float_matrix)))[::-1]
    assert np.allclose(np.abs(L.eigenvalues), ev, rtol=1e-8)
    for r, a in zip(L.eigenvalues, p.a):
        assert p.b ** (a - 1) < r < p.b ** (a + 1)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(-4, 4), min_size=9, max_size=9))
def test_exact_determinant_matches_cofactors(entries):
    m = [entries[0:3], entries[3:6], entries[6:9]]
    assert exact_determinant(m) == laplace_det(m)


@settings(max_examples=40, deadline=None)
@given(patterns(4))
def test_exact_inverse(p):
    L = companion(build_polynomial(p))
    inv = exact_inverse(L.matrix)
    prod = [[sum(Fraction(a) * b for a, b in zip(row, col)) for col in zip(*inv)]
            for row in L.matrix]
    assert prod == [[int(i == j) for j in range(p.d)] for i in range(p.d)]


def test_torus_action_roundtrip():
    L = companion(build_polynomial(default_pattern(3, 2)))
    x = np.random.default_rng(0).random((50, 3))
    y = L.inverse(L.evaluate(x))
    d = np.abs(y - x)
    assert np.all(np.minimum(d, 1 - d) < 1e-9)


def test_every_small_dimension_constructs():
    for d, u, b in itertools.product(range(2, 6), range(1, 5), (3, 4)):
        if u >= d:
            continue
        p = default_pattern(d, u, b)
        L = companion(build_polynomial(p))
        assert L.unstable_index == u
