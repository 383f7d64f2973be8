"""Hyperbolic integer matrices with prescribed index and simple real spectrum.

The construction takes an integer pattern ``a_1 > ... > a_u > 0 > ... > a_d``
with zero sum and gaps of at least two, and a base ``b >= 3``.  With
``h_i = a_1 + ... + a_i`` the polynomial

    P(x) = sum_i (-1)^i b^{h_i} x^{d-i}

is monic with constant term ``(-1)^d``, and ``P(b^n)`` has the sign of
``prod_j (n - a_j)`` whenever n is not one of the ``a_j``.  Hence P has one
root in each interval ``(b^{a_j - 1}, b^{a_j + 1})`` and its companion matrix
is a hyperbolic element of GL(d, Z) with exactly u expanding directions.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property

import numpy as np

from ._validation import check_index, check_integer_matrix, check_positive_int
from .exceptions import ConstructionFailedError, InvalidInputError
from .majorization import OrderedSpectrum

__all__ = [
    "ExponentPattern",
    "LatticePolynomial",
    "HyperbolicAutomorphism",
    "AnosovReport",
    "default_pattern",
    "build_polynomial",
    "sign_at_power",
    "companion",
    "verify_anosov",
    "exact_determinant",
    "exact_inverse",
    "matrix_to_json",
    "matrix_from_json",
    "CAT_MAP",
]

# b**h must stay exactly representable with room to spare in double precision
_MAX_COEFFICIENT = 2**52
_UNIT_MARGIN = 1e-9
_SIMPLE_MARGIN = 1e-9

CAT_MAP = ((2, 1), (1, 1))


@dataclass(frozen=True)
class ExponentPattern:
    """Integer exponent pattern together with the base of the construction."""

    a: tuple
    u: int
    b: int = 3

    def __post_init__(self):
        a = tuple(int(v) for v in self.a)
        object.__setattr__(self, "a", a)
        d = len(a)
        if d < 2:
            raise InvalidInputError("pattern needs d >= 2", field="a")
        check_index(self.u, 1, d - 1, "u")
        if not isinstance(self.b, int) or self.b < 3:
            raise InvalidInputError("base b must be an integer >= 3", field="b")
        if sum(a) != 0:
            raise InvalidInputError("pattern must sum to zero", field="a", pattern=a)
        if any(x - y < 2 for x, y in zip(a, a[1:])):
            raise InvalidInputError("consecutive gaps must be at least 2", field="a")
        if not (a[self.u - 1] > 0 > a[self.u]):
            raise InvalidInputError("sign change must sit at position u", field="u")
        if self.b ** max(self.hats) >= _MAX_COEFFICIENT:
            raise InvalidInputError(
                "b**max(prefix sum) exceeds 2**52", field="b", prefix_max=max(self.hats)
            )

    @property
    def d(self):
        return len(self.a)

    @cached_property
    def hats(self):
        """Prefix sums ``(h_0, ..., h_d)`` with ``h_0 = h_d = 0``."""
        return (0,) + tuple(itertools.accumulate(self.a))


def default_pattern(d, u, b=3):
    """Smallest admissible pattern for dimension ``d`` and index ``u``.

    Patterns are ranked by ``max |a_i|`` and ties are broken by the
    lexicographic order of ``a``.

    Examples
    --------
    >>> default_pattern(3, 1).a
    (4, -1, -3)
    """
    d = check_positive_int(d, "d", minimum=2)
    u = check_index(u, 1, d - 1, "u")
    for bound in itertools.count(1):
        best = None
        pos = range(bound, 0, -1)
        neg = range(-1, -bound - 1, -1)
        for top in itertools.combinations(pos, u):
            for bottom in itertools.combinations(neg, d - u):
                a = top + bottom
                if sum(a) != 0 or any(x - y < 2 for x, y in zip(a, a[1:])):
                    continue
                if max(abs(v) for v in a) != bound:
                    continue
                if best is None or a < best:
                    best = a
        if best is not None:
            return ExponentPattern(best, u, b)


@dataclass(frozen=True)
class LatticePolynomial:
    """Monic integer polynomial, coefficients listed from the leading one down.

    ``pattern`` is kept when the polynomial came from :func:`build_polynomial`
    so that root brackets are available.
    """

    coefficients: tuple
    pattern: ExponentPattern | None = field(default=None, compare=False)

    def __post_init__(self):
        c = tuple(int(v) for v in self.coefficients)
        if len(c) < 3 or c[0] != 1:
            raise InvalidInputError("polynomial must be monic of degree >= 2")
        object.__setattr__(self, "coefficients", c)

    @property
    def degree(self):
        return len(self.coefficients) - 1

    def __call__(self, x):
        """Horner evaluation; exact for ints and Fractions."""
        acc = 0
        for c in self.coefficients:
            acc = acc * x + c
        return acc

    def __str__(self):
        terms = []
        for k, c in enumerate(self.coefficients):
            p = self.degree - k
            if c == 0:
                continue
            mag = abs(c)
            body = {0: f"{mag}", 1: "x" if mag == 1 else f"{mag}x"}.get(
                p, f"x^{p}" if mag == 1 else f"{mag}x^{p}"
            )
            terms.append(("-" if c < 0 else "+", body))
        text = " ".join(f"{s} {b}" for s, b in terms)
        return text[2:] if text.startswith("+ ") else "-" + text[2:]


def build_polynomial(p):
    """Polynomial ``sum_i (-1)^i b^{h_i} x^{d-i}`` of an exponent pattern.

    Examples
    --------
    >>> str(build_polynomial(ExponentPattern((4, -1, -3), 1)))
    'x^3 - 81x^2 + 27x - 1'
    """
    coeffs = tuple((-1) ** i * p.b**h for i, h in enumerate(p.hats))
    return LatticePolynomial(coeffs, pattern=p)


def _power(b, n):
    return Fraction(b) ** n


def sign_at_power(poly, b, n):
    """Sign of ``P(b^n)`` by exact rational arithmetic.

    Raises
    ------
    InvalidInputError
        If the polynomial carries its pattern and ``n`` is one of the
        pattern entries (where the sign claim says nothing).
    """
    n = int(n)
    if poly.pattern is not None and n in poly.pattern.a:
        raise InvalidInputError(f"n={n} is an entry of the pattern", field="n")
    value = poly(_power(b, n))
    return (value > 0) - (value < 0)


def _bisect_root(poly, lo, hi):
    """Bisection on floats with exact sign evaluation.

    Stops when the bracket cannot be split further in double precision.
    """
    s_lo = poly(Fraction(lo))
    s_hi = poly(Fraction(hi))
    if s_lo == 0:
        return lo
    if s_hi == 0:
        return hi
    if (s_lo > 0) == (s_hi > 0):
        raise ConstructionFailedError("root bracket has no sign change", bracket=[lo, hi])
    positive_lo = s_lo > 0
    for _ in range(2000):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        v = poly(Fraction(mid))
        if v == 0:
            return mid
        if (v > 0) == positive_lo:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def exact_determinant(m):
    """Determinant of an integer matrix by fraction-free elimination."""
    a = [list(r) for r in check_integer_matrix(m)]
    n = len(a)
    sign, prev = 1, 1
    for k in range(n - 1):
        if a[k][k] == 0:
            swap = next((i for i in range(k + 1, n) if a[i][k] != 0), None)
            if swap is None:
                return 0
            a[k], a[swap] = a[swap], a[k]
            sign = -sign
        for i in range(k + 1, n):
            for j in range(k + 1, n):
                a[i][j] = (a[i][j] * a[k][k] - a[i][k] * a[k][j]) // prev
        prev = a[k][k]
    return sign * a[n - 1][n - 1]


def exact_inverse(m):
    """Inverse of a unimodular integer matrix as integers."""
    rows = check_integer_matrix(m)
    n = len(rows)
    aug = [[Fraction(v) for v in r] + [Fraction(int(i == j)) for j in range(n)]
           for i, r in enumerate(rows)]
    for col in range(n):
        piv = next((r for r in range(col, n) if aug[r][col] != 0), None)
        if piv is None:
            raise InvalidInputError("matrix is singular")
        aug[col], aug[piv] = aug[piv], aug[col]
        p = aug[col][col]
        aug[col] = [v / p for v in aug[col]]
        for r in range(n):
            if r != col and aug[r][col] != 0:
                f = aug[r][col]
                aug[r] = [x - f * y for x, y in zip(aug[r], aug[col])]
    inv = [row[n:] for row in aug]
    if any(v.denominator != 1 for row in inv for v in row):
        raise InvalidInputError("matrix is not unimodular")
    return tuple(tuple(int(v) for v in row) for row in inv)


@dataclass(frozen=True)
class AnosovReport:
    """Checks behind :func:`verify_anosov`.

    ``unit_margin`` is the smallest distance of a log-modulus from zero and
    ``simple_margin`` the smallest gap between two log-moduli.
    """

    passed: bool
    determinant: int
    eigenvalues: tuple
    log_moduli: tuple
    all_real: bool
    unit_margin: float
    simple_margin: float
    unstable_index: int
    reasons: tuple

    def to_dict(self):
        out = dict(self.__dict__)
        out["eigenvalues"] = [[float(z.real), float(z.imag)] for z in self.eigenvalues]
        out["log_moduli"] = list(self.log_moduli)
        out["reasons"] = list(self.reasons)
        return out


def verify_anosov(m):
    """Check that an integer matrix defines a hyperbolic automorphism
    with simple real spectrum.

    The determinant is exact; eigenvalues come from a general floating
    point eigensolver.
    """
    rows = check_integer_matrix(m)
    det = exact_determinant(rows)
    ev = np.linalg.eigvals(np.array(rows, dtype=float))
    mod = np.abs(ev)
    order = np.argsort(-mod, kind="stable")
    ev, mod = ev[order], mod[order]
    reasons = []
    if abs(det) != 1:
        reasons.append(f"|det| = {abs(det)} != 1")
    all_real = bool(np.all(np.abs(ev.imag) <= 1e-9 * np.maximum(mod, 1.0)))
    if not all_real:
        reasons.append("complex eigenvalues")
    with np.errstate(divide="ignore"):
        logs = np.log(mod)
    unit_margin = float(np.min(np.abs(logs)))
    if unit_margin <= _UNIT_MARGIN:
        reasons.append("eigenvalue on the unit circle")
    simple_margin = float(np.min(-np.diff(logs))) if logs.size > 1 else np.inf
    if not simple_margin > _SIMPLE_MARGIN:
        reasons.append("repeated eigenvalue modulus")
    return AnosovReport(
        passed=not reasons,
        determinant=det,
        eigenvalues=tuple(complex(z) for z in ev),
        log_moduli=tuple(float(v) for v in logs),
        all_real=all_real,
        unit_margin=unit_margin,
        simple_margin=simple_margin,
        unstable_index=int(np.sum(logs > 0)),
        reasons=tuple(reasons),
    )


class HyperbolicAutomorphism:
    """Integer unimodular matrix with simple real spectrum off the unit circle.

    Acts on the torus by ``x -> M x (mod 1)``.  Eigenvalues are ordered by
    decreasing modulus and eigenvectors are unit columns with a positive
    first non-negligible entry.

    Parameters
    ----------
    matrix : sequence of sequences of int
    eigenvalues : array_like, optional
        Certified eigenvalues (e.g. from bracketed bisection).  When absent
        they come from a floating point eigensolver.
    """

    def __init__(self, matrix, eigenvalues=None, eigenvectors=None):
        rows = check_integer_matrix(matrix)
        report = verify_anosov(rows)
        if not report.passed:
            raise ConstructionFailedError(
                "matrix is not a hyperbolic automorphism with simple real spectrum",
                reasons=list(report.reasons),
            )
        self.matrix = rows
        self.report = report
        self.dim = len(rows)
        self.float_matrix = np.array(rows, dtype=float)
        self.float_matrix.setflags(write=False)
        self.inverse_matrix = exact_inverse(rows)
        self.float_inverse = np.array(self.inverse_matrix, dtype=float)
        self.float_inverse.setflags(write=False)
        if eigenvalues is None:
            eigenvalues = np.real(np.array(report.eigenvalues))
        ev = np.asarray(eigenvalues, dtype=float)
        order = np.argsort(-np.abs(ev), kind="stable")
        ev = ev[order]
        if eigenvectors is not None:
            eigenvectors = [eigenvectors[i] for i in order]
        self.eigenvalues = ev
        self.eigenvectors = self._eigenvectors(ev, eigenvectors)
        logs = np.log(np.abs(ev))
        self.unstable_index = int(np.sum(logs > 0))
        self.spectrum = OrderedSpectrum(logs - logs.mean())

    def _eigenvectors(self, ev, vectors=None):
        m = self.float_matrix
        d = self.dim
        cols = []
        for k, lam in enumerate(ev):
            if vectors is not None:
                v = np.asarray(vectors[k], dtype=float)
                v = v / np.linalg.norm(v)
            else:
                # null vector of (M - lam I) from the smallest singular direction
                _, _, vt = np.linalg.svd(m - lam * np.eye(d))
                v = vt[-1]
            lead = np.flatnonzero(np.abs(v) > 1e-12)[0]
            if v[lead] < 0:
                v = -v
            cols.append(v)
        frame = np.column_stack(cols)
        frame.setflags(write=False)
        return frame

    # torus action -----------------------------------------------------
    def evaluate(self, x):
        x = np.asarray(x, dtype=float)
        return _mod1(x @ self.float_matrix.T)

    def inverse(self, x):
        x = np.asarray(x, dtype=float)
        return _mod1(x @ self.float_inverse.T)

    def differential(self, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(self.float_matrix, x.shape[:-1] + (self.dim, self.dim)).copy()

    def step(self, x):
        return self.evaluate(x), self.differential(x)

    @property
    def base(self):
        return self

    def to_json(self):
        return {"matrix": matrix_to_json(self.matrix)}

    def __eq__(self, other):
        return isinstance(other, HyperbolicAutomorphism) and self.matrix == other.matrix

    def __hash__(self):
        return hash(self.matrix)

    def __repr__(self):
        return f"HyperbolicAutomorphism({[list(r) for r in self.matrix]})"


def _mod1(x):
    y = np.mod(x, 1.0)
    # np.mod of a tiny negative number can round to exactly 1.0
    y[y >= 1.0] = 0.0
    return y


def companion(poly):
    """Companion matrix of a monic integer polynomial.

    The matrix has ones on the superdiagonal and last row
    ``-(c_0, ..., c_{d-1})``, so the root ``r`` has eigenvector
    ``(1, r, ..., r^{d-1})``.  When the polynomial carries its pattern the
    eigenvalues are found by bisection inside the certified brackets
    ``(b^{a_j - 1}, b^{a_j + 1})``.

    Raises
    ------
    ConstructionFailedError
        If the matrix is not hyperbolic with simple real spectrum.
    """
    d = poly.degree
    low_first = poly.coefficients[::-1]
    rows = [[0] * d for _ in range(d)]
    for i in range(d - 1):
        rows[i][i + 1] = 1
    rows[d - 1] = [-c for c in low_first[:d]]
    eigenvalues = vectors = None
    if poly.pattern is not None:
        b = poly.pattern.b
        eigenvalues = [
            _bisect_root(poly, float(_power(b, a - 1)), float(_power(b, a + 1)))
            for a in poly.pattern.a
        ]
        vectors = [[r**k for k in range(d)] for r in eigenvalues]
    return HyperbolicAutomorphism(rows, eigenvalues=eigenvalues, eigenvectors=vectors)


def matrix_to_json(m):
    """Exact JSON form: nested lists of decimal strings."""
    return [[str(int(v)) for v in row] for row in check_integer_matrix(m)]


def matrix_from_json(obj):
    if isinstance(obj, dict):
        obj = obj.get("matrix")
    if obj is None:
        raise InvalidInputError("no matrix field", field="matrix")
    return check_integer_matrix(obj)
