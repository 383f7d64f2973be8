"""Ordered spectra, prefix sums and the majorization order.

A spectrum here is a non-increasing real vector summing to zero (the
exponents of a volume preserving map).  Majorization compares two such
vectors through their prefix sums, and most of the module is a thin layer
over that observation.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from ._validation import ANALYTIC_TOL, check_index, check_vector
from .exceptions import InvalidInputError, NotASpectrumError

__all__ = [
    "OrderedSpectrum",
    "SummedSpectrum",
    "DoublyStochasticMatrix",
    "Relation",
    "TargetReport",
    "to_summed",
    "from_summed",
    "compare",
    "gap",
    "mix",
    "validate_target",
]


def _frozen(arr):
    arr = np.array(arr, dtype=float)
    arr.setflags(write=False)
    return arr


class _Vector:
    """Read-only float vector with array protocol support."""

    __slots__ = ("_entries",)

    def __init__(self, entries):
        self._entries = _frozen(entries)

    @property
    def entries(self):
        return self._entries

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self._entries
        return self._entries.astype(dtype)

    def __len__(self):
        return self._entries.size

    def __getitem__(self, i):
        return self._entries[i]

    def __iter__(self):
        return iter(self._entries.tolist())

    def __eq__(self, other):
        if type(other) is not type(self):
            return NotImplemented
        return np.array_equal(self._entries, other._entries)

    def __hash__(self):
        return hash((type(self).__name__, self._entries.tobytes()))

    def __repr__(self):
        vals = ", ".join(f"{v:.6g}" for v in self._entries)
        return f"{type(self).__name__}([{vals}])"

    def to_list(self):
        return self._entries.tolist()


class OrderedSpectrum(_Vector):
    """Non-increasing zero-sum vector of exponents.

    Parameters
    ----------
    entries : array_like
        The exponents, in nats per iterate.
    tol : float
        Tolerance for the ordering and zero-sum checks.  The default suits
        spectra built from closed forms; pass something looser for
        estimated spectra.
    """

    __slots__ = ()

    def __init__(self, entries, tol=ANALYTIC_TOL):
        arr = check_vector(entries, "spectrum", min_dim=2)
        diffs = np.diff(arr)
        bad = np.flatnonzero(diffs > tol)
        if bad.size:
            raise NotASpectrumError(
                "entries are not non-increasing", offending_indices=(bad + 1).tolist()
            )
        total = float(np.sum(arr))
        if abs(total) > max(tol, ANALYTIC_TOL):
            raise NotASpectrumError("entries do not sum to zero", total=total)
        super().__init__(arr)

    @property
    def dim(self):
        return self._entries.size


class SummedSpectrum(_Vector):
    """Prefix sums ``s_1, s_1+s_2, ..., s_1+...+s_{d-1}`` of a spectrum."""

    __slots__ = ()

    def __init__(self, entries):
        super().__init__(check_vector(entries, "summed spectrum", min_dim=1))

    @property
    def dim(self):
        """Dimension of the underlying spectrum (one more than the length)."""
        return self._entries.size + 1

    def padded(self):
        """Prefix sums with the zero end points at j=0 and j=d attached."""
        return np.concatenate([[0.0], self._entries, [0.0]])


@dataclass(frozen=True, eq=False)
class DoublyStochasticMatrix:
    """Non-negative square matrix whose rows and columns all sum to one."""

    entries: np.ndarray

    def __post_init__(self):
        p = np.array(self.entries, dtype=float)
        if p.ndim != 2 or p.shape[0] != p.shape[1]:
            raise InvalidInputError("doubly stochastic matrix must be square")
        if np.any(p < -ANALYTIC_TOL) or not np.all(np.isfinite(p)):
            raise InvalidInputError("doubly stochastic matrix has negative entries")
        for axis, label in ((1, "row"), (0, "column")):
            sums = p.sum(axis=axis)
            bad = np.flatnonzero(np.abs(sums - 1.0) > ANALYTIC_TOL)
            if bad.size:
                raise InvalidInputError(
                    f"{label} sums differ from 1", offending_indices=bad.tolist()
                )
        p.setflags(write=False)
        object.__setattr__(self, "entries", p)

    def __array__(self, dtype=None, copy=None):
        return self.entries if dtype is None else self.entries.astype(dtype)


class Relation(str, enum.Enum):
    STRICTLY_MAJORIZES = "strictly_majorizes"
    MAJORIZES = "majorizes"
    INCOMPARABLE = "incomparable"


def _as_spectrum(s, tol=ANALYTIC_TOL):
    return s if isinstance(s, OrderedSpectrum) else OrderedSpectrum(s, tol=tol)


def to_summed(s):
    """Prefix sums of a spectrum, dropping the final (zero) total.

    Examples
    --------
    >>> to_summed([2.0, 0.0, -2.0]).to_list()
    [2.0, 2.0]
    """
    arr = np.asarray(s, dtype=float)
    if arr.ndim != 1 or arr.size < 2:
        raise InvalidInputError("spectrum needs dimension >= 2", field="spectrum")
    return SummedSpectrum(np.cumsum(arr)[:-1])


def from_summed(h, tol=ANALYTIC_TOL):
    """Inverse of :func:`to_summed` on zero-sum vectors.

    Raises
    ------
    NotASpectrumError
        If the recovered vector is not non-increasing.
    """
    padded = np.concatenate([[0.0], check_vector(h, "summed spectrum"), [0.0]])
    return OrderedSpectrum(np.diff(padded), tol=tol)


def compare(a, b, tol=ANALYTIC_TOL):
    """Decide whether ``a`` majorizes ``b``.

    Prefix sums closer than ``tol`` count as equal, so strictness needs a
    margin above the tolerance.  The relation is one sided: call again with
    the arguments swapped to test the reverse.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim != 1 or a.shape != b.shape or a.size < 2:
        raise InvalidInputError("spectra must be vectors of equal dimension >= 2")
    if abs(a.sum()) > tol or abs(b.sum()) > tol:
        raise InvalidInputError(
            "spectra must sum to zero", sums=[float(a.sum()), float(b.sum())]
        )
    diff = np.cumsum(a)[:-1] - np.cumsum(b)[:-1]
    if np.all(diff > tol):
        return Relation.STRICTLY_MAJORIZES
    if np.all(diff >= -tol):
        return Relation.MAJORIZES
    return Relation.INCOMPARABLE


def gap(s, u):
    """Smallest consecutive difference, also bounded by ``s_u`` and ``-s_{u+1}``.

    Positive exactly when ``s`` is strictly decreasing and changes sign
    between positions ``u`` and ``u+1`` (1-based).
    """
    arr = check_vector(s, "spectrum", min_dim=2)
    u = check_index(u, 1, arr.size - 1, "u")
    return float(min(np.min(-np.diff(arr)), arr[u - 1], -arr[u]))


def mix(s, p):
    """Average a spectrum with a doubly stochastic matrix and re-sort.

    The result is always majorized by ``s``.  Ties are resolved by a stable
    sort so the output is deterministic.
    """
    if not isinstance(p, DoublyStochasticMatrix):
        p = DoublyStochasticMatrix(p)
    arr = np.asarray(s, dtype=float)
    if p.entries.shape[0] != arr.size:
        raise InvalidInputError("matrix and spectrum dimensions differ")
    v = p.entries @ arr
    order = np.argsort(-v, kind="stable")
    v = v[order]
    # re-centre: the product is zero-sum only up to rounding
    return OrderedSpectrum(v - v.mean())


@dataclass(frozen=True)
class TargetReport:
    """Outcome of :func:`validate_target`.

    ``offending_prefixes`` lists 1-based indices j at which the prefix sum
    of the target exceeds (or, for the strict request, fails to stay below)
    the prefix sum of the base spectrum.
    """

    passed: bool
    strictly_ordered: bool
    sign_pattern: bool
    majorized: bool
    strictly_majorized: bool
    entropy_condition: bool
    strict_requested: bool
    offending_prefixes: tuple = field(default_factory=tuple)
    unordered_positions: tuple = field(default_factory=tuple)

    def to_dict(self):
        out = dict(self.__dict__)
        out["offending_prefixes"] = list(self.offending_prefixes)
        out["unordered_positions"] = list(self.unordered_positions)
        return out


def validate_target(xi, base, u, strict=True, tol=ANALYTIC_TOL):
    """Check that ``xi`` can be reached from ``base`` by lowering exponents.

    The report covers strict ordering of ``xi``, the sign change at ``u``,
    the requested majorization relation and, separately, the weaker
    condition that the sum of the ``u`` positive exponents does not grow.
    Never raises for well-formed vectors.
    """
    x = np.asarray(xi, dtype=float)
    y = np.asarray(base, dtype=float)
    if x.ndim != 1 or x.shape != y.shape or x.size < 2:
        raise InvalidInputError("target and base must be vectors of equal dimension")
    d = x.size
    u = check_index(u, 1, d - 1, "u")
    steps = -np.diff(x)
    unordered = tuple(int(i) + 1 for i in np.flatnonzero(steps <= tol))
    strictly_ordered = not unordered
    sign_pattern = bool(x[u - 1] > tol and x[u] < -tol)
    zero_sum = abs(x.sum()) <= tol and abs(y.sum()) <= tol
    diff = np.cumsum(y)[:-1] - np.cumsum(x)[:-1]
    majorized = bool(zero_sum and np.all(diff >= -tol))
    strictly_majorized = bool(zero_sum and np.all(diff > tol))
    if strict:
        offending = tuple(int(i) + 1 for i in np.flatnonzero(diff <= tol))
    else:
        offending = tuple(int(i) + 1 for i in np.flatnonzero(diff < -tol))
    entropy = bool(np.sum(x[:u]) <= np.sum(y[:u]) + tol)
    relation_ok = strictly_majorized if strict else majorized
    return TargetReport(
        passed=bool(strictly_ordered and sign_pattern and relation_ok),
        strictly_ordered=strictly_ordered,
        sign_pattern=sign_pattern,
        majorized=majorized,
        strictly_majorized=strictly_majorized,
        entropy_condition=entropy,
        strict_requested=bool(strict),
        offending_prefixes=offending,
        unordered_positions=unordered,
    )
