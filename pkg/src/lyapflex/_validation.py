"""Input validation helpers shared by the public functions."""

from __future__ import annotations

import numbers

import numpy as np

from .exceptions import InvalidInputError

ANALYTIC_TOL = 1e-12


def check_vector(x, name="x", *, dim=None, min_dim=1):
    """Return ``x`` as a finite 1-d float array or raise InvalidInputError."""
    try:
        arr = np.asarray(x, dtype=float)
    except (TypeError, ValueError) as exc:
        raise InvalidInputError(f"{name} is not numeric", field=name) from exc
    if arr.ndim != 1:
        raise InvalidInputError(f"{name} must be a vector", field=name, shape=arr.shape)
    if arr.size < min_dim:
        raise InvalidInputError(
            f"{name} needs at least {min_dim} entries", field=name, size=arr.size
        )
    if dim is not None and arr.size != dim:
        raise InvalidInputError(
            f"{name} has {arr.size} entries, expected {dim}", field=name
        )
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} has non-finite entries", field=name)
    return arr


def check_points(x, dim, name="x"):
    """Return a (n, dim) float array; a single point is promoted to n=1.

    The second return value tells whether the input was a single point.
    """
    arr = np.asarray(x, dtype=float)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != dim:
        raise InvalidInputError(
            f"{name} must have trailing dimension {dim}", field=name, shape=arr.shape
        )
    return arr, single


def check_index(j, lo, hi, name="j"):
    if not isinstance(j, numbers.Integral) or isinstance(j, bool):
        raise InvalidInputError(f"{name} must be an integer", field=name)
    if not lo <= j <= hi:
        raise InvalidInputError(
            f"{name}={j} outside [{lo}, {hi}]", field=name, value=int(j)
        )
    return int(j)


def check_positive_int(n, name, *, minimum=1):
    if not isinstance(n, numbers.Integral) or isinstance(n, bool) or n < minimum:
        raise InvalidInputError(f"{name} must be an integer >= {minimum}", field=name)
    return int(n)


def check_positive(x, name, *, allow_zero=False):
    try:
        v = float(x)
    except (TypeError, ValueError) as exc:
        raise InvalidInputError(f"{name} is not a number", field=name) from exc
    if not np.isfinite(v) or v < 0 or (v == 0 and not allow_zero):
        raise InvalidInputError(f"{name} must be positive", field=name, value=v)
    return v


def check_integer_matrix(m, name="matrix"):
    """Return a square matrix as a tuple of tuples of Python ints."""
    try:
        rows = [list(r) for r in m]
    except TypeError as exc:
        raise InvalidInputError(f"{name} is not a matrix", field=name) from exc
    d = len(rows)
    if d == 0 or any(len(r) != d for r in rows):
        raise InvalidInputError(f"{name} must be square", field=name)
    out = []
    for r in rows:
        row = []
        for v in r:
            if isinstance(v, str):
                try:
                    v = int(v, 10)
                except ValueError as exc:
                    raise InvalidInputError(
                        f"{name} entry {v!r} is not a decimal integer", field=name
                    ) from exc
            elif isinstance(v, numbers.Integral) and not isinstance(v, bool):
                v = int(v)
            elif isinstance(v, numbers.Real) and float(v).is_integer():
                v = int(v)
            else:
                raise InvalidInputError(f"{name} entry {v!r} is not an integer", field=name)
            row.append(v)
        out.append(tuple(row))
    return tuple(out)


def check_rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
