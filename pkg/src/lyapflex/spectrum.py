"""Orbit-based Lyapunov analysis of torus maps.

Exponents come from pushing an orthonormal frame along orbits with
re-orthonormalization at every step and averaging the logs of the diagonal
of the triangular factor.  Many orbits are advanced together as one batch
so that each step is a handful of stacked numpy calls.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import check_index, check_positive_int, check_rng
from .exceptions import NumericFailureError
from .majorization import OrderedSpectrum, SummedSpectrum
from .torusmap import InverseMap, as_map

__all__ = [
    "SpectrumEstimate",
    "SummedEstimate",
    "FiniteLyapunovMetric",
    "LengthGrowth",
    "estimate_spectrum",
    "estimate_summed",
    "oseledets_direction",
    "oseledets_directions",
    "integral_exponent",
    "finite_metric",
    "ordering_threshold",
    "unstable_length_growth",
    "SpectrumEstimator",
    "InverseMap",
]

# inter-orbit spread is exactly zero for constant cocycles; keep errors positive
STDERR_FLOOR = 1e-12


@dataclass(frozen=True, eq=False)
class SpectrumEstimate:
    """Result of :func:`estimate_spectrum`.

    ``values`` and ``stderr`` are per exponent; ``summed`` and
    ``summed_stderr`` are for the prefix sums ``lambda_1 + ... + lambda_j``
    (j < d), computed orbit by orbit so their errors account for the
    correlation between exponents.  ``per_orbit`` holds each orbit's
    exponents and ``checkpoints`` running averages for convergence plots.
    """

    values: np.ndarray
    stderr: np.ndarray
    summed: np.ndarray
    summed_stderr: np.ndarray
    orbits: int
    length: int
    burn_in: int
    seed: object
    per_orbit: np.ndarray = field(repr=False)
    checkpoints: tuple = field(default=(), repr=False)

    @property
    def dim(self):
        return self.values.size

    def spectrum(self, sigmas=3.0):
        """Values as an :class:`OrderedSpectrum`, tolerating ``sigmas`` errors."""
        tol = sigmas * float(np.max(self.stderr)) * math.sqrt(self.dim)
        return OrderedSpectrum(self.values - self.values.mean(), tol=max(tol, 1e-12))

    def summed_spectrum(self):
        return SummedSpectrum(self.summed)

    def to_json(self):
        return {
            "values": self.values.tolist(),
            "stderr": self.stderr.tolist(),
            "summed": self.summed.tolist(),
            "summed_stderr": self.summed_stderr.tolist(),
            "orbits": self.orbits,
            "length": self.length,
            "burn_in": self.burn_in,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class SummedEstimate:
    j: int
    value: float
    stderr: float


def _orbit_starts(seed, orbits, d):
    """Independent start points, one child seed per orbit.

    Per-orbit seeding keeps results identical however orbits are grouped
    into batches or threads.
    """
    if isinstance(seed, np.random.Generator):
        ss = seed.bit_generator.seed_seq
    else:
        ss = np.random.SeedSequence(seed)
    children = ss.spawn(orbits)
    return np.array([np.random.default_rng(c).random(d) for c in children])


def _run_batch(f, x, length, burn_in, n_checkpoints, orbit_offset):
    """QR recursion over a batch of orbits; returns per-orbit exponent sums."""
    k, d = x.shape
    q = np.broadcast_to(np.eye(d), (k, d, d)).copy()
    total = np.zeros((k, d))
    comp = np.zeros((k, d))
    every = max(1, length // n_checkpoints) if n_checkpoints else 0
    marks = []
    for n in range(burn_in + length):
        x, jac = f.step(x)
        q, r = np.linalg.qr(jac @ q)
        diag = np.abs(np.diagonal(r, axis1=1, axis2=2))
        if not np.all(np.isfinite(diag)) or np.any(diag == 0.0):
            bad = int(np.flatnonzero(~np.all(np.isfinite(diag) & (diag > 0), axis=1))[0])
            raise NumericFailureError("frame degenerated", step=n, orbit=orbit_offset + bad)
        if n < burn_in:
            continue
        logs = np.log(diag)
        # the maps preserve volume, so the last entry is minus the sum of
        # the others; the computed r_dd itself is swamped by roundoff once
        # exp(lambda_1 - lambda_d) approaches 1/eps
        logs[:, -1] = -np.sum(logs[:, :-1], axis=1)
        # compensated summation of the log-diagonal
        y = logs - comp
        t = total + y
        comp = (t - total) - y
        total = t
        m = n - burn_in + 1
        if every and m % every == 0:
            marks.append((m, total / m))
    return total / length, marks


def estimate_spectrum(f, orbits=16, length=10**6, burn_in=1000, seed=0, threads=1,
                      checkpoints=0, batch=None):
    """Lyapunov spectrum of a torus map from QR-reorthonormalized orbits.

    Parameters
    ----------
    f : HyperbolicAutomorphism or PerturbedMap
    orbits : int
        Independent orbits started at uniform random points.
    length : int
        Steps averaged per orbit, after ``burn_in`` discarded steps.
    seed : int or SeedSequence
    threads : int
        Orbit batches run concurrently; results do not depend on it.
    checkpoints : int
        Number of running-average snapshots to keep per orbit.

    Returns
    -------
    SpectrumEstimate
        Standard errors are inter-orbit standard deviations over
        ``sqrt(orbits)``, floored at ``1e-12``.
    """
    f = as_map(f)
    orbits = check_positive_int(orbits, "orbits")
    length = check_positive_int(length, "length")
    burn_in = check_positive_int(burn_in, "burn_in", minimum=0)
    threads = check_positive_int(threads, "threads")
    d = f.dim
    starts = _orbit_starts(seed, orbits, d)
    if batch is None:
        batch = max(1, math.ceil(orbits / threads))
    groups = [(i, starts[i:i + batch]) for i in range(0, orbits, batch)]

    def work(g):
        off, x = g
        return _run_batch(f, x, length, burn_in, checkpoints, off)

    if threads > 1 and len(groups) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, groups))
    else:
        results = [work(g) for g in groups]
    per_orbit = np.vstack([r[0] for r in results])
    marks = ()
    if checkpoints:
        steps = [m for m, _ in results[0][1]]
        marks = tuple((steps[i], np.vstack([r[1][i][1] for r in results]))
                      for i in range(len(steps)))
    values = per_orbit.mean(axis=0)
    summed_per = np.cumsum(per_orbit, axis=1)[:, :-1]
    if orbits > 1:
        stderr = per_orbit.std(axis=0, ddof=1) / math.sqrt(orbits)
        summed_stderr = summed_per.std(axis=0, ddof=1) / math.sqrt(orbits)
    else:
        stderr = np.zeros(d)
        summed_stderr = np.zeros(d - 1)
    stderr = np.maximum(stderr, STDERR_FLOOR)
    summed_stderr = np.maximum(summed_stderr, STDERR_FLOOR)
    seed_repr = seed if isinstance(seed, (int, np.integer)) else repr(seed)
    return SpectrumEstimate(values, stderr, summed_per.mean(axis=0), summed_stderr,
                            orbits, length, burn_in, seed_repr, per_orbit, marks)


def estimate_summed(f, j, orbits=16, length=10**6, burn_in=1000, seed=0, threads=1):
    """``lambda_1 + ... + lambda_j`` with its own standard error.

    ``j = d`` gives the total, which is zero for volume preserving maps.
    """
    f = as_map(f)
    j = check_index(j, 1, f.dim)
    est = estimate_spectrum(f, orbits, length, burn_in, seed, threads)
    per = np.sum(est.per_orbit[:, :j], axis=1)
    se = per.std(ddof=1) / math.sqrt(est.orbits) if est.orbits > 1 else 0.0
    return SummedEstimate(j, float(per.mean()), max(float(se), STDERR_FLOOR))


# ----------------------------------------------------------------------
# Oseledets directions


def _orbit_segment(f, x, horizon):
    """Points ``f^{-h}x, ..., x, ..., f^{h}x`` for a batch (axis 0 = time)."""
    back = [x]
    for _ in range(horizon):
        back.append(f.inverse(back[-1]))
    fwd = [x]
    for _ in range(horizon):
        fwd.append(f.evaluate(fwd[-1]))
    return back[::-1], fwd


def _push_flag(f, points, k, rng, inverse=False):
    """Orthonormal k-frame pushed along ``points`` (in the given order)."""
    n, d = points[0].shape
    q, _ = np.linalg.qr(rng.standard_normal((n, d, d)))
    q = q[:, :, :k]
    for p in points[:-1]:
        _, jac = f.step(p)
        if inverse:
            q = np.linalg.solve(jac, q)
        else:
            q = jac @ q
        q, _ = np.linalg.qr(q)
    return q


@dataclass(frozen=True)
class OseledetsDirections:
    """Batch of approximate Oseledets directions with diagnostics.

    ``residual`` is the mismatch between the two representations of the
    intersection vector; ``separation`` is the smallest singular value of
    the stacked flags, and is small when they nearly share a plane.
    """

    vectors: np.ndarray
    residual: np.ndarray
    separation: np.ndarray
    j: int
    horizon: int


def oseledets_directions(f, x, j, horizon=30, seed=0, min_separation=1e-8):
    """Unit vectors approximating ``E_j`` at each row of ``x``.

    The span of ``E_1, ..., E_j`` is the limit of a j-frame pushed forward
    from ``f^{-h} x``; the span of ``E_j, ..., E_d`` that of a
    (d-j+1)-frame pulled back from ``f^{h} x``.  Their intersection is the
    null vector of the stacked frames.

    Raises
    ------
    NumericFailureError
        If the flags are too close to intersect in a single line.
    """
    f = as_map(f)
    d = f.dim
    j = check_index(j, 1, d)
    horizon = check_positive_int(horizon, "horizon", minimum=0)
    rng = check_rng(seed)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n = x.shape[0]
    if horizon == 0:
        base = f.base if hasattr(f, "base") else f
        v = np.broadcast_to(base.eigenvectors[:, j - 1], (n, d)).copy()
        return OseledetsDirections(v, np.zeros(n), np.ones(n), j, 0)
    back, fwd = _orbit_segment(f, x, horizon)
    a = _push_flag(f, back, j, rng)
    # pulled back: solve with Df at the preimage of each point
    pts = fwd[::-1]
    q, _ = np.linalg.qr(rng.standard_normal((n, d, d)))
    b = q[:, :, : d - j + 1]
    for p in pts[1:]:
        _, jac = f.step(p)
        b, _ = np.linalg.qr(np.linalg.solve(jac, b))
    m = np.concatenate([a, -b], axis=2)
    _, s, vt = np.linalg.svd(m)
    coeff = vt[:, -1, :j]
    v = np.einsum("nij,nj->ni", a, coeff)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    # orient along the base eigenvector
    base = f.base if hasattr(f, "base") else f
    ref = base.eigenvectors[:, j - 1]
    v *= np.where(v @ ref < 0, -1.0, 1.0)[:, None]
    # [A, -B] has one more column than rows, so the null vector is exact;
    # the smallest singular value says how far it is from being two-dimensional
    bcoef = vt[:, -1, j:]
    w = np.einsum("nij,nj->ni", b, bcoef)
    residual = np.linalg.norm(np.einsum("nij,nj->ni", a, coeff) - w, axis=1)
    separation = s[:, -1]
    if np.any(separation < min_separation):
        k = int(np.argmin(separation))
        raise NumericFailureError("forward and backward flags are nearly degenerate",
                                  point=x[k], separation=float(separation[k]))
    return OseledetsDirections(v, residual, separation, j, horizon)


def oseledets_direction(f, x, j, horizon=30, seed=0):
    """Single-point form of :func:`oseledets_directions`."""
    x = np.asarray(x, dtype=float)
    res = oseledets_directions(f, x.reshape(1, -1), j, horizon, seed)
    return res.vectors[0]


def integral_exponent(f, j, samples=10_000, horizon=30, seed=0):
    """``lambda_j`` as the space average of ``log |Df(x) e_j(x)|``.

    Returns ``(mean, standard error)`` over uniform samples.
    """
    f = as_map(f)
    j = check_index(j, 1, f.dim)
    rng = check_rng(seed)
    x = rng.random((check_positive_int(samples, "samples"), f.dim))
    v = oseledets_directions(f, x, j, horizon, rng).vectors
    _, jac = f.step(x)
    vals = np.log(np.linalg.norm(np.einsum("nij,nj->ni", jac, v), axis=1))
    se = vals.std(ddof=1) / math.sqrt(vals.size) if vals.size > 1 else 0.0
    return float(vals.mean()), max(float(se), STDERR_FLOOR)


@dataclass(frozen=True, eq=False)
class FiniteLyapunovMetric:
    """N-step expansion rates ``chi_j`` of the Oseledets directions.

    ``chi[k, j-1]`` is ``(1/N) log |Df^N(x_k) e_j(x_k)|``; its space average
    is ``lambda_j`` for every N.  ``ordering_holds`` is the pointwise
    condition ``chi_1 > ... > chi_u > 0 > chi_{u+1} > ... > chi_d`` on all
    samples.
    """

    N: int
    points: np.ndarray = field(repr=False)
    chi: np.ndarray = field(repr=False)
    means: np.ndarray
    l1_deviation: np.ndarray
    violation_fraction: float
    ordering_holds: bool

    def to_json(self):
        return {"N": self.N, "samples": int(self.points.shape[0]),
                "means": self.means.tolist(), "l1_deviation": self.l1_deviation.tolist(),
                "violation_fraction": self.violation_fraction,
                "ordering_holds": self.ordering_holds}


def finite_metric(f, N, samples=2000, horizon=30, seed=0, u=None):
    """Finite-horizon Lyapunov rates at uniform sample points.

    The direction ``e_j`` is recomputed at every orbit point instead of
    being carried along, so that roundoff does not pull lower directions
    into the top one over long horizons.
    """
    f = as_map(f)
    N = check_positive_int(N, "N")
    samples = check_positive_int(samples, "samples")
    rng = check_rng(seed)
    d = f.dim
    base = f.base if hasattr(f, "base") else f
    u = base.unstable_index if u is None else u
    x0 = rng.random((samples, d))
    pts = [x0]
    for _ in range(N - 1):
        pts.append(f.evaluate(pts[-1]))
    allpts = np.vstack(pts)
    _, jac = f.step(allpts)
    chi = np.zeros((samples, d))
    for j in range(1, d + 1):
        v = oseledets_directions(f, allpts, j, horizon, rng).vectors
        g = np.log(np.linalg.norm(np.einsum("nij,nj->ni", jac, v), axis=1))
        chi[:, j - 1] = g.reshape(N, samples).mean(axis=0)
    means = chi.mean(axis=0)
    l1 = np.mean(np.abs(chi - means), axis=0)
    ordered = np.all(np.diff(chi, axis=1) < 0, axis=1)
    signs = (chi[:, u - 1] > 0) & (chi[:, u] < 0)
    ok = ordered & signs
    frac = 1.0 - float(np.mean(ok))
    return FiniteLyapunovMetric(N, x0, chi, means, l1, frac, bool(np.all(ok)))


def ordering_threshold(f, candidates=(1, 2, 4, 8, 16, 32), samples=2000, seed=0):
    """Smallest N among ``candidates`` with pointwise ordering on the sample.

    Returns ``(N or None, list of metrics)``; ``None`` means the ordering
    failed for every candidate, and the metrics show by how much.
    """
    metrics = []
    for n in candidates:
        m = finite_metric(f, n, samples, seed=seed)
        metrics.append(m)
        if m.ordering_holds:
            return n, metrics
    return None, metrics


# ----------------------------------------------------------------------
# length growth


@dataclass(frozen=True)
class LengthGrowth:
    """``log(length(f^n W) / length(W)) / n`` at the reached horizon."""

    rate: float
    horizon: int
    requested_horizon: int
    truncated: bool
    vertices: int
    lengths: np.ndarray = field(repr=False)

    def __float__(self):
        return self.rate


def _tangent_norms(f, x0, tangent, horizon):
    """``|Df^n(x) tangent|`` for n = 0..horizon at each start point."""
    n = x0.shape[0]
    out = np.empty((horizon + 1, n))
    v = np.broadcast_to(tangent, x0.shape).copy()
    out[0] = np.linalg.norm(v, axis=1)
    logscale = np.zeros(n)
    x = x0
    for k in range(1, horizon + 1):
        x, jac = f.step(x)
        v = np.einsum("nij,nj->ni", jac, v)
        s = np.linalg.norm(v, axis=1)
        logscale += np.log(s)
        v /= s[:, None]
        out[k] = logscale
    out[1:] = np.exp(out[1:])
    return out


def unstable_length_growth(f, x, horizon=20, initial_length=1.0, tol=1e-2,
                           max_vertices=2**20, seed=0):
    """Growth rate of a short unstable segment under iteration.

    The segment ``W`` is straight, centred at ``x`` and tangent to the
    approximate top Oseledets direction there.  The length of ``f^n W`` is
    the integral of ``|Df^n(w) tau|`` along ``W``, computed with the
    trapezoid rule on a uniform parameter grid that is doubled until every
    horizon's log-length changes by less than ``tol``, so the rate is good
    to ``tol / horizon``.  The default unit length lets the image spread
    over the torus; very short segments instead report a finite-time
    exponent at ``x``, which fluctuates from point to point.  If the grid
    would exceed ``max_vertices`` the result is reported at the largest
    horizon that did converge.

    Returns
    -------
    LengthGrowth
        ``rate`` is 0 for ``horizon == 0``.
    """
    f = as_map(f)
    horizon = check_positive_int(horizon, "horizon", minimum=0)
    x = np.asarray(x, dtype=float).reshape(-1)
    if horizon == 0:
        return LengthGrowth(0.0, 0, 0, False, 1, np.array([initial_length]))
    tau = oseledets_direction(f, x, 1, seed=seed)
    verts = 65
    prev = None
    converged = np.zeros(horizon + 1, dtype=bool)
    truncated = False
    while True:
        s = np.linspace(-0.5, 0.5, verts) * initial_length
        pts = np.mod(x + s[:, None] * tau, 1.0)
        norms = _tangent_norms(f, pts, tau, horizon)
        h = initial_length / (verts - 1)
        lengths = h * (norms.sum(axis=1) - 0.5 * (norms[:, 0] + norms[:, -1]))
        if prev is not None:
            converged = np.abs(np.log(lengths) - np.log(prev)) <= tol
            if np.all(converged):
                break
        prev = lengths
        if 2 * verts - 1 > max_vertices:
            truncated = True
            break
        verts = 2 * verts - 1
    reached = horizon
    if truncated:
        ok = np.flatnonzero(~converged)
        reached = int(ok[0]) - 1 if ok.size else horizon
        reached = max(reached, 0)
    rate = math.log(lengths[reached] / initial_length) / reached if reached else 0.0
    return LengthGrowth(rate, reached, horizon, truncated, verts, lengths / initial_length)


# ----------------------------------------------------------------------
# estimator wrapper


class SpectrumEstimator(BaseEstimator):
    """Estimator-style wrapper around :func:`estimate_spectrum`.

    ``fit`` takes a torus map in place of a data matrix; fitted attributes
    are ``spectrum_``, ``stderr_``, ``summed_`` and ``estimate_``.
    """

    def __init__(self, orbits=16, length=10_000, burn_in=100, seed=0, threads=1):
        self.orbits = orbits
        self.length = length
        self.burn_in = burn_in
        self.seed = seed
        self.threads = threads

    def fit(self, f, y=None):
        est = estimate_spectrum(f, self.orbits, self.length, self.burn_in, self.seed,
                                self.threads)
        self.estimate_ = est
        self.spectrum_ = est.values
        self.stderr_ = est.stderr
        self.summed_ = est.summed
        self.n_features_in_ = est.dim
        return self

    def transform(self, f):
        """Summed spectrum of another map with the same settings."""
        return estimate_spectrum(f, self.orbits, self.length, self.burn_in, self.seed,
                                 self.threads).summed
