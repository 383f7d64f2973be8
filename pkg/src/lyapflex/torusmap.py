"""Maps of the torus: a linear automorphism composed with localized deformations.

A :class:`ChartedBall` is the image of the unit ball under an affine chart
``z -> x_i + F (s_i z) (mod 1)``; inside it a :class:`DeformationLayer`
conjugates the model deformation by the chart.  A :class:`PerturbedMap` is
``L o g_1 o ... o g_k``: the most recent layer acts first.  One layer on a
linear base is the setting where the damping conditions can be checked
(rigorous mode); more layers come from iterated steering (empirical mode).

Cones are expressed in frame coordinates ``y = F^{-1} v`` with the first j
coordinates horizontal: ``H_j(tau) = {|y_>j| < tau |y_<=j|}`` and ``V_j``
the mirror image.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc

from ._validation import (
    check_index,
    check_positive,
    check_positive_int,
    check_rng,
    check_vector,
)
from .deformation import (
    ConeConstants,
    ModelDeformation,
    _jacobians_at,
    _rotate_plane,
    ball_volume,
    sample_ball,
)
from .exceptions import InvalidInputError, PlacementFailedError
from .lattice import HyperbolicAutomorphism, _mod1, matrix_from_json, matrix_to_json
from .majorization import gap

__all__ = [
    "ChartedBall",
    "DeformationLayer",
    "PerturbedMap",
    "InverseMap",
    "DampingParameters",
    "ConeField",
    "BallPlacement",
    "DampingReport",
    "ContractionReport",
    "as_map",
    "evaluate",
    "differential",
    "damping_horizon",
    "place_balls",
    "lattice_packing",
    "tower_conflicts",
    "check_damping",
    "cone_contraction_check",
    "horizontal_opening",
    "vertical_opening",
]


@dataclass(frozen=True, eq=False)
class ChartedBall:
    """Chart image ``x + F (s z)`` of the unit ball on the torus.

    The chart is accepted only if its image fits in a box of side < 1
    around the centre, which makes it injective mod 1 and lets points be
    lifted by taking the nearest representative.
    """

    center: np.ndarray
    radius: float
    frame: np.ndarray

    def __post_init__(self):
        c = _mod1(check_vector(self.center, "center", min_dim=2).copy())
        d = c.size
        f = np.array(self.frame, dtype=float)
        if f.shape != (d, d) or not np.all(np.isfinite(f)):
            raise InvalidInputError("frame must be a finite d x d matrix", field="frame")
        if abs(np.linalg.det(f)) < 1e-12:
            raise InvalidInputError("frame is singular", field="frame")
        r = check_positive(self.radius, "radius")
        halfwidth = r * np.linalg.norm(f, axis=1)
        if np.any(halfwidth >= 0.5):
            raise InvalidInputError(
                "chart image does not fit in a unit box; radius too large",
                field="radius", halfwidth=halfwidth,
            )
        c.setflags(write=False)
        f.setflags(write=False)
        inv = np.linalg.inv(f)
        inv.setflags(write=False)
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "frame", f)
        object.__setattr__(self, "radius", r)
        object.__setattr__(self, "_inv", inv)

    @property
    def dim(self):
        return self.center.size

    @property
    def frame_inverse(self):
        return self._inv

    @property
    def volume(self):
        return ball_volume(self.dim) * self.radius**self.dim * abs(np.linalg.det(self.frame))

    def to_chart(self, x):
        """Chart coordinates of torus points (nearest lift), unit ball = ball."""
        delta = np.asarray(x, dtype=float) - self.center
        delta -= np.round(delta)
        return (delta @ self._inv.T) / self.radius

    def from_chart(self, z):
        return _mod1(self.center + (self.radius * np.asarray(z)) @ self.frame.T)

    def contains(self, x):
        z = self.to_chart(x)
        return np.sum(z * z, axis=-1) < 1.0

    def sample(self, rng, n):
        return self.from_chart(sample_ball(rng, n, self.dim))

    def to_json(self):
        return {"center": self.center.tolist(), "radius": self.radius,
                "frame": self.frame.tolist()}

    @classmethod
    def from_json(cls, obj):
        return cls(np.array(obj["center"]), float(obj["radius"]), np.array(obj["frame"]))

    def __eq__(self, other):
        return (isinstance(other, ChartedBall) and self.radius == other.radius
                and np.array_equal(self.center, other.center)
                and np.array_equal(self.frame, other.frame))

    def __hash__(self):
        return hash((self.center.tobytes(), self.radius, self.frame.tobytes()))


def _balls_overlap(a, b):
    """Conservative test of whether two charted balls may intersect mod 1."""
    return bool(_ellipsoid_conflicts(a.center, a.radius * a.frame,
                                     b.center, b.radius * b.frame, margin=1.0))


@dataclass(frozen=True, eq=False)
class DeformationLayer:
    """One deformation ``g_t``: the model map transported into disjoint balls."""

    balls: tuple
    deformation: ModelDeformation
    mode: str = "empirical"
    check_disjoint: bool = field(default=True, compare=False, repr=False)

    def __post_init__(self):
        balls = tuple(self.balls)
        if not balls:
            raise InvalidInputError("a layer needs at least one ball", field="balls")
        d = self.deformation.dim
        if any(b.dim != d for b in balls):
            raise InvalidInputError("ball and deformation dimensions differ")
        if self.mode not in ("rigorous", "empirical"):
            raise InvalidInputError(f"unknown mode {self.mode!r}", field="mode")
        if self.check_disjoint:
            for i, j in itertools.combinations(range(len(balls)), 2):
                if _balls_overlap(balls[i], balls[j]):
                    raise InvalidInputError("balls overlap", pair=[i, j])
        object.__setattr__(self, "balls", balls)

    @property
    def dim(self):
        return self.deformation.dim

    @property
    def support_measure(self):
        return float(sum(b.volume for b in self.balls))

    def at(self, t):
        return DeformationLayer(self.balls, self.deformation.at(t), self.mode,
                                check_disjoint=False)

    # ball lookup ------------------------------------------------------
    def _index(self):
        """Arrays of chart data and a uniform grid of candidate balls."""
        idx = self.__dict__.get("_lookup")
        if idx is not None:
            return idx
        d = self.dim
        centers = np.array([b.center for b in self.balls])
        shapes = np.array([b.radius * b.frame for b in self.balls])
        inv = np.linalg.inv(shapes)
        half = np.array([b.radius * np.linalg.norm(b.frame, axis=1) for b in self.balls])
        g = int(1.0 / (2.0 * half.max()))
        g = max(1, min(g, int(round(2e5 ** (1.0 / d)))))
        table = {}
        for k in range(len(self.balls)):
            axes = []
            for i in range(d):
                lo = math.floor((centers[k, i] - half[k, i]) * g)
                hi = math.floor((centers[k, i] + half[k, i]) * g)
                axes.append(sorted({c % g for c in range(lo, hi + 1)}))
            for cell in itertools.product(*axes):
                table.setdefault(cell, []).append(k)
        width = max(len(v) for v in table.values())
        cand = np.full((g,) * d + (width,), -1, dtype=np.intp)
        for cell, ks in table.items():
            cand[cell + (slice(0, len(ks)),)] = ks
        idx = (centers, shapes, inv, g, cand)
        object.__setattr__(self, "_lookup", idx)
        return idx

    def _locate(self, x):
        """Ball index (or -1) and chart coordinates of every point."""
        centers, _, inv, g, cand = self._index()
        n, d = x.shape
        cell = np.minimum((x * g).astype(np.intp), g - 1)
        options = cand[tuple(cell.T)]
        which = np.full(n, -1, dtype=np.intp)
        z = np.zeros_like(x)
        for k in range(options.shape[1]):
            ball = options[:, k]
            rows = np.flatnonzero((ball >= 0) & (which < 0))
            if rows.size == 0:
                continue
            bk = ball[rows]
            delta = x[rows] - centers[bk]
            delta -= np.round(delta)
            zk = np.einsum("nij,nj->ni", inv[bk], delta)
            hit = np.sum(zk * zk, axis=1) < 1.0
            which[rows[hit]] = bk[hit]
            z[rows[hit]] = zk[hit]
        inside = which >= 0
        return which[inside], inside, z[inside]

    def _chart_back(self, which, z):
        centers, shapes, _, _, _ = self._index()
        return _mod1(centers[which] + np.einsum("nij,nj->ni", shapes[which], z))

    def _rotate(self, z, sign):
        m = self.deformation
        rho = m.profile.rho(np.sum(z * z, axis=-1))
        order = range(1, m.dim) if sign > 0 else range(m.dim - 1, 0, -1)
        for j in order:
            s = m.speeds[j - 1]
            if s:
                z = _rotate_plane(z, j, sign * s * rho)
        return z

    def apply(self, x):
        if self.deformation.is_identity:
            return x
        y = np.array(x, dtype=float, copy=True)
        which, inside, z = self._locate(y)
        if which.size:
            y[inside] = self._chart_back(which, self._rotate(z, 1))
        return y

    def inverse(self, x):
        if self.deformation.is_identity:
            return x
        y = np.array(x, dtype=float, copy=True)
        which, inside, z = self._locate(y)
        if which.size:
            y[inside] = self._chart_back(which, self._rotate(z, -1))
        return y

    def apply_with_jacobian(self, x, jac=None):
        """Return ``g(x)`` and ``Dg(x)``, optionally left-multiplied onto ``jac``."""
        d = self.dim
        n = x.shape[0]
        if self.deformation.is_identity:
            if jac is None:
                jac = np.broadcast_to(np.eye(d), (n, d, d)).copy()
            return x, jac
        y = np.array(x, dtype=float, copy=True)
        jac = np.broadcast_to(np.eye(d), (n, d, d)).copy() if jac is None else jac.copy()
        which, inside, z = self._locate(y)
        if which.size:
            _, shapes, inv, _, _ = self._index()
            m = self.deformation
            t = np.broadcast_to(np.asarray(m.t), (z.shape[0], d - 1))
            local = _jacobians_at(m, z, t)
            # the chart scale cancels: A Dh A^-1
            dg = shapes[which] @ local @ inv[which]
            jac[inside] = dg @ jac[inside]
            y[inside] = self._chart_back(which, self._rotate(z, 1))
        return y, jac

    def membership(self, x):
        """Index of the ball containing each point, or -1."""
        x = np.asarray(x, dtype=float)
        which, inside, _ = self._locate(x)
        idx = np.full(x.shape[0], -1)
        idx[inside] = which
        return idx

    def to_json(self):
        return {"mode": self.mode, "deformation": self.deformation.to_json(),
                "balls": [b.to_json() for b in self.balls]}

    @classmethod
    def from_json(cls, obj):
        return cls(tuple(ChartedBall.from_json(b) for b in obj["balls"]),
                   ModelDeformation.from_json(obj["deformation"]), obj.get("mode", "empirical"))


class PerturbedMap:
    """``f = L o g_1 o ... o g_k`` on the torus.

    Parameters
    ----------
    base : HyperbolicAutomorphism
    layers : sequence of DeformationLayer
        Applied last-to-first, so appending a layer gives ``f o g_new``.
    """

    def __init__(self, base, layers=()):
        if not isinstance(base, HyperbolicAutomorphism):
            raise InvalidInputError("base must be a HyperbolicAutomorphism", field="base")
        layers = tuple(layers)
        if any(layer.dim != base.dim for layer in layers):
            raise InvalidInputError("layer dimension differs from the base's")
        self.base = base
        self.layers = layers
        self.dim = base.dim

    def with_layer(self, layer):
        return PerturbedMap(self.base, self.layers + (layer,))

    @property
    def balls(self):
        return tuple(b for layer in self.layers for b in layer.balls)

    @property
    def support_measure(self):
        """Total volume of all deformation balls."""
        return float(sum(layer.support_measure for layer in self.layers
                         if not layer.deformation.is_identity))

    @property
    def mode(self):
        if not self.layers:
            return "linear"
        if len(self.layers) == 1 and self.layers[0].mode == "rigorous":
            return "rigorous"
        return "empirical"

    def evaluate(self, x):
        x, single = _points(x, self.dim)
        for layer in reversed(self.layers):
            x = layer.apply(x)
        y = self.base.evaluate(x)
        return y[0] if single else y

    def inverse(self, x):
        x, single = _points(x, self.dim)
        y = self.base.inverse(x)
        for layer in self.layers:
            y = layer.inverse(y)
        return y[0] if single else y

    def step(self, x):
        """Image and differential at once; ``x`` has shape (n, d)."""
        jac = None
        for layer in reversed(self.layers):
            x, jac = layer.apply_with_jacobian(x, jac)
        lm = self.base.float_matrix
        if jac is None:
            jac = np.broadcast_to(lm, (x.shape[0], self.dim, self.dim)).copy()
        else:
            jac = lm @ jac
        return self.base.evaluate(x), jac

    def differential(self, x):
        x, single = _points(x, self.dim)
        _, jac = self.step(x)
        return jac[0] if single else jac

    def support_membership(self, x):
        """Boolean mask: point lies in some ball of a non-trivial layer."""
        x, _ = _points(x, self.dim)
        mask = np.zeros(x.shape[0], dtype=bool)
        for layer in self.layers:
            if not layer.deformation.is_identity:
                mask |= layer.membership(x) >= 0
        return mask

    def to_json(self):
        return {"matrix": matrix_to_json(self.base.matrix), "mode": self.mode,
                "layers": [layer.to_json() for layer in self.layers]}

    @classmethod
    def from_json(cls, obj):
        base = HyperbolicAutomorphism(matrix_from_json(obj["matrix"]))
        return cls(base, tuple(DeformationLayer.from_json(x) for x in obj.get("layers", ())))

    def __repr__(self):
        return f"PerturbedMap(dim={self.dim}, layers={len(self.layers)}, mode={self.mode})"


class InverseMap:
    """The inverse of a torus map, exposing the same interface."""

    def __init__(self, f):
        self.forward = as_map(f)
        self.dim = self.forward.dim

    def evaluate(self, x):
        return self.forward.inverse(x)

    def inverse(self, x):
        return self.forward.evaluate(x)

    def step(self, x):
        y = self.forward.inverse(x)
        _, jac = self.forward.step(y)
        return y, np.linalg.inv(jac)

    def differential(self, x):
        x, single = _points(x, self.dim)
        _, jac = self.step(x)
        return jac[0] if single else jac


def as_map(f):
    """Promote an automorphism to a PerturbedMap; pass maps through."""
    if isinstance(f, HyperbolicAutomorphism):
        return PerturbedMap(f)
    if hasattr(f, "step") and hasattr(f, "dim"):
        return f
    raise InvalidInputError("expected a torus map", field="f")


def _points(x, d):
    arr = np.asarray(x, dtype=float)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != d:
        raise InvalidInputError(f"points must have shape (n, {d})", field="x")
    return arr, single


def evaluate(f, x):
    return as_map(f).evaluate(x)


def differential(f, x):
    return as_map(f).differential(x)


# ----------------------------------------------------------------------
# cones


def horizontal_opening(v, j):
    """``|v_>j| / |v_<=j|`` for frame-coordinate vectors (last axis)."""
    v = np.asarray(v, dtype=float)
    return np.linalg.norm(v[..., j:], axis=-1) / np.linalg.norm(v[..., :j], axis=-1)


def vertical_opening(v, j):
    v = np.asarray(v, dtype=float)
    return np.linalg.norm(v[..., :j], axis=-1) / np.linalg.norm(v[..., j:], axis=-1)


@dataclass(frozen=True)
class ConeField:
    """Horizontal/vertical cones of index ``j`` and opening ``tau`` in a
    constant frame."""

    j: int
    tau: float
    frame: np.ndarray = field(compare=False)

    def __post_init__(self):
        f = np.asarray(self.frame, dtype=float)
        check_index(self.j, 1, f.shape[0] - 1)
        check_positive(self.tau, "tau")
        object.__setattr__(self, "frame", f)
        object.__setattr__(self, "_inv", np.linalg.inv(f))

    def coordinates(self, v):
        return np.asarray(v, dtype=float) @ self._inv.T

    def in_horizontal(self, v):
        return horizontal_opening(self.coordinates(v), self.j) < self.tau

    def in_vertical(self, v):
        return vertical_opening(self.coordinates(v), self.j) < self.tau


# ----------------------------------------------------------------------
# damping parameters


@dataclass(frozen=True)
class DampingParameters:
    """Constants of one damping round.

    ``delta`` is ``delta0 / N`` and ``N0`` is computed from the cone
    constants and ``sigma``.  ``speeds`` are the per-coordinate weights
    ``a_j``; ``amplitudes`` the calibrated ``b_j``.
    """

    cones: ConeConstants
    sigma: float
    N: int
    delta0: float
    speeds: tuple
    amplitudes: tuple = ()
    eps: float = 0.0

    def __post_init__(self):
        check_positive(self.sigma, "sigma")
        check_positive_int(self.N, "N")
        check_positive(self.delta0, "delta0")
        object.__setattr__(self, "speeds", tuple(float(a) for a in self.speeds))
        object.__setattr__(self, "amplitudes", tuple(float(a) for a in self.amplitudes))
        if self.N < self.N0:
            raise InvalidInputError(
                f"tower height N={self.N} is below the damping horizon {self.N0}",
                field="N",
            )

    @property
    def N0(self):
        return damping_horizon(self.cones, self.sigma)

    @property
    def delta(self):
        return self.delta0 / self.N

    def __getattr__(self, name):
        if name in ("alpha", "beta", "gamma", "kappa", "nu"):
            return getattr(self.cones, name)
        raise AttributeError(name)

    def to_json(self):
        return {"cones": self.cones.to_json(), "sigma": self.sigma, "N": self.N,
                "N0": self.N0, "delta0": self.delta0, "delta": self.delta,
                "speeds": list(self.speeds), "amplitudes": list(self.amplitudes),
                "eps": self.eps}

    @classmethod
    def from_json(cls, obj):
        return cls(ConeConstants.from_json(obj["cones"]), float(obj["sigma"]), int(obj["N"]),
                   float(obj["delta0"]), tuple(obj["speeds"]), tuple(obj.get("amplitudes", ())),
                   float(obj.get("eps", 0.0)))


def damping_horizon(c, sigma):
    """``floor((2/sigma) log max(1/kappa, alpha/gamma)) + 2``.

    Examples
    --------
    >>> from lyapflex.deformation import ConeConstants
    >>> damping_horizon(ConeConstants(4.0, 2.0, 1.0, 0.5, 0.1), 0.96)
    4
    """
    sigma = float(sigma)
    if not sigma > 0 or not math.isfinite(sigma):
        raise InvalidInputError("sigma must be positive", field="sigma")
    worst = max(1.0 / c.kappa, c.alpha / c.gamma)
    return int(math.floor((2.0 / sigma) * math.log(worst))) + 2


# ----------------------------------------------------------------------
# tower geometry

_LAMBDA_GRID = np.exp(np.linspace(-12.0, 12.0, 241))


def _ellipsoid_conflicts(c1, a1, c2, a2, margin=1.0, limit=None):
    """Lattice shifts k for which ``c1 + a1 B`` and ``c2 + k + a2 B`` may meet.

    Uses the outer family ``E((1+1/l) S1 + (1+l) S2)`` of the Minkowski
    sum (S = A A^T); a shift is cleared as soon as one member of the family
    excludes the centre difference.  The family's intersection is the exact
    sum, so on the log-spaced grid the test is sharp up to grid resolution
    and never misses a true intersection.
    """
    s1 = (margin * a1) @ (margin * a1).T
    s2 = (margin * a2) @ (margin * a2).T
    diff = np.asarray(c2, dtype=float) - np.asarray(c1, dtype=float)
    half = np.sqrt(np.diag(s1)) + np.sqrt(np.diag(s2))
    ranges = [range(int(math.floor(-diff[i] - half[i])), int(math.ceil(-diff[i] + half[i])) + 1)
              for i in range(diff.size)]
    shifts = np.array(list(itertools.product(*ranges)), dtype=float)
    if shifts.size == 0:
        return []
    delta = diff + shifts
    keep = np.all(np.abs(delta) <= half + 1e-12, axis=1)
    delta, shifts = delta[keep], shifts[keep]
    if delta.shape[0] == 0:
        return []
    lam = _LAMBDA_GRID
    mats = (1.0 + 1.0 / lam)[:, None, None] * s1 + (1.0 + lam)[:, None, None] * s2
    inv = np.linalg.inv(mats)
    # quadratic form for every (shift, lambda) pair
    q = np.einsum("ni,lij,nj->nl", delta, inv, delta)
    hit = ~np.any(q > 1.0, axis=1)
    out = [tuple(int(v) for v in s) for s in shifts[hit]]
    return out if limit is None else out[:limit]


def _image_shape(matrix, ball, n):
    """Centre and shape matrix of ``L^n`` applied to a charted ball."""
    ln = np.linalg.matrix_power(matrix, n)
    return _mod1(ln @ ball.center), ln @ (ball.radius * ball.frame)


def tower_conflicts(balls, f, N, margin=1.0, first=False):
    """Witnesses of overlap among the first N images of the union of balls.

    Checks ``B_i`` against ``L^n B_k`` for ``0 <= n < N`` (n = 0 only for
    distinct balls), which covers every pair of levels of the tower.
    Returns a list of ``(i, k, n, lattice_shift)``.
    """
    f = f.base if hasattr(f, "base") else f
    m = np.array(f.float_matrix)
    out = []
    shapes = {}
    for n in range(N):
        for k, ball in enumerate(balls):
            shapes[(k, n)] = _image_shape(m, ball, n)
    for i, bi in enumerate(balls):
        ci, ai = shapes[(i, 0)]
        for k in range(len(balls)):
            for n in range(N):
                if n == 0 and k <= i:
                    continue
                ck, ak = shapes[(k, n)]
                hits = _ellipsoid_conflicts(ci, ai, ck, ak, margin=margin, limit=1)
                if hits:
                    out.append((i, k, n, hits[0]))
                    if first:
                        return out
    return out


@dataclass(frozen=True)
class BallPlacement:
    balls: tuple
    N: int
    radius: float
    margin: float
    support_measure: float
    ceiling: float
    candidates_tried: int

    def to_json(self):
        return {"balls": [b.to_json() for b in self.balls], "N": self.N,
                "radius": self.radius, "margin": self.margin,
                "support_measure": self.support_measure, "ceiling": self.ceiling,
                "candidates_tried": self.candidates_tried}


def _powers_mod(a, d, n):
    out = [np.ones_like(a)]
    for _ in range(d - 1):
        out.append((out[-1] * a) % n)
    return np.stack(out, axis=1)


def lattice_packing(frame, max_radius, sizes=12, fill=None, max_generators=4096):
    """Dense periodic packing of charted balls with a common frame.

    Searches rank-1 lattices ``{k g / n mod 1}`` with Korobov generators
    ``g = (1, a, a^2, ...) mod n``; every such lattice contains the integer
    lattice, so the packing is periodic on the torus.  Two balls of radius
    r with frame F are disjoint when their centres are at least 2r apart
    in the metric ``|F^-1 x|``, and the score of a lattice is its packing
    density in that metric.  ``n`` ranges over ``sizes`` values (or all
    values, when few) around the count giving density ``fill`` at
    ``max_radius``; at most ``max_generators`` multipliers are tried per
    count.  Only lifts
    by ``{-1, 0, 1}^d`` are compared, so very skew frames may overestimate
    the radius; :func:`place_balls` rejects any resulting overlap.

    Returns
    -------
    centres : ndarray, shape (n, d)
    radius : float
        At most ``max_radius``.

    Examples
    --------
    >>> c, r = lattice_packing(np.eye(2), 0.1, sizes=4)
    >>> len(c) * np.pi * r**2 > 0.8
    True
    """
    frame = np.asarray(frame, dtype=float)
    d = frame.shape[0]
    max_radius = check_positive(max_radius, "max_radius")
    fill = {2: 0.9, 3: 0.74}.get(d, 0.5) if fill is None else fill
    fi = np.linalg.inv(frame)
    unit = ball_volume(d) * abs(np.linalg.det(frame))
    lifts = np.array(list(itertools.product((-1.0, 0.0, 1.0), repeat=d)))
    n_star = fill / (unit * max_radius**d)
    best = None
    lo, hi = int(0.6 * n_star), int(math.ceil(1.3 * n_star))
    # small counts are cheap, so try all of them
    counts = range(lo, hi + 1) if hi - lo <= 4 * sizes else \
        np.unique(np.geomspace(lo, hi, sizes).astype(int))
    for n in counts:
        if n < 3:
            continue
        k = np.arange(1, n)
        mult = np.arange(1, n)
        if mult.size > max_generators:
            # large counts: a random subset of multipliers is nearly as good
            mult = np.sort(np.random.default_rng(n).choice(mult, max_generators, replace=False))
        gens = _powers_mod(mult, d, n)
        half = np.empty(len(gens))
        chunk = max(1, int(4e6 // (n * len(lifts) * d)))
        for lo in range(0, len(gens), chunk):
            g = gens[lo:lo + chunk]
            pts = (k[None, :, None] * g[:, None, :] % n) / n
            v = (pts[:, :, None, :] + lifts) @ fi.T
            half[lo:lo + chunk] = 0.5 * np.sqrt(np.min(np.sum(v * v, axis=-1), axis=(1, 2)))
        i = int(np.argmax(half))
        r = min(float(half[i]), max_radius)
        density = n * unit * r**d
        if best is None or density > best[0]:
            best = (density, n, gens[i], r)
    if best is None:
        raise PlacementFailedError("radius too large for a lattice packing", radius=max_radius)
    _, n, g, r = best
    centres = (np.arange(n)[:, None] * g[None, :] % n) / n
    return centres, r


def place_balls(f, N, radius, budget, *, frame=None, margin=2.0, candidates=4096,
                frames_at=None, shift_seed=None, centers=None, avoid=()):
    """Greedy tower construction on a low-discrepancy sequence of centres.

    A candidate centre is accepted when its ball, inflated by ``margin``,
    together with its first N-1 images under the linear part, avoids the
    inflated images of every ball accepted so far (and itself).

    Parameters
    ----------
    f : HyperbolicAutomorphism or PerturbedMap
        Only the linear part is used for the tower geometry.
    N : int
        Tower height; ``N = 1`` only asks for pairwise disjoint balls.
    radius : float
        Chart radius.
    budget : int
        Maximum number of balls.
    frame : array, optional
        Chart frame; defaults to the unit eigenvectors of the base.
    frames_at : callable, optional
        ``frames_at(centres) -> frames`` for position dependent frames
        (steering), called once on the whole candidate array with shape
        (n, d) and returning shape (n, d, d); overrides ``frame``.
    shift_seed : int, optional
        Translate the candidate sequence by a random vector mod 1, so that
        successive layers do not stack their balls on the same centres.
    centers : array, optional
        Explicit candidate centres, tried in order instead of the sequence.
    avoid : sequence of ChartedBall
        Balls already in use (say by earlier layers); new balls keep clear
        of their first N images.

    Raises
    ------
    PlacementFailedError
        When ``N`` balls of this radius cannot fit by volume or no candidate
        is accepted.
    """
    base = f.base if hasattr(f, "base") else f
    N = check_positive_int(N, "N")
    budget = check_positive_int(budget, "budget")
    radius = check_positive(radius, "radius")
    d = base.dim
    if frame is None:
        frame = base.eigenvectors
    vol = ball_volume(d) * radius**d * abs(np.linalg.det(frame))
    if N * vol >= 1.0:
        raise PlacementFailedError("tower of this height cannot fit by volume",
                                   N=N, ball_volume=vol)
    if centers is not None:
        seq = np.atleast_2d(np.asarray(centers, dtype=float))
        if seq.shape[1] != d:
            raise InvalidInputError("centres have the wrong dimension", field="centers")
    else:
        seq = qmc.Halton(d, scramble=False).random(candidates + 1)[1:]
    if shift_seed is not None:
        seq = _mod1(seq + np.random.default_rng(shift_seed).random(d))
    m = np.array(base.float_matrix)
    frames = None if frames_at is None else np.asarray(frames_at(seq))
    accepted = []
    images = []  # (centre, shape) of inflated levels of accepted balls
    box_c, box_hw = [], []  # bounding boxes of the same levels, for prefiltering
    for ball in avoid:
        for n in range(N):
            cn, an = _image_shape(m, ball, n)
            images.append((cn, an))
            box_c.append(cn)
            box_hw.append(margin * np.sqrt(np.sum(an * an, axis=1)))
    for tried, c in enumerate(seq, start=1):
        fr = frame if frames is None else frames[tried - 1]
        try:
            ball = ChartedBall(c, radius, fr)
        except InvalidInputError as exc:
            if frames is None:
                raise PlacementFailedError("chart does not fit at this radius") from exc
            continue
        levels = [_image_shape(m, ball, n) for n in range(N)]
        ok = True
        c0, a0 = levels[0]
        for n in range(1, N):
            if _ellipsoid_conflicts(c0, a0, *levels[n], margin=margin, limit=1):
                ok = False
                break
        if ok and images:
            hw_all = np.array(box_hw)
            c_all = np.array(box_c)
            for (cn, an) in levels:
                hw = margin * np.sqrt(np.sum(an * an, axis=1))
                gap = np.abs(_mod1(c_all - cn + 0.5) - 0.5)
                near = np.nonzero(np.all(gap <= hw + hw_all + 1e-12, axis=1))[0]
                for k in near:
                    if _ellipsoid_conflicts(cn, an, *images[k], margin=margin, limit=1):
                        ok = False
                        break
                if not ok:
                    break
        if not ok:
            continue
        accepted.append(ball)
        images.extend(levels)
        for (cn, an) in levels:
            box_c.append(cn)
            box_hw.append(margin * np.sqrt(np.sum(an * an, axis=1)))
        if len(accepted) >= budget:
            break
    if not accepted:
        raise PlacementFailedError("no admissible ball centre found", N=N, radius=radius)
    total = float(sum(b.volume for b in accepted))
    return BallPlacement(tuple(accepted), N, radius, margin, total, 1.0 / N, tried)


# ----------------------------------------------------------------------
# damping check


@dataclass
class DampingReport:
    passed: bool
    cone_mapping: bool
    projection_bounds: bool
    tower_disjoint: bool
    gap_condition: bool
    samples: int
    worst_horizontal_opening: float
    worst_vertical_opening: float
    worst_projection_ratio: float
    gap_value: float
    witnesses: dict = field(default_factory=dict)

    def to_dict(self):
        from .exceptions import _plain
        return {k: _plain(v) for k, v in self.__dict__.items()}


def _frame_differentials(layer, base, x):
    """Frame-coordinate differentials ``F^-1 Df F`` at points of the support."""
    fr = layer.balls[0].frame
    fi = layer.balls[0].frame_inverse
    x = np.asarray(x)
    _, jac = layer.apply_with_jacobian(x)
    full = base.float_matrix @ jac
    return fi @ full @ fr


def check_damping(f, p, samples=100_000, seed=0):
    """Sampled verification of the damping conditions for a one-layer map.

    Conditions (cone mapping and projection bounds) are tested on the
    support only, where the map differs from the linear base; the tower
    condition is tested exactly with ellipsoid geometry; for a linear base
    the averaged gap condition reduces to ``gap(lambda(L), u) >= sigma/2``.
    """
    f = as_map(f)
    rng = check_rng(seed)
    base = f.base
    d = f.dim
    u = base.unstable_index
    alpha, beta, kappa = p.cones.alpha, p.cones.beta, p.cones.kappa
    g = gap(base.spectrum, u)
    gap_ok = g >= p.sigma / 2.0
    witnesses = {}
    active = [layer for layer in f.layers if not layer.deformation.is_identity]
    if len(f.layers) > 1:
        raise InvalidInputError("damping check applies to a single deformation layer")
    if not active:
        return DampingReport(gap_ok, True, True, True, gap_ok, 0, 0.0, 0.0, 1.0, g,
                             {} if gap_ok else {"gap": g})
    layer = active[0]
    frames = np.array([b.frame for b in layer.balls])
    if not np.allclose(frames, base.eigenvectors, atol=1e-12):
        raise InvalidInputError("damping check needs eigenvector chart frames")

    per = max(1, samples // len(layer.balls))
    xs = np.vstack([b.sample(rng, per) for b in layer.balls])
    n = xs.shape[0]
    a = _frame_differentials(layer, base, xs)
    ainv = np.linalg.inv(a)
    worst_h = worst_v = 0.0
    worst_k = np.inf
    cone_ok = proj_ok = True
    for j in range(1, d):
        for scale in (1.0, 0.5):
            x = rng.standard_normal((n, j))
            x /= np.linalg.norm(x, axis=1, keepdims=True)
            y = rng.standard_normal((n, d - j))
            y /= np.linalg.norm(y, axis=1, keepdims=True)
            v = np.concatenate([x, scale * beta * y], axis=1)
            w = np.einsum("nij,nj->ni", a, v)
            op = horizontal_opening(w, j)
            k = int(np.argmax(op))
            worst_h = max(worst_h, float(op[k]))
            if op[k] >= alpha and cone_ok:
                cone_ok = False
                witnesses["cone_mapping"] = {"x": xs[k], "j": j, "vector": v[k]}
            ratio = np.linalg.norm(w[:, :j], axis=1) / np.linalg.norm(v[:, :j], axis=1)
            if j == u:
                k = int(np.argmin(ratio))
                worst_k = min(worst_k, float(ratio[k]))
                if ratio[k] < kappa and proj_ok:
                    proj_ok = False
                    witnesses["projection_bounds"] = {"x": xs[k], "vector": v[k]}
            v = np.concatenate([scale * beta * x, y], axis=1)
            w = np.einsum("nij,nj->ni", ainv, v)
            op = vertical_opening(w, j)
            k = int(np.argmax(op))
            worst_v = max(worst_v, float(op[k]))
            if op[k] >= alpha and cone_ok:
                cone_ok = False
                witnesses["cone_mapping"] = {"x": xs[k], "j": j, "vector": v[k],
                                             "vertical": True}
            if j == u:
                ratio = np.linalg.norm(w[:, j:], axis=1) / np.linalg.norm(v[:, j:], axis=1)
                k = int(np.argmin(ratio))
                worst_k = min(worst_k, float(ratio[k]))
                if ratio[k] < kappa and proj_ok:
                    proj_ok = False
                    witnesses["projection_bounds"] = {"x": xs[k], "vector": v[k],
                                                      "vertical": True}
    conflicts = tower_conflicts(layer.balls, base, p.N, first=True)
    tower_ok = not conflicts
    if conflicts:
        i, k, lvl, shift = conflicts[0]
        witnesses["tower_disjoint"] = {"ball": i, "other_ball": k, "iterate": lvl,
                                       "lattice_shift": list(shift)}
    if not gap_ok:
        witnesses["gap"] = g
    return DampingReport(
        passed=bool(cone_ok and proj_ok and tower_ok and gap_ok),
        cone_mapping=cone_ok, projection_bounds=proj_ok, tower_disjoint=tower_ok,
        gap_condition=gap_ok, samples=int(n),
        worst_horizontal_opening=worst_h, worst_vertical_opening=worst_v,
        worst_projection_ratio=worst_k, gap_value=g, witnesses=witnesses,
    )


# ----------------------------------------------------------------------
# cone contraction along orbits


@dataclass
class ContractionReport:
    j: int
    tau_in: float
    horizon: int
    samples: int
    max_step_factor_off_support: float
    predicted_factor: float
    settled_fraction: float
    gamma: float | None
    max_opening: float
    final_openings: np.ndarray = field(repr=False)

    def to_dict(self):
        out = dict(self.__dict__)
        out["final_openings"] = {"max": float(np.max(self.final_openings)),
                                 "median": float(np.median(self.final_openings))}
        return out


def _subspace_opening(frame_coords, j):
    """Opening of span(columns) as the operator norm of the graph map."""
    x = frame_coords[:, :j, :]
    y = frame_coords[:, j:, :]
    s = y @ np.linalg.inv(x)
    return np.linalg.norm(s, ord=2, axis=(1, 2))


def cone_contraction_check(f, j, tau_in, horizon, samples=1000, seed=0, gamma=None,
                           N=None):
    """Push j-planes on the boundary of ``H_j(tau_in)`` along random orbits.

    Openings are measured in the eigenvector frame of the base.  Off the
    support of the deformation a step contracts openings by
    ``exp(-(lambda_j - lambda_{j+1}))`` at most; the report gives the
    largest observed one-step factor there.  When ``gamma`` and ``N`` are
    given, ``settled_fraction`` is the share of orbit times after at least
    N consecutive steps off the support at which the opening is below gamma.
    """
    f = as_map(f)
    d = f.dim
    j = check_index(j, 1, d - 1)
    tau_in = float(tau_in)
    if not tau_in > 0:
        raise InvalidInputError("tau_in must be positive", field="tau_in")
    horizon = check_positive_int(horizon, "horizon")
    rng = check_rng(seed)
    base = f.base
    fr, fi = base.eigenvectors, np.linalg.inv(base.eigenvectors)
    x = rng.random((samples, d))
    # boundary planes: graph of S with |S| = tau_in; one sample is the
    # extremal plane tilted from e_j towards e_{j+1}
    s = rng.standard_normal((samples, d - j, j))
    s /= np.linalg.norm(s, ord=2, axis=(1, 2))[:, None, None]
    s[0] = 0.0
    s[0, 0, j - 1] = 1.0
    s *= tau_in
    frame_coords = np.concatenate([np.broadcast_to(np.eye(j), (samples, j, j)), s], axis=1)
    vecs = fr @ frame_coords
    opening = _subspace_opening(frame_coords, j)
    lam = base.spectrum.entries
    predicted = math.exp(-(lam[j - 1] - lam[j]))
    worst_off = 0.0
    max_open = float(np.max(opening))
    outside_run = np.zeros(samples, dtype=int)
    settled = total = 0
    for _ in range(horizon):
        inside = f.support_membership(x)
        x, jac = f.step(x)
        vecs = jac @ vecs
        q, _ = np.linalg.qr(vecs)
        vecs = q
        new_open = _subspace_opening(fi @ vecs, j)
        ratio = new_open / np.maximum(opening, 1e-300)
        off = ~inside & (opening > 1e-12)
        if np.any(off):
            worst_off = max(worst_off, float(np.max(ratio[off])))
        outside_run = np.where(inside, 0, outside_run + 1)
        opening = new_open
        max_open = max(max_open, float(np.max(opening)))
        if gamma is not None and N is not None:
            ready = outside_run >= N
            total += int(np.sum(ready))
            settled += int(np.sum(ready & (opening < gamma)))
    frac = settled / total if total else 1.0
    return ContractionReport(j, tau_in, horizon, samples, worst_off, predicted, frac,
                             gamma, max_open, opening)
