"""Volume preserving model deformation of the unit ball.

For a radial bump ``rho`` and amplitude ``s`` the elementary map
``h^(j)_s(z)`` rotates the ``(z_j, z_{j+1})`` plane by the angle
``s * rho(z)``.  The model deformation composes the d-1 elementary maps,
``h_t = h^(d-1) o ... o h^(1)`` with amplitudes ``b_j t_j``.  Each elementary
map preserves ``|z|``, hence ``rho`` is constant along the composition, the
map is a bijection of the ball and its inverse is explicit.

The top-left j x j minor of ``Dh_t(z)`` equals a single scalar factor
``Delta^(j)`` evaluated at the partial composition, and the ball average
of ``-log Delta`` at amplitude s, written ``Q(s)``, is what one round of
perturbation removes from the j-th summed exponent per unit volume.
"""

from __future__ import annotations

import functools
import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import roots_jacobi

from ._validation import check_index, check_positive, check_positive_int, check_rng
from .exceptions import (
    CalibrationFailedError,
    InvalidInputError,
    NumericFailureError,
    OutOfDomainError,
    TargetUnreachableError,
)

__all__ = [
    "BumpProfile",
    "ModelDeformation",
    "ConeConstants",
    "rotation",
    "apply_elementary",
    "elementary_jacobian",
    "apply",
    "inverse",
    "jacobian",
    "principal_minor",
    "delta",
    "q_of",
    "q_monte_carlo",
    "calibrate_amplitude",
    "calibrate_cones",
    "transversality_margin",
    "compound_matrix",
    "ball_volume",
    "sample_ball",
]

_DOMAIN_SLACK = 1e-12


def ball_volume(d):
    """Lebesgue volume of the unit ball in R^d."""
    return math.pi ** (d / 2) / math.gamma(d / 2 + 1)


def sample_ball(rng, n, d):
    """Uniform samples from the unit ball."""
    g = rng.standard_normal((n, d))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    r = rng.random(n) ** (1.0 / d)
    return g * r[:, None]


@dataclass(frozen=True)
class BumpProfile:
    """Radial bump ``rho(z) = c * exp(-1 / (1 - |z|^2))`` on the open unit ball.

    Parameters
    ----------
    c : float
        Height normalization.  Larger ``c`` buys larger exponent shifts
        per round at the price of the transversality margin.
    """

    c: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "c", check_positive(self.c, "c"))

    def rho(self, r2):
        """Profile as a function of the squared radius."""
        r2 = np.asarray(r2, dtype=float)
        inside = r2 < 1.0
        out = np.zeros_like(r2)
        q = 1.0 - r2[inside]
        out[inside] = self.c * np.exp(-1.0 / q)
        return out

    def drho_dr2(self, r2):
        """Derivative of the profile with respect to the squared radius."""
        r2 = np.asarray(r2, dtype=float)
        inside = r2 < 1.0
        out = np.zeros_like(r2)
        q = 1.0 - r2[inside]
        out[inside] = -self.c * np.exp(-1.0 / q) / (q * q)
        return out

    def __call__(self, z):
        z = np.asarray(z, dtype=float)
        return self.rho(np.sum(z * z, axis=-1))

    def gradient(self, z):
        z = np.asarray(z, dtype=float)
        g = 2.0 * self.drho_dr2(np.sum(z * z, axis=-1))
        return g[..., None] * z

    @property
    def sup(self):
        """Maximum of the profile, attained at the centre."""
        return self.c * math.exp(-1.0)

    @functools.cached_property
    def sup_gradient(self):
        """Maximum of ``|grad rho|`` over the ball (dense radial scan)."""
        r = np.linspace(0.0, 1.0, 20001)[:-1]
        return float(np.max(2.0 * r * np.abs(self.drho_dr2(r * r))))

    def to_json(self):
        return {"family": "exp(-1/(1-|z|^2))", "c": self.c, "sup": self.sup,
                "sup_gradient": self.sup_gradient}


def rotation(j, theta, d):
    """Rotation by ``theta`` in the ``(j, j+1)`` coordinate plane (1-based)."""
    d = check_positive_int(d, "d", minimum=2)
    j = check_index(j, 1, d - 1)
    r = np.eye(d)
    c, s = math.cos(theta), math.sin(theta)
    r[j - 1, j - 1] = c
    r[j - 1, j] = -s
    r[j, j - 1] = s
    r[j, j] = c
    return r


def _check_ball(z):
    z = np.asarray(z, dtype=float)
    if z.ndim == 0 or z.shape[-1] < 2:
        raise InvalidInputError("points must have dimension >= 2")
    r2 = np.sum(z * z, axis=-1)
    if np.any(r2 > 1.0 + _DOMAIN_SLACK) or not np.all(np.isfinite(r2)):
        raise OutOfDomainError("point outside the closed unit ball",
                               max_norm=float(np.sqrt(np.max(r2))))
    return z, r2


def _rotate_plane(z, j, angle):
    """Rotate coordinates (j-1, j) (0-based) of each row of z by ``angle``."""
    out = np.array(z, dtype=float, copy=True)
    c, s = np.cos(angle), np.sin(angle)
    a, b = z[..., j - 1], z[..., j]
    out[..., j - 1] = c * a - s * b
    out[..., j] = s * a + c * b
    return out


def apply_elementary(j, s, z, profile):
    """Elementary deformation: rotate the ``(z_j, z_{j+1})`` plane by ``s rho(z)``."""
    z, r2 = _check_ball(z)
    j = check_index(j, 1, z.shape[-1] - 1)
    return _rotate_plane(z, j, s * profile.rho(r2))


def elementary_jacobian(j, s, z, profile):
    """Derivative of :func:`apply_elementary` at ``z``.

    ``R_{s rho} + s (R'_{s rho} z) grad(rho)^T`` where ``R'`` is the angle
    derivative of the rotation.
    """
    z, r2 = _check_ball(z)
    d = z.shape[-1]
    j = check_index(j, 1, d - 1)
    theta = s * profile.rho(r2)
    c, sn = np.cos(theta), np.sin(theta)
    a, b = z[..., j - 1], z[..., j]
    jac = np.broadcast_to(np.eye(d), z.shape[:-1] + (d, d)).copy()
    jac[..., j - 1, j - 1] = c
    jac[..., j - 1, j] = -sn
    jac[..., j, j - 1] = sn
    jac[..., j, j] = c
    grad = profile.gradient(z)
    # angle derivative of the rotated pair
    da = -sn * a - c * b
    db = c * a - sn * b
    jac[..., j - 1, :] += s * da[..., None] * grad
    jac[..., j, :] += s * db[..., None] * grad
    return jac


def delta(j, s, z, profile):
    """Closed-form factor ``cos(s rho) - s d_j rho (z_j sin(s rho) + z_{j+1} cos(s rho))``.

    This is the (j, j) entry of the elementary Jacobian, and the ratio of
    consecutive principal minors of the model deformation.
    """
    z, r2 = _check_ball(z)
    j = check_index(j, 1, z.shape[-1] - 1)
    theta = s * profile.rho(r2)
    dj = 2.0 * profile.drho_dr2(r2) * z[..., j - 1]
    return np.cos(theta) - s * dj * (z[..., j - 1] * np.sin(theta) + z[..., j] * np.cos(theta))


@dataclass(frozen=True, eq=False)
class ModelDeformation:
    """The map ``h_{Bt}`` on the unit ball of R^d.

    Parameters
    ----------
    dim : int
    profile : BumpProfile
    t : array_like, shape (dim-1,)
        Parameter point in the unit cube.
    amplitudes : array_like, shape (dim-1,)
        The scaling ``b_j``; the effective amplitude of the j-th
        elementary map is ``b_j t_j``.
    """

    dim: int
    profile: BumpProfile = field(default_factory=BumpProfile)
    t: tuple = None
    amplitudes: tuple = None

    def __post_init__(self):
        d = check_positive_int(self.dim, "dim", minimum=2)
        for name in ("t", "amplitudes"):
            v = getattr(self, name)
            v = np.ones(d - 1) if v is None else np.asarray(v, dtype=float).reshape(-1)
            if v.size != d - 1:
                raise InvalidInputError(f"{name} must have {d - 1} entries", field=name)
            if np.any(v < 0) or np.any(v > 1) or not np.all(np.isfinite(v)):
                raise InvalidInputError(f"{name} must lie in [0, 1]", field=name)
            object.__setattr__(self, name, tuple(float(x) for x in v))

    @property
    def speeds(self):
        """Effective amplitudes ``b_j t_j``."""
        return np.asarray(self.amplitudes) * np.asarray(self.t)

    def at(self, t):
        """Same deformation at another parameter point."""
        return ModelDeformation(self.dim, self.profile, t, self.amplitudes)

    @property
    def is_identity(self):
        return not np.any(self.speeds)

    def __eq__(self, other):
        return (isinstance(other, ModelDeformation) and self.dim == other.dim
                and self.profile == other.profile and self.t == other.t
                and self.amplitudes == other.amplitudes)

    def __hash__(self):
        return hash((self.dim, self.profile, self.t, self.amplitudes))

    def to_json(self):
        return {"dim": self.dim, "c": self.profile.c, "t": list(self.t),
                "amplitudes": list(self.amplitudes)}

    @classmethod
    def from_json(cls, obj):
        return cls(int(obj["dim"]), BumpProfile(float(obj["c"])), obj["t"], obj["amplitudes"])

    def partial_compositions(self, z):
        """Points ``z^(0) = z, z^(1) = h^(1)(z), ..., z^(d-1) = h_t(z)``."""
        z, r2 = _check_ball(z)
        rho = self.profile.rho(r2)
        pts = [z]
        for j, s in enumerate(self.speeds, start=1):
            pts.append(_rotate_plane(pts[-1], j, s * rho))
        return pts


def _as_deformation(m, z):
    if m.dim != np.shape(z)[-1]:
        raise InvalidInputError("point dimension differs from the deformation's")
    return m


def apply(m, z):
    """Evaluate ``h_{Bt}(z)``; norm preserving."""
    _as_deformation(m, z)
    return m.partial_compositions(z)[-1]


def inverse(m, w):
    """Inverse of :func:`apply`.

    The rotations preserve ``|w|``, so ``rho`` at the preimage equals
    ``rho(w)`` and each elementary inverse is an explicit rotation by the
    negated angle.
    """
    _as_deformation(m, w)
    w, r2 = _check_ball(w)
    rho = m.profile.rho(r2)
    z = w
    for j in range(m.dim - 1, 0, -1):
        z = _rotate_plane(z, j, -m.speeds[j - 1] * rho)
    return z


def jacobian(m, z):
    """Analytic ``Dh_{Bt}(z)``: product of elementary Jacobians along the
    partial compositions."""
    _as_deformation(m, z)
    pts = m.partial_compositions(z)
    d = m.dim
    jac = np.broadcast_to(np.eye(d), np.shape(z)[:-1] + (d, d)).copy()
    for j, s in enumerate(m.speeds, start=1):
        if s == 0.0:
            continue
        jac = elementary_jacobian(j, s, pts[j - 1], m.profile) @ jac
    return jac


def principal_minor(m, z, j):
    """Top-left j x j minor of the Jacobian via the closed-form factor.

    Equals ``Delta^(j)_{b_j t_j}`` evaluated at ``z^(j-1)``.
    """
    _as_deformation(m, z)
    j = check_index(j, 1, m.dim - 1)
    pts = m.partial_compositions(z)
    return delta(j, m.speeds[j - 1], pts[j - 1], m.profile)


def compound_matrix(a, j):
    """j-th compound (exterior power) of a square matrix.

    Rows and columns are indexed by increasing j-subsets in lexicographic
    order, so entry (0, 0) is the top-left j x j minor.
    """
    a = np.asarray(a, dtype=float)
    n = a.shape[-1]
    j = check_index(j, 1, n)
    subsets = list(itertools.combinations(range(n), j))
    out = np.empty(a.shape[:-2] + (len(subsets), len(subsets)))
    for p, rows in enumerate(subsets):
        for q, cols in enumerate(subsets):
            out[..., p, q] = np.linalg.det(a[..., rows, :][..., :, cols])
    return out


# ----------------------------------------------------------------------
# Q(s)


_ANGULAR_MAX = 48


def _gauss_radial(n, d):
    x, w = np.polynomial.legendre.leggauss(n)
    r = 0.5 * (x + 1.0)
    return r, 0.5 * w * d * r ** (d - 1)


@functools.lru_cache(maxsize=64)
def _shell_nodes(n, d):
    """Nodes for averaging a function of (z_1, z_2, |z|) over the unit ball.

    The radial order is ``n``; the angular orders stop growing at 48,
    which already resolves the smooth angular dependence to ~1e-13.

    For a uniform point on the sphere of R^d the squared length ``u`` of
    its projection to the first two coordinates has density proportional
    to ``(1-u)^{(d-4)/2}``; the angle in that plane is uniform.
    """
    r, wr = _gauss_radial(n, d)
    na = min(n, _ANGULAR_MAX)
    phi = 2.0 * np.pi * np.arange(2 * na) / (2 * na)
    wphi = np.full(phi.size, 1.0 / phi.size)
    if d == 2:
        u, wu = np.ones(1), np.ones(1)
    else:
        x, w = roots_jacobi(na, (d - 4) / 2.0, 0.0)
        u, wu = 0.5 * (1.0 + x), w / w.sum()
    R, U, P = np.meshgrid(r, u, phi, indexing="ij")
    W = wr[:, None, None] * wu[None, :, None] * wphi[None, None, :]
    rad = R * np.sqrt(U)
    return R.ravel(), (rad * np.cos(P)).ravel(), (rad * np.sin(P)).ravel(), W.ravel()


@functools.lru_cache(maxsize=16)
def _tensor_nodes(n, d):
    """Full product rule over the ball for d = 2 or 3 (no symmetry used)."""
    r, wr = _gauss_radial(n, d)
    na = min(n, _ANGULAR_MAX)
    phi = 2.0 * np.pi * np.arange(2 * na) / (2 * na)
    wphi = np.full(phi.size, 1.0 / phi.size)
    if d == 2:
        R, P = np.meshgrid(r, phi, indexing="ij")
        W = wr[:, None] * wphi[None, :]
        pts = np.stack([R * np.cos(P), R * np.sin(P)], axis=-1)
    else:
        x, w = np.polynomial.legendre.leggauss(na)
        R, X, P = np.meshgrid(r, x, phi, indexing="ij")
        W = wr[:, None, None] * (0.5 * w)[None, :, None] * wphi[None, None, :]
        s = np.sqrt(1.0 - X * X)
        pts = np.stack([R * s * np.cos(P), R * s * np.sin(P), R * X], axis=-1)
    return pts.reshape(-1, d), W.ravel()


def _log_delta_checked(values):
    if np.any(values <= 0.0):
        raise NumericFailureError(
            "principal-minor factor is not positive (transversality lost)",
            min_value=float(np.min(values)),
        )
    return np.log(values)


def _q_shell(s, profile, d, n):
    r, z1, z2, w = _shell_nodes(n, d)
    r2 = r * r
    theta = s * profile.rho(r2)
    d1 = 2.0 * profile.drho_dr2(r2) * z1
    vals = np.cos(theta) - s * d1 * (z1 * np.sin(theta) + z2 * np.cos(theta))
    return -float(np.dot(w, _log_delta_checked(vals)))


def _q_tensor(s, profile, d, n, j):
    pts, w = _tensor_nodes(n, d)
    return -float(np.dot(w, _log_delta_checked(delta(j, s, pts, profile))))


@functools.lru_cache(maxsize=8192)
def _q_cached(s, c, d, j, method, tol):
    profile = BumpProfile(c)
    prev = None
    n = 8
    limit = 512
    while n <= limit:
        if method == "shell":
            val = _q_shell(s, profile, d, n)
        else:
            val = _q_tensor(s, profile, d, n, j)
        if prev is not None and abs(val - prev) < tol:
            return val
        prev = val
        n *= 2
    raise NumericFailureError("quadrature for Q did not converge", s=s, c=c, dim=d)


def q_of(s, profile, dim=2, j=1, method="shell", tol=1e-9):
    """Ball average of ``-log Delta^(j)_s``.

    Parameters
    ----------
    s : float
        Amplitude in [0, 1].
    profile : BumpProfile
    dim : int
        Dimension of the ball.
    j : int
        Index of the elementary map.  The value does not depend on it; the
        ``"tensor"`` method (dimensions 2 and 3 only) integrates the
        j-th factor on a full product grid so this can be checked.
    method : {"shell", "tensor"}
        ``"shell"`` uses the reduction to the law of ``(z_j, z_{j+1}, |z|)``:
        Gauss-Legendre in the radius, Gauss-Jacobi in the projected squared
        length, trapezoid in the angle.  The order doubles until two
        successive values differ by less than ``tol``.
    """
    s = float(s)
    if not 0.0 <= s <= 1.0:
        raise InvalidInputError("s must lie in [0, 1]", field="s", value=s)
    dim = check_positive_int(dim, "dim", minimum=2)
    j = check_index(j, 1, dim - 1)
    if method not in ("shell", "tensor"):
        raise InvalidInputError(f"unknown quadrature method {method!r}", field="method")
    if method == "tensor" and dim > 3:
        raise InvalidInputError("tensor quadrature supports dim <= 3", field="method")
    if s == 0.0:
        return 0.0
    key_j = j if method == "tensor" else 1
    return _q_cached(s, profile.c, dim, key_j, method, float(tol))


def q_monte_carlo(s, profile, dim=2, samples=10**7, seed=0, j=1, chunk=10**6):
    """Plain Monte Carlo estimate of Q(s) with its standard error."""
    rng = check_rng(seed)
    total = total_sq = 0.0
    done = 0
    while done < samples:
        n = min(chunk, samples - done)
        z = sample_ball(rng, n, dim)
        v = -np.log(delta(j, s, z, profile))
        total += float(v.sum())
        total_sq += float(np.dot(v, v))
        done += n
    mean = total / samples
    var = max(total_sq / samples - mean * mean, 0.0)
    return mean, math.sqrt(var / samples)


@functools.lru_cache(maxsize=64)
def _q_grid(c, d, n=200):
    profile = BumpProfile(c)
    s = np.linspace(0.0, 1.0, n)
    return s, np.array([q_of(v, profile, d) for v in s])


def calibrate_amplitude(target, profile, dim=2, tol=1e-9):
    """Least ``s`` in [0, 1] with ``Q(s) = target``.

    Monotonicity of Q is checked on a 200-point grid; the first grid cell
    reaching the target is then bisected, which yields the least preimage
    even when Q is not monotone.

    Raises
    ------
    TargetUnreachableError
        If ``target > Q(1)``.
    """
    target = float(target)
    if target < 0:
        raise InvalidInputError("target must be non-negative", field="target")
    if target == 0.0:
        return 0.0
    grid, values = _q_grid(profile.c, dim)
    top = float(values.max())
    if target > top + tol:
        raise TargetUnreachableError(
            "target exceeds the largest reachable Q; shrink the scaling",
            target=target, q_max=top,
        )
    k = int(np.argmax(values >= target - tol))
    if k == 0:
        return 0.0
    if abs(values[k] - target) < tol and (k == grid.size - 1 or np.all(np.diff(values) > 0)):
        return float(grid[k])
    lo, hi = float(grid[k - 1]), float(grid[k])
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        q = q_of(mid, profile, dim)
        if abs(q - target) < tol:
            return mid
        if q < target:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-15:
            break
    return 0.5 * (lo + hi)


def q_is_monotone(profile, dim=2):
    """Whether Q increases along the 200-point calibration grid."""
    _, values = _q_grid(profile.c, dim)
    return bool(np.all(np.diff(values) > 0))


def transversality_margin(profile, dim, amplitudes=None, samples=20000, seed=0):
    """Smallest sampled value of the minor factor over the ball and all
    amplitudes up to ``max(amplitudes)``.

    Every principal minor of every ``h_{Bt}`` is such a factor at some
    point of the ball, so a positive margin means transversality holds
    at the sampled points.
    """
    rng = check_rng(seed)
    top = 1.0 if amplitudes is None else float(np.max(amplitudes))
    if top == 0.0:
        return 1.0
    z = sample_ball(rng, samples, dim)
    # the factor only sees (z_1, z_2, |z|): add a dense planar slice
    g = np.linspace(-1, 1, 201)
    gx, gy = np.meshgrid(g, g)
    keep = gx**2 + gy**2 < 1
    plane = np.zeros((int(keep.sum()), dim))
    plane[:, 0], plane[:, 1] = gx[keep], gy[keep]
    z = np.vstack([z, plane])
    worst = np.inf
    for s in np.linspace(0.0, top, 41)[1:]:
        worst = min(worst, float(np.min(delta(1, s, z, profile))))
    return worst


def calibrate_profile(dim, c_start=3.0, floor=0.1, max_halvings=20, seed=0):
    """Backtracking halving of the profile height until the sampled
    transversality margin is at least ``floor`` at full amplitude."""
    c = float(c_start)
    for _ in range(max_halvings):
        profile = BumpProfile(c)
        if transversality_margin(profile, dim, seed=seed) >= floor:
            return profile
        c *= 0.5
    raise CalibrationFailedError("no admissible profile height found", c_start=c_start)


# ----------------------------------------------------------------------
# cone constants


@dataclass(frozen=True)
class ConeConstants:
    """Cone openings and bounds for one deformation.

    ``alpha > beta > gamma > 0`` are openings of horizontal cones
    ``{|y| < tau |x|}`` with x the first j coordinates; ``kappa`` bounds the
    shrinking of the x-part; ``nu`` is the tolerance of the minor estimate
    for j-planes inside the gamma cone.
    """

    alpha: float
    beta: float
    gamma: float
    kappa: float
    nu: float
    report: dict = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if not (self.alpha > self.beta > self.gamma > 0):
            raise InvalidInputError("cone openings must satisfy alpha > beta > gamma > 0")
        if not (0 < self.kappa <= 1):
            raise InvalidInputError("kappa must lie in (0, 1]")
        if not self.nu > 0:
            raise InvalidInputError("nu must be positive")

    def to_json(self):
        out = {k: getattr(self, k) for k in ("alpha", "beta", "gamma", "kappa", "nu")}
        if self.report is not None:
            out["report"] = self.report
        return out

    @classmethod
    def from_json(cls, obj):
        return cls(*(float(obj[k]) for k in ("alpha", "beta", "gamma", "kappa", "nu")))


def _unit_rows(rng, n, k):
    if k == 0:
        return np.zeros((n, 0))
    v = rng.standard_normal((n, k))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _calibration_points(m, grid_per_dim, random_draws, rng):
    d = m.dim
    # keep the regular grid below ~4e4 points in high dimension
    per = min(grid_per_dim, max(4, int(round(40000 ** (1.0 / d)))))
    axis = np.linspace(-1.0, 1.0, per)
    grid = np.array(list(itertools.product(axis, repeat=d)))
    grid = grid[np.sum(grid * grid, axis=1) < 1.0]
    corners = np.array(list(itertools.product((0.0, 1.0), repeat=d - 1)))
    corners = corners[np.any(corners > 0, axis=1)]
    t_grid = corners[np.arange(grid.shape[0]) % corners.shape[0]]
    z_rand = sample_ball(rng, random_draws, d)
    t_rand = rng.random((random_draws, d - 1))
    return np.vstack([grid, z_rand]), np.vstack([t_grid, t_rand])


def _jacobians_at(m, z, t):
    """Jacobians of ``h_{B t_k}`` at ``z_k`` for paired rows."""
    d = m.dim
    b = np.asarray(m.amplitudes)
    speeds = t * b
    r2 = np.sum(z * z, axis=1)
    rho = m.profile.rho(r2)
    jac = np.broadcast_to(np.eye(d), (z.shape[0], d, d)).copy()
    pt = z
    for j in range(1, d):
        s = speeds[:, j - 1]
        theta = s * rho
        c, sn = np.cos(theta), np.sin(theta)
        a, bb = pt[:, j - 1], pt[:, j]
        ej = np.broadcast_to(np.eye(d), (z.shape[0], d, d)).copy()
        ej[:, j - 1, j - 1] = c
        ej[:, j - 1, j] = -sn
        ej[:, j, j - 1] = sn
        ej[:, j, j] = c
        grad = m.profile.gradient(pt)
        ej[:, j - 1, :] += (s * (-sn * a - c * bb))[:, None] * grad
        ej[:, j, :] += (s * (c * a - sn * bb))[:, None] * grad
        jac = ej @ jac
        pt = _rotate_plane(pt, j, theta)
    return jac


def calibrate_cones(m, nu, *, margin=2.0, grid_per_dim=32, random_draws=100_000,
                    directions=4, gamma_cap=0.99, seed=0):
    """Sampled cone constants for the deformation family ``h_{Bt}``, t in the cube.

    For each coordinate split j the routine looks for the smallest ``alpha``
    on the grid ``2 * 1.05^k`` such that, with ``beta = 1/alpha``, images of
    the boundary of the beta cone have opening at most ``alpha / margin``
    (and likewise for vertical cones under the inverse).  ``kappa`` is the
    smallest sampled ratio ``|P_j Dh v| / |P_j v|`` over the beta cone,
    divided by ``margin``.  ``gamma`` is the largest opening (capped at
    ``gamma_cap * beta``) for which j-planes in the gamma cone satisfy
    ``margin * |log(det_j(Dh restricted) / det_j Dh)| <= nu``.

    Raises
    ------
    CalibrationFailedError
        With the offending sample when no admissible constants exist.
    """
    nu = check_positive(nu, "nu")
    rng = check_rng(seed)
    d = m.dim
    z, t = _calibration_points(m, grid_per_dim, random_draws, rng)
    n = z.shape[0]
    if m.is_identity:
        jac = np.broadcast_to(np.eye(d), (n, d, d)).copy()
    else:
        jac = _jacobians_at(m, z, t)
    jinv = np.linalg.inv(jac)

    dirs = []
    for j in range(1, d):
        xs = [_unit_rows(rng, n, j) for _ in range(directions)]
        ys = [_unit_rows(rng, n, d - j) for _ in range(directions)]
        dirs.append((xs, ys))

    def openings(beta):
        worst_h = worst_v = 0.0
        kappa = np.inf
        witness = None
        for j in range(1, d):
            xs, ys = dirs[j - 1]
            for x, y in zip(xs, ys):
                for scale in (1.0, 0.5):
                    v = np.concatenate([x, scale * beta * y], axis=1)
                    w = np.einsum("nij,nj->ni", jac, v)
                    op = np.linalg.norm(w[:, j:], axis=1) / np.linalg.norm(w[:, :j], axis=1)
                    k = int(np.argmax(op))
                    if op[k] > worst_h:
                        worst_h = float(op[k])
                        witness = ("horizontal", j, z[k], t[k], v[k])
                    kappa = min(kappa, float(np.min(np.linalg.norm(w[:, :j], axis=1))))
                    v = np.concatenate([scale * beta * x, y], axis=1)
                    w = np.einsum("nij,nj->ni", jinv, v)
                    op = np.linalg.norm(w[:, :j], axis=1) / np.linalg.norm(w[:, j:], axis=1)
                    k = int(np.argmax(op))
                    if op[k] > worst_v:
                        worst_v = float(op[k])
                    kappa = min(kappa, float(np.min(np.linalg.norm(w[:, j:], axis=1))))
        return worst_h, worst_v, kappa, witness

    alpha = None
    for k in range(400):
        cand = 2.0 * 1.05**k
        worst_h, worst_v, kap, witness = openings(1.0 / cand)
        if margin * max(worst_h, worst_v) <= cand:
            alpha = cand
            break
    if alpha is None:
        raise CalibrationFailedError(
            "no cone opening is preserved by the sampled Jacobians",
            kind_of_cone=witness[0], j=witness[1], z=witness[2], t=witness[3],
            vector=witness[4],
        )
    beta = 1.0 / alpha
    kappa = min(1.0, kap) / margin

    # j-planes in the gamma cone are graphs of maps S with |S| < gamma
    dev_parts = []
    for j in range(1, d):
        s0 = rng.standard_normal((n, d - j, j))
        s0 /= np.linalg.norm(s0, ord=2, axis=(1, 2))[:, None, None]
        a_xx = jac[:, :j, :j]
        a_xy = jac[:, :j, j:]
        dev_parts.append(np.linalg.solve(a_xx, a_xy) @ s0)

    def deviation(g):
        worst, where = 0.0, None
        for j, core in enumerate(dev_parts, start=1):
            det = np.linalg.det(np.eye(j) + g * core)
            if np.any(det <= 0):
                return np.inf, (j, int(np.argmin(det)))
            dev = np.abs(np.log(det))
            k = int(np.argmax(dev))
            if dev[k] > worst:
                worst, where = float(dev[k]), (j, k)
        return worst, where

    g_hi = gamma_cap * beta
    dev, where = deviation(g_hi)
    if margin * dev <= nu:
        gamma = g_hi
    else:
        lo, hi = 0.0, g_hi
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if margin * deviation(mid)[0] <= nu:
                lo = mid
            else:
                hi = mid
        gamma = lo
        if gamma <= 0.0:
            j, k = where
            raise CalibrationFailedError(
                "minor estimate fails for every cone opening", j=j, z=z[k], t=t[k]
            )
    dev, _ = deviation(gamma)
    report = {
        "samples": int(n),
        "margin": margin,
        "max_horizontal_image_opening": worst_h,
        "max_vertical_image_opening": worst_v,
        "min_projection_ratio": kap,
        "minor_deviation_at_gamma": dev,
    }
    return ConeConstants(alpha, beta, gamma, kappa, nu, report=report)
