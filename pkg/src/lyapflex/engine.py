"""Perturbation rounds and steering of Lyapunov spectra.

A round inserts one deformation layer into a torus map.  Its predicted
effect on the summed exponents is ``-m(Z) Q(b_j t_j)`` per coordinate,
with an uncertainty of ``m(Z) nu``.  Steering chains rounds along
straight waypoints in the summed coordinates, choosing each round's
parameter point by a damped secant search against measured spectra.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import qmc
from sklearn.base import BaseEstimator

from ._validation import ANALYTIC_TOL, check_index, check_positive, check_positive_int, check_rng
from .deformation import (
    BumpProfile,
    ModelDeformation,
    calibrate_amplitude,
    calibrate_cones,
    principal_minor,
    q_of,
)
from .exceptions import (
    GapViolationError,
    InvalidInputError,
    InvalidTargetError,
    SteeringStalledError,
    TargetUnreachableError,
)
from .lattice import HyperbolicAutomorphism
from .majorization import gap, validate_target
from .spectrum import _push_flag, _orbit_segment, estimate_spectrum, oseledets_directions
from .torusmap import (
    DampingParameters,
    DeformationLayer,
    PerturbedMap,
    as_map,
    cone_contraction_check,
    damping_horizon,
    lattice_packing,
    place_balls,
)

__all__ = [
    "DEFAULT_PROFILE",
    "EstimatorConfig",
    "PerturbationRound",
    "ShiftPrediction",
    "ShiftMeasurement",
    "PsiReport",
    "BoundaryReport",
    "SteeringConfig",
    "StepResult",
    "SteeringPlan",
    "design_round",
    "build_round",
    "predict_shift",
    "measure_shift",
    "psi_check",
    "boundary_check",
    "boundary_check_T3",
    "steer",
    "steer_foliated_T3",
    "Steerer",
]

# c = 1 leaves Q(1) too small to move exponents by useful amounts per round
DEFAULT_PROFILE = BumpProfile(3.0)


@dataclass(frozen=True)
class EstimatorConfig:
    """Orbit settings used whenever the engine measures a spectrum."""

    orbits: int = 64
    length: int = 2000
    burn_in: int = 50
    seed: int = 0
    threads: int = 1

    def estimate(self, f, seed=None):
        return estimate_spectrum(f, self.orbits, self.length, self.burn_in,
                                 self.seed if seed is None else seed, self.threads)

    def to_json(self):
        return dict(self.__dict__)


def _exact_estimate(f):
    """Spectrum of a linear map in the estimator's result format."""
    base = f.base if hasattr(f, "base") else f
    lam = base.spectrum.entries
    d = lam.size
    from .spectrum import STDERR_FLOOR, SpectrumEstimate

    return SpectrumEstimate(lam.copy(), np.full(d, STDERR_FLOOR), np.cumsum(lam)[:-1],
                            np.full(d - 1, STDERR_FLOOR), 0, 0, 0, None, lam[None, :])


def _measure(f, config, seed=None):
    f = as_map(f)
    if not getattr(f, "layers", ()) or all(l.deformation.is_identity for l in f.layers):
        return _exact_estimate(f)
    return config.estimate(f, seed)


# ----------------------------------------------------------------------
# one round


@dataclass(frozen=True, eq=False)
class PerturbationRound:
    """A deformation layer together with the map it perturbs.

    ``params`` is present in rigorous mode, where the tower satisfies
    ``N >= N0`` and the layer is meant to pass :func:`check_damping`.
    """

    f: object
    balls: tuple
    amplitudes: tuple
    t: tuple
    mode: str = "rigorous"
    profile: BumpProfile = DEFAULT_PROFILE
    params: DampingParameters = None
    nu: float = None

    def __post_init__(self):
        d = self.f.dim
        if len(self.amplitudes) != d - 1 or len(self.t) != d - 1:
            raise InvalidInputError("amplitudes and t need d-1 entries")
        if self.mode not in ("rigorous", "empirical"):
            raise InvalidInputError(f"unknown mode {self.mode!r}", field="mode")
        object.__setattr__(self, "t", tuple(float(v) for v in self.t))
        object.__setattr__(self, "amplitudes", tuple(float(v) for v in self.amplitudes))
        if self.nu is None and self.params is not None:
            object.__setattr__(self, "nu", self.params.cones.nu)

    @property
    def dim(self):
        return self.f.dim

    @property
    def deformation(self):
        return ModelDeformation(self.dim, self.profile, self.t, self.amplitudes)

    @property
    def layer(self):
        return DeformationLayer(self.balls, self.deformation, self.mode, check_disjoint=False)

    @property
    def support_measure(self):
        return float(sum(b.volume for b in self.balls))

    def at(self, t):
        return replace(self, t=tuple(float(v) for v in np.broadcast_to(t, (self.dim - 1,))))

    def to_json(self):
        return {
            "map": as_map(self.f).to_json(),
            "mode": self.mode,
            "profile_c": self.profile.c,
            "amplitudes": list(self.amplitudes),
            "t": list(self.t),
            "nu": self.nu,
            "support_measure": self.support_measure,
            "balls": [b.to_json() for b in self.balls],
            "params": None if self.params is None else self.params.to_json(),
        }

    @classmethod
    def from_json(cls, obj):
        from .torusmap import ChartedBall

        params = obj.get("params")
        return cls(
            PerturbedMap.from_json(obj["map"]),
            tuple(ChartedBall.from_json(b) for b in obj["balls"]),
            tuple(obj["amplitudes"]), tuple(obj["t"]), obj["mode"],
            BumpProfile(float(obj["profile_c"])),
            None if params is None else DampingParameters.from_json(params),
            obj.get("nu"),
        )


def lyapunov_frames(f, x, N=8, horizon=30, seed=0):
    """Chart frames at the rows of ``x`` adapted to an N-step Lyapunov metric.

    Column j is the Oseledets direction ``e_j(x)`` scaled to unit length
    in the norm ``prod_{n<N} |Df^n(x) v|^{1/N}``, under which the one-step
    expansion along ``E_j`` is the N-step average ``theta_j^(N)/N``.  A
    constant factor per direction (the sample mean) is divided out so that
    for a linear map the frame is the unit eigenvector frame.
    """
    f = as_map(f)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    d = f.dim
    cols = np.stack([oseledets_directions(f, x, j, horizon, seed).vectors
                     for j in range(1, d + 1)], axis=2)
    # log of the geometric-average norm of each unit column
    theta = np.zeros((x.shape[0], d))
    y, v = x, cols.copy()
    logn = np.zeros((x.shape[0], d))
    for n in range(1, N):
        y, jac = f.step(y)
        v = jac @ v
        s = np.linalg.norm(v, axis=1)
        logn += np.log(s)
        v /= s[:, None, :]
        theta += logn
    theta /= N
    theta -= theta.mean(axis=0)
    return cols * np.exp(-theta)[:, None, :]


def _frames_for(f, kind, N=8, seed=0):
    """Batched frame callable for ball placement on a perturbed map."""
    f = as_map(f)

    def frames(x):
        if kind == "lyapunov":
            return lyapunov_frames(f, x, N, seed=seed)
        cols = np.stack([oseledets_directions(f, x, j, 30, seed).vectors
                         for j in range(1, f.dim + 1)], axis=2)
        return cols

    return frames


def design_round(f, *, radius=0.02, budget=64, N=None, delta0=None, speeds=None,
                 amplitudes=None, nu=None, sigma=None, mode="rigorous",
                 profile=DEFAULT_PROFILE, margin=2.0, candidates=4096, t=None,
                 cone_draws=100_000, frames="lyapunov", metric_horizon=8, seed=0):
    """Calibrate, place and package one round.

    The amplitudes are ``b_j`` with ``Q(b_j) = 3 delta0 a_j`` unless given
    directly, and ``nu`` defaults to ``(delta0 / 2) min a_j``.  Rigorous
    mode needs a linear map; it calibrates cone constants, takes
    ``N = N0`` unless a larger N is given, and places an N-tower with the
    eigenvector frame.  Empirical mode skips the cone constants, uses
    ``N = 1`` by default and takes chart frames from numerically estimated
    Oseledets directions.

    Raises
    ------
    TargetUnreachableError
        If some ``3 delta0 a_j`` exceeds ``Q(1)``.
    PlacementFailedError, CalibrationFailedError
        Propagated.
    """
    f = as_map(f)
    d = f.dim
    base = f.base
    speeds = np.ones(d - 1) if speeds is None else np.asarray(speeds, dtype=float)
    if speeds.size != d - 1 or np.any(speeds <= 0):
        raise InvalidInputError("speeds must be d-1 positive numbers", field="speeds")
    if amplitudes is None:
        if delta0 is None:
            raise InvalidInputError("give delta0 or amplitudes", field="delta0")
        amplitudes = tuple(calibrate_amplitude(3.0 * delta0 * a, profile, d) for a in speeds)
    amplitudes = tuple(float(b) for b in amplitudes)
    if delta0 is None:
        # least delta0 consistent with the given amplitudes
        delta0 = max(q_of(b, profile, d) / (3.0 * a) for b, a in zip(amplitudes, speeds))
        delta0 = max(delta0, 1e-300)
    if nu is None:
        nu = 0.5 * delta0 * float(np.min(speeds))
    nu = check_positive(nu, "nu")
    t = tuple(np.ones(d - 1)) if t is None else tuple(t)
    params = None
    if mode == "rigorous":
        if f.layers:
            raise InvalidInputError("rigorous rounds need a linear map", field="f")
        if sigma is None:
            sigma = gap(base.spectrum, base.unstable_index)
        cones = calibrate_cones(ModelDeformation(d, profile, np.ones(d - 1), amplitudes), nu,
                                random_draws=cone_draws, seed=seed)
        n0 = damping_horizon(cones, sigma)
        N = n0 if N is None else check_positive_int(N, "N")
        params = DampingParameters(cones, sigma, N, delta0, tuple(speeds), amplitudes)
        placement = place_balls(base, N, radius, budget, margin=margin, candidates=candidates)
    elif mode == "empirical":
        N = 1 if N is None else N
        frames_at = (None if not f.layers
                     else _frames_for(f, frames, metric_horizon, seed))
        placement = place_balls(base, N, radius, budget, margin=margin, candidates=candidates,
                                frames_at=frames_at, shift_seed=seed if f.layers else None)
    else:
        raise InvalidInputError(f"unknown mode {mode!r}", field="mode")
    return PerturbationRound(f, placement.balls, amplitudes, t, mode, profile, params, nu)


def build_round(rnd, t=None):
    """The map ``f o g_t``; the input map itself when ``t = 0``."""
    if t is not None:
        rnd = rnd.at(t)
    f = as_map(rnd.f)
    if not np.any(rnd.t):
        return f
    return f.with_layer(rnd.layer)


@dataclass(frozen=True)
class ShiftPrediction:
    """``-m(Z) Q(b_j t_j)`` with band ``m(Z) nu``; ``slack`` adds a quarter
    of the prediction for finite-radius chart error."""

    values: np.ndarray
    band: float
    support_measure: float
    q_values: np.ndarray

    def slack(self, sigma=0.0, sigmas=3.0, fraction=0.25):
        return self.band + sigmas * np.asarray(sigma) + fraction * np.abs(self.values)

    def to_json(self):
        return {"values": self.values.tolist(), "band": self.band,
                "support_measure": self.support_measure, "q_values": self.q_values.tolist()}


def predict_shift(rnd):
    """Predicted change of ``lambda_hat_j`` for j = 1..d-1."""
    m = rnd.support_measure
    q = np.array([q_of(b * t, rnd.profile, rnd.dim) for b, t in zip(rnd.amplitudes, rnd.t)])
    nu = 0.0 if rnd.nu is None else rnd.nu
    return ShiftPrediction(-m * q, m * nu, m, q)


@dataclass(frozen=True)
class ShiftMeasurement:
    values: np.ndarray
    stderr: np.ndarray
    base: object = field(repr=False, default=None)
    perturbed: object = field(repr=False, default=None)

    def to_json(self):
        return {"values": self.values.tolist(), "stderr": self.stderr.tolist()}


def measure_shift(f_base, f_t, config=EstimatorConfig()):
    """``lambda_hat_j(f_t) - lambda_hat_j(f_base)`` with combined errors.

    Linear maps are evaluated exactly rather than by orbit sampling.
    """
    a = _measure(f_base, config)
    b = _measure(f_t, config)
    se = np.sqrt(a.summed_stderr**2 + b.summed_stderr**2)
    return ShiftMeasurement(b.summed - a.summed, se, a, b)


# ----------------------------------------------------------------------
# psi


@dataclass
class PsiReport:
    j: int
    samples: int
    mean_log_psi: float
    mean_stderr: float
    summed_exponent: float
    summed_stderr: float
    formula_agrees: bool
    off_support_max_error: float
    off_support_ok: bool
    on_support_max_deviation: float
    on_support_bound: float
    on_support_ok: bool
    min_pairing: float
    transversal: bool
    witness: dict = field(default_factory=dict)

    @property
    def passed(self):
        return self.formula_agrees and self.off_support_ok and self.on_support_ok and self.transversal

    def to_dict(self):
        from .exceptions import _plain

        out = {k: _plain(v) for k, v in self.__dict__.items()}
        out["passed"] = self.passed
        return out


def _top_minor(a, j):
    return np.linalg.det(a[:, :j, :j])


def psi_check(rnd, j, samples=20_000, horizon=30, eps=0.0, config=EstimatorConfig(),
              seed=0):
    """Check the three properties of the wedge pairing ``psi_{j,t}``.

    ``psi_{j,t}(x)`` compares the pushed top-j Oseledets plane of ``f_t``
    with the base's, in the frame where the base's directions are
    orthonormal.  With ``W`` spanning that plane and ``F`` the eigenvector
    frame it is ``|det_j(F^-1 Df_t W)| / |det_j(F^-1 W)|``, independent of
    the basis of the plane.  Checked: (a) the sample mean of ``log psi``
    matches the measured ``lambda_hat_j(f_t)`` within 3 combined standard
    errors; (b) off the support ``log psi`` equals the base's summed
    exponent to 1e-6; (c) on the support it differs from the summed
    exponent plus ``log det_j Dh(z)`` by at most ``nu + eps``.
    """
    f = as_map(rnd.f)
    if f.layers:
        raise InvalidInputError("psi check needs a round on a linear map")
    d = f.dim
    j = check_index(j, 1, d - 1)
    rng = check_rng(seed)
    base = f.base
    ft = build_round(rnd)
    fi = np.linalg.inv(base.eigenvectors)
    lam_hat = float(np.sum(base.spectrum.entries[:j]))
    x = rng.random((check_positive_int(samples, "samples"), d))
    back, _ = _orbit_segment(ft, x, horizon)
    w = _push_flag(ft, back, j, rng)
    _, jac = ft.step(x)
    num = np.abs(_top_minor(fi @ jac @ w, j))
    den = np.abs(_top_minor(fi @ w, j))
    min_pair = float(np.min(den / np.prod(np.linalg.norm(fi @ w, axis=1), axis=1)))
    transversal = bool(np.all(den > 1e-12))
    log_psi = np.log(num) - np.log(den)
    mean = float(np.mean(log_psi))
    se = float(np.std(log_psi, ddof=1) / math.sqrt(log_psi.size))
    est = _measure(ft, config)
    lam_t = float(np.sum(est.values[:j]))
    lam_se = float(est.summed_stderr[j - 1]) if j < d else 0.0
    agrees = abs(mean - lam_t) <= 3.0 * math.hypot(se, lam_se)
    layer = rnd.layer
    member = layer.membership(x) if np.any(rnd.t) else np.full(x.shape[0], -1)
    off = member < 0
    off_err = float(np.max(np.abs(log_psi[off] - lam_hat))) if np.any(off) else 0.0
    witness = {}
    on = ~off
    on_dev = 0.0
    if np.any(on):
        z = np.empty((int(on.sum()), d))
        for k, ball in enumerate(layer.balls):
            sel = member[on] == k
            if np.any(sel):
                z[sel] = ball.to_chart(x[on][sel])
        minor = principal_minor(rnd.deformation, z, j)
        dev = np.abs(log_psi[on] - (lam_hat + np.log(minor)))
        k = int(np.argmax(dev))
        on_dev = float(dev[k])
        witness["on_support"] = {"x": x[on][k], "z": z[k], "deviation": on_dev}
    nu = 0.0 if rnd.nu is None else rnd.nu
    bound = nu + eps
    if not transversal:
        k = int(np.argmin(den))
        witness["transversality"] = {"x": x[k], "pairing": float(den[k])}
    return PsiReport(j, int(x.shape[0]), mean, se, lam_t, lam_se, bool(agrees), off_err,
                     off_err < 1e-6, on_dev, bound, on_dev <= bound, min_pair, transversal,
                     witness)


# ----------------------------------------------------------------------
# boundary inequalities


@dataclass
class BoundaryReport:
    """``lambda_1(f) <= lambda_1(L) + 3 sigma`` and the same for
    ``lambda_hat_2``; a failure points at an estimator or construction bug."""

    top: float
    top_base: float
    top_stderr: float
    second_summed: float
    second_summed_base: float
    second_summed_stderr: float
    passed: bool
    violations: tuple = ()

    def to_dict(self):
        return dict(self.__dict__, violations=list(self.violations))


def boundary_check(estimate, L, sigmas=3.0):
    """Compare a measured spectrum with the linear map it is homotopic to.

    ``estimate`` is a :class:`SpectrumEstimate` or a map (which is then
    measured with default engine settings).
    """
    if not hasattr(estimate, "per_orbit"):
        estimate = _measure(estimate, EstimatorConfig())
    base = L.base if hasattr(L, "base") else L
    lam = base.spectrum.entries
    per = estimate.per_orbit
    k = per.shape[0]
    top = float(estimate.values[0])
    top_se = float(estimate.stderr[0])
    second = float(estimate.values[0] + estimate.values[1])
    if k > 1:
        second_se = float(np.std(per[:, 0] + per[:, 1], ddof=1) / math.sqrt(k))
    else:
        second_se = float(estimate.stderr[0] + estimate.stderr[1])
    second_se = max(second_se, 1e-12)
    bad = []
    if top > lam[0] + sigmas * top_se + ANALYTIC_TOL:
        bad.append("lambda_1")
    if second > lam[0] + lam[1] + sigmas * second_se + ANALYTIC_TOL:
        bad.append("lambda_hat_2")
    return BoundaryReport(top, float(lam[0]), top_se, second, float(lam[0] + lam[1]),
                          second_se, not bad, tuple(bad))


def boundary_check_T3(estimate, L, sigmas=3.0):
    base = L.base if hasattr(L, "base") else L
    if base.dim != 3:
        raise InvalidInputError("boundary_check_T3 needs a map of T^3")
    return boundary_check(estimate, L, sigmas)


# ----------------------------------------------------------------------
# steering


@dataclass(frozen=True)
class SteeringConfig:
    """Settings for :func:`steer`.

    ``step_max`` bounds the per-step change of any summed exponent and
    fixes the number of waypoints.  ``step_tol`` is the accepted miss of
    a waypoint; ``tol`` that of the final target.  ``radius`` caps the
    ball radius of the first, densely packed round; each later round
    fills the gaps left by earlier ones with balls ``fill_ratio`` times
    smaller than the previous round's, up to ``max_rounds`` rounds in all.
    """

    tol: float = 1e-2
    step_tol: float = 3e-3
    step_max: float = 0.04
    radius: float = 0.08
    budget: int = 2000
    candidates: int = 12000
    max_estimates: int = 12
    damping: float = 0.8
    profile_c: float = 4.0
    max_rounds: int = 3
    fill_ratio: float = 0.12
    estimator: EstimatorConfig = EstimatorConfig()
    cone_samples: int = 10_000
    frames: str = "lyapunov"
    metric_horizon: int = 8
    seed: int = 0

    def to_json(self):
        out = dict(self.__dict__)
        out["estimator"] = self.estimator.to_json()
        return out

    @classmethod
    def from_json(cls, obj):
        obj = dict(obj)
        obj["estimator"] = EstimatorConfig(**obj.get("estimator", {}))
        return cls(**obj)


@dataclass
class StepResult:
    index: int
    target: np.ndarray
    measured: np.ndarray
    stderr: np.ndarray
    summed: np.ndarray
    summed_stderr: np.ndarray
    t: np.ndarray
    support_measure: float
    mode: str
    estimates_used: int
    certification: dict = field(default_factory=dict)

    def to_json(self):
        from .exceptions import _plain

        return {k: _plain(v) for k, v in self.__dict__.items()}

    @classmethod
    def from_json(cls, obj):
        return cls(int(obj["index"]), np.array(obj["target"]), np.array(obj["measured"]),
                   np.array(obj["stderr"]), np.array(obj["summed"]),
                   np.array(obj["summed_stderr"]), np.array(obj["t"]),
                   float(obj["support_measure"]), obj["mode"], int(obj["estimates_used"]),
                   obj.get("certification", {}))


@dataclass
class SteeringPlan:
    start: np.ndarray
    target: np.ndarray
    waypoints: np.ndarray
    sigma: float
    config: SteeringConfig
    steps: list = field(default_factory=list)
    final_map: object = None
    foliated: bool = False
    complete: bool = False

    @property
    def final_spectrum(self):
        return self.steps[-1].measured if self.steps else self.start

    def spectra(self):
        return [self.start] + [s.measured for s in self.steps]

    def to_json(self):
        return {
            "start": self.start.tolist(),
            "target": self.target.tolist(),
            "waypoints": self.waypoints.tolist(),
            "sigma": self.sigma,
            "config": self.config.to_json(),
            "steps": [s.to_json() for s in self.steps],
            "final_map": None if self.final_map is None else as_map(self.final_map).to_json(),
            "foliated": self.foliated,
            "complete": self.complete,
        }

    @classmethod
    def from_json(cls, obj):
        fm = obj.get("final_map")
        return cls(np.array(obj["start"]), np.array(obj["target"]),
                   np.array(obj["waypoints"]), float(obj["sigma"]),
                   SteeringConfig.from_json(obj["config"]),
                   [StepResult.from_json(s) for s in obj["steps"]],
                   None if fm is None else PerturbedMap.from_json(fm),
                   bool(obj.get("foliated", False)), bool(obj.get("complete", False)))


def _initial_t(need, m, amplitudes, profile, d):
    t = np.zeros(len(need))
    for k, (dv, b) in enumerate(zip(need, amplitudes)):
        if dv <= 0 or b == 0:
            continue
        try:
            s = calibrate_amplitude(dv / m, profile, d)
        except TargetUnreachableError:
            s = b
        t[k] = min(1.0, s / b)
    return t


def _search_step(current, rnd_proto, eta, cfg, d, active, seed):
    """Damped per-coordinate secant search for t with lambda_hat(f_t) ~ eta."""
    est0 = _measure(current, cfg.estimator, seed)
    need = est0.summed - eta
    m = rnd_proto.support_measure
    t = _initial_t(need, m, rnd_proto.amplitudes, rnd_proto.profile, d)
    t[~active] = 0.0
    # t = 0 reproduces the current map, which anchors the first secant
    history = [(np.zeros_like(t), est0.summed.copy())]
    best = None
    for used in range(1, cfg.max_estimates + 1):
        f_t = build_round(rnd_proto, t)
        est = _measure(f_t, cfg.estimator, seed)
        err = est.summed - eta
        score = float(np.max(np.abs(err[active]))) if np.any(active) else 0.0
        history.append((t.copy(), est.summed.copy()))
        if best is None or score < best[0]:
            best = (score, t.copy(), f_t, est, used)
        if score <= cfg.step_tol:
            break
        new_t = t.copy()
        for k in np.flatnonzero(active):
            slope = None
            # secant through the two most recent distinct t_k values
            for t_old, s_old in reversed(history[:-1]):
                if abs(t_old[k] - t[k]) > 1e-9:
                    slope = (est.summed[k] - s_old[k]) / (t[k] - t_old[k])
                    break
            if slope is None or slope >= 0:
                # predicted slope of -m Q(b t) in t
                b = rnd_proto.amplitudes[k]
                h = 1e-3
                slope = -m * (q_of(min(1.0, b * t[k] + h), rnd_proto.profile, d)
                              - q_of(max(0.0, b * t[k] - h), rnd_proto.profile, d)) \
                    / (min(1.0, b * t[k] + h) - max(0.0, b * t[k] - h)) * b
                slope = min(slope, -1e-9)
            new_t[k] = np.clip(t[k] - cfg.damping * err[k] / slope, 0.0, 1.0)
        if np.allclose(new_t, t, atol=1e-12):
            break
        t = new_t
    return best


def _certify(f_t, cfg, seed):
    out = {}
    d = f_t.dim
    for j in range(1, d):
        rep = cone_contraction_check(f_t, j, 1.0, 20, samples=cfg.cone_samples, seed=seed)
        out[f"cone_j{j}"] = {"max_opening": rep.max_opening,
                             "final_max_opening": float(np.max(rep.final_openings)),
                             "passed": bool(np.max(rep.final_openings) < 1.0)}
    out["level"] = "sampled-cones"
    return out


def _check_path(plan, est, u):
    """Majorization by the previous measured spectrum, and the gap."""
    prev = plan.spectra()[-1]
    prev_se = plan.steps[-1].summed_stderr if plan.steps else np.zeros(est.summed.size)
    tol = 3.0 * np.sqrt(prev_se**2 + est.summed_stderr**2) + plan.config.step_tol
    diff = np.cumsum(prev)[:-1] - est.summed
    return bool(np.all(diff >= -tol)), gap(est.values, u)


def _waypoints(start_hat, xi_hat, step_max):
    total = float(np.max(np.abs(xi_hat - start_hat)))
    n = max(1, int(math.ceil(total / step_max - 1e-12)))
    return np.array([(1 - i / n) * start_hat + (i / n) * xi_hat for i in range(1, n + 1)])


_MAX_FILL_GRID = 250_000


def _steering_round(current, cfg, profile, amplitudes, radius, seed, foliated, first):
    """Round used by :func:`steer`.

    The first round packs balls densely with the base's eigenvector frame
    (lattice centres, then a shifted low-discrepancy sequence for what is
    left).  Later rounds keep clear of every ball already in the map, so
    rotations never compose on top of each other, and in the plain case
    take their charts from the current map's Lyapunov frames.  Foliated
    steering keeps the eigenvector frame throughout.
    """
    base = current.base
    d = base.dim
    shift = np.random.default_rng(seed).random(d)
    frames_at = None
    if first:
        halton = qmc.Halton(d, scramble=False).random(cfg.candidates + 1)[1:]
        lattice, r = lattice_packing(base.eigenvectors, radius)
        # touching balls only share boundary points; shrink for the conflict test
        r *= 0.999
        centres = np.vstack([lattice, (halton + shift) % 1.0])
    else:
        r = radius
        # the free space is a union of small pockets, so search it on a grid
        # fine enough to land inside each pocket
        n = int(math.ceil(4.0 / r))
        if n**d <= _MAX_FILL_GRID:
            axes = (np.arange(n) + 0.5) / n
            grid = np.stack(np.meshgrid(*[axes] * d, indexing="ij"), -1).reshape(-1, d)
        else:
            grid = qmc.Halton(d, scramble=False).random(_MAX_FILL_GRID + 1)[1:]
        centres = (grid + shift / n) % 1.0
        centres = centres[~current.support_membership(centres)]
        if not foliated and current.layers:
            frames_at = _frames_for(current, cfg.frames, cfg.metric_horizon, seed)
    # one-step towers: supports only need to be disjoint, so no inflation
    placement = place_balls(base, 1, r, cfg.budget, margin=1.0, centers=centres,
                            frames_at=frames_at, avoid=current.balls)
    return PerturbationRound(current, placement.balls, tuple(amplitudes),
                             tuple(np.zeros(d - 1)), "empirical", profile, None, 1.0)


def steer(f0, xi, config=SteeringConfig(), *, resume=None, foliated=False):
    """Steer a linear automorphism towards the spectrum ``xi``.

    Waypoints are spaced evenly on the segment from the starting summed
    spectrum to the target's.  Each waypoint is met by tuning the
    parameter point of the open round; once that round saturates at
    ``t = 1`` it is kept at full strength and a new round is opened on
    the part of the torus not yet covered.

    Raises
    ------
    InvalidTargetError
        If ``xi`` is not strictly majorized by the starting spectrum.
    SteeringStalledError
        If a waypoint is missed by more than ``step_tol`` once the estimate
        and round budgets are spent; the exception carries the plan so far.
    GapViolationError
        If a measured spectrum has gap below ``sigma``.
    """
    base = f0.base if hasattr(f0, "base") else f0
    if not isinstance(base, HyperbolicAutomorphism):
        raise InvalidInputError("steering starts from a hyperbolic automorphism")
    d = base.dim
    u = base.unstable_index
    lam0 = base.spectrum.entries
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (d,):
        raise InvalidInputError(f"target needs {d} entries", field="target")
    cfg = config
    profile = BumpProfile(cfg.profile_c)
    if np.allclose(xi, lam0, atol=ANALYTIC_TOL * 10):
        plan = SteeringPlan(lam0.copy(), xi, np.zeros((0, d - 1)), 0.5 * gap(lam0, u), cfg,
                            final_map=PerturbedMap(base), foliated=foliated, complete=True)
        return plan
    report = validate_target(xi, lam0, u, strict=not foliated)
    if not report.passed:
        raise InvalidTargetError("target is not reachable by lowering exponents",
                                 report=report.to_dict())
    sigma = 0.5 * min(gap(lam0, u), gap(xi, u))
    start_hat = np.cumsum(lam0)[:-1]
    xi_hat = np.cumsum(xi)[:-1]
    waypoints = _waypoints(start_hat, xi_hat, cfg.step_max)
    if resume is not None:
        plan = resume
        current = as_map(plan.final_map)
    else:
        plan = SteeringPlan(lam0.copy(), xi, waypoints, sigma, cfg, foliated=foliated)
        current = PerturbedMap(base)
    amplitudes = np.ones(d - 1)
    if foliated:
        amplitudes[1:] = 0.0
    active = amplitudes > 0
    # the open round perturbs `below`; a resumed plan opens a fresh round
    rounds = len(current.layers)
    below = current
    rnd = None
    for i in range(len(plan.steps), len(plan.waypoints)):
        eta = plan.waypoints[i]
        step_seed = cfg.seed + 7919 * (i + 1)
        while True:
            if rnd is None:
                if below.layers:
                    radius = cfg.fill_ratio * min(b.radius for b in below.layers[-1].balls)
                else:
                    radius = cfg.radius
                rnd = _steering_round(below, cfg, profile, amplitudes, radius,
                                      step_seed, foliated, rounds == 0)
                rounds += 1
            score, t, f_t, est, used = _search_step(below, rnd, eta, cfg, d, active,
                                                    cfg.estimator.seed)
            err = est.summed - eta
            saturated = bool(np.all((t[active] >= 1.0 - 1e-12) | (err[active] <= 0.0)))
            if score <= cfg.step_tol or not saturated or rounds >= cfg.max_rounds:
                break
            # keep the exhausted round at full strength and open a new one
            below = build_round(rnd, np.where(active, 1.0, 0.0))
            rnd = None
        step = StepResult(i + 1, eta, est.values, est.stderr, est.summed, est.summed_stderr,
                          t, as_map(f_t).support_measure, "empirical", used)
        majorized, g = _check_path(plan, est, u)
        step.certification = _certify(f_t, cfg, step_seed)
        step.certification.update({"majorized_by_previous": majorized, "gap": g,
                                   "rounds": rounds})
        if score > cfg.step_tol:
            plan.final_map = current
            raise SteeringStalledError(
                f"waypoint {i + 1} missed by {score:.3g} after {used} estimates",
                plan=plan, step=i + 1, miss=score, best=step.to_json())
        plan.steps.append(step)
        plan.final_map = f_t
        current = f_t
        if g < sigma:
            raise GapViolationError(f"gap {g:.4g} fell below {sigma:.4g}", plan=plan,
                                    step=i + 1)
    final = plan.final_spectrum
    plan.complete = bool(np.max(np.abs(final - xi)) < cfg.tol)
    return plan


def steer_foliated_T3(L, xi, config=SteeringConfig(), *, resume=None):
    """Steering on T^3 that keeps the third exponent of ``L`` unchanged.

    Requires an unstable index of 2 and ``xi_3 == lambda_3(L)``.  Only the
    top summed exponent is steered; the second one equals ``-lambda_3`` by
    volume preservation.
    """
    base = L.base if hasattr(L, "base") else L
    if base.dim != 3 or base.unstable_index != 2:
        raise InvalidInputError("foliated steering needs a T^3 map with two unstable directions")
    xi = np.asarray(xi, dtype=float)
    lam3 = base.spectrum.entries[2]
    if xi.shape != (3,) or abs(xi[2] - lam3) > 1e-12:
        raise InvalidTargetError("the third target exponent must equal that of L",
                                 field="target", expected=float(lam3))
    return steer(base, xi, config, resume=resume, foliated=True)


def frame_differential(f, x):
    """Differential of ``f`` in the base's eigenvector frame."""
    f = as_map(f)
    base = f.base
    fr = base.eigenvectors
    return np.linalg.inv(fr) @ f.differential(np.atleast_2d(x)) @ fr


# ----------------------------------------------------------------------
# estimator wrapper


class Steerer(BaseEstimator):
    """Estimator-style front end to :func:`steer`.

    ``fit(f0, xi)`` stores ``plan_`` and ``spectrum_`` (the last measured
    spectrum).  ``predict`` returns the waypoints in summed coordinates.
    """

    def __init__(self, tol=1e-2, step_max=0.04, radius=0.08, orbits=64, length=2000,
                 seed=0, foliated=False):
        self.tol = tol
        self.step_max = step_max
        self.radius = radius
        self.orbits = orbits
        self.length = length
        self.seed = seed
        self.foliated = foliated

    def _config(self):
        return SteeringConfig(tol=self.tol, step_max=self.step_max, radius=self.radius,
                              estimator=EstimatorConfig(self.orbits, self.length),
                              seed=self.seed)

    def fit(self, f0, xi):
        if self.foliated:
            self.plan_ = steer_foliated_T3(f0, xi, self._config())
        else:
            self.plan_ = steer(f0, xi, self._config())
        self.spectrum_ = self.plan_.final_spectrum
        return self

    def predict(self, X=None):
        return self.plan_.waypoints
