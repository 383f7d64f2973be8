import json

import numpy as np
import pytest
from sklearn.base import clone

from lyapflex.deformation import BumpProfile, ModelDeformation
from lyapflex.engine import (
    EstimatorConfig,
    PerturbationRound,
    Steerer,
    SteeringConfig,
    SteeringPlan,
    boundary_check,
    boundary_check_T3,
    build_round,
    design_round,
    frame_differential,
    lyapunov_frames,
    measure_shift,
    predict_shift,
    psi_check,
    steer,
    steer_foliated_T3,
)
from lyapflex.exceptions import InvalidInputError, InvalidTargetError, TargetUnreachableError
from lyapflex.lattice import CAT_MAP, HyperbolicAutomorphism, build_polynomial, companion, \
    default_pattern
from lyapflex.spectrum import SpectrumEstimate, estimate_spectrum
from lyapflex.torusmap import ChartedBall, DeformationLayer, PerturbedMap, lattice_packing

CAT = HyperbolicAutomorphism(CAT_MAP)
T3 = companion(build_polynomial(default_pattern(3, 2)))
FAST = EstimatorConfig(orbits=48, length=1500, burn_in=20)


@pytest.fixture(scope="module")
def cat_round():
    return design_round(CAT, mode="empirical", radius=0.05, budget=200, amplitudes=(1.0,),
                        nu=0.001, margin=1.0, candidates=1500)


def test_round_at_zero_is_the_base(cat_round):
    assert not build_round(cat_round, 0.0).layers
    assert build_round(cat_round, 1.0).layers


def test_predicted_shift_matches_measurement(cat_round):
    pred = predict_shift(cat_round)
    meas = measure_shift(CAT, build_round(cat_round), FAST)
    assert pred.values[0] < 0
    assert abs(meas.values[0] - pred.values[0]) <= pred.slack(meas.stderr)[0]


def test_linear_shift_is_exactly_zero():
    meas = measure_shift(CAT, CAT, FAST)
    assert meas.values[0] == 0.0


def test_design_round_rejects_unreachable_amplitude():
    with pytest.raises(TargetUnreachableError):
        design_round(CAT, mode="empirical", delta0=1.0)
    with pytest.raises(InvalidInputError):
        design_round(CAT, mode="other", amplitudes=(0.1,))


def test_round_json_roundtrip(cat_round):
    back = PerturbationRound.from_json(json.loads(json.dumps(cat_round.to_json())))
    assert back.balls == cat_round.balls and back.amplitudes == cat_round.amplitudes
    assert back.support_measure == pytest.approx(cat_round.support_measure)


def test_psi_properties():
    # the on-support bound needs a damped tower, so use a rigorous round
    rnd = design_round(CAT, radius=0.02, amplitudes=(0.15,), nu=0.27, candidates=2000,
                       cone_draws=20_000, t=(0.5,))
    rep = psi_check(rnd, 1, samples=5000, config=FAST)
    assert rep.transversal and rep.off_support_ok
    assert rep.on_support_ok, rep.witness
    assert rep.formula_agrees


def test_boundary_check_on_real_and_corrupted_estimates(cat_round):
    est = estimate_spectrum(build_round(cat_round), 16, 1000, 20)
    assert boundary_check(est, CAT).passed
    lam = CAT.spectrum.entries
    bad = SpectrumEstimate(lam + [0.01, -0.01], np.full(2, 1e-4), np.array([lam[0] + 0.01]),
                           np.array([1e-4]), 4, 100, 0, 0,
                           np.tile(lam + [0.01, -0.01], (4, 1)))
    rep = boundary_check(bad, CAT)
    assert not rep.passed and "lambda_1" in rep.violations


def test_boundary_check_t3_requires_t3():
    with pytest.raises(InvalidInputError):
        boundary_check_T3(CAT, CAT)
    assert boundary_check_T3(T3, T3).passed


def test_lyapunov_frames_of_linear_map_are_eigenframes():
    x = np.random.default_rng(0).random((10, 2))
    fr = lyapunov_frames(CAT, x)
    e = CAT.eigenvectors / np.linalg.norm(CAT.eigenvectors, axis=0)
    assert np.allclose(np.abs(fr), np.abs(e), atol=1e-8)


def test_frame_differential_is_diagonal_for_linear_map():
    a = frame_differential(CAT, [0.2, 0.3])[0]
    assert np.allclose(a, np.diag(CAT.eigenvalues), atol=1e-12)


def test_foliated_layer_keeps_bottom_row():
    centres, r = lattice_packing(T3.eigenvectors, 0.1)
    balls = tuple(ChartedBall(c, r * 0.999, T3.eigenvectors) for c in centres)
    m = ModelDeformation(3, BumpProfile(4.0), (1.0, 0.0), (1.0, 0.0))
    f = PerturbedMap(T3, [DeformationLayer(balls, m)])
    x = np.random.default_rng(7).random((1000, 3))
    a = frame_differential(f, x)
    assert np.mean(f.support_membership(x)) > 0.5
    assert np.max(np.abs(a[:, 2, :2])) < 1e-12
    assert np.allclose(np.abs(a[:, 2, 2]), np.exp(T3.spectrum.entries[2]), atol=1e-12)
    # the angle depends on z_3, so E_3 itself is not invariant
    assert np.max(np.abs(a[:, :2, 2])) > 1.0


def test_config_json_roundtrip():
    cfg = SteeringConfig(tol=0.02, estimator=EstimatorConfig(orbits=8))
    assert SteeringConfig.from_json(json.loads(json.dumps(cfg.to_json()))) == cfg


def test_trivial_target_gives_empty_plan():
    plan = steer(CAT, CAT.spectrum.entries)
    assert plan.complete and plan.steps == []


def test_raising_exponent_is_rejected():
    with pytest.raises(InvalidTargetError):
        steer(CAT, [1.0, -1.0])
    with pytest.raises(InvalidTargetError):
        steer_foliated_T3(T3, T3.spectrum.entries + [0.01, 0.0, -0.01])


def test_single_waypoint_steer_and_plan_json():
    lam = CAT.spectrum.entries[0]
    cfg = SteeringConfig(step_max=0.05, radius=0.05, estimator=FAST, max_estimates=8)
    plan = steer(CAT, [lam - 0.03, 0.03 - lam], cfg)
    assert plan.complete and len(plan.steps) == 1
    step = plan.steps[0]
    assert abs(step.summed[0] - plan.waypoints[0][0]) <= cfg.step_tol
    assert step.certification["majorized_by_previous"]
    assert boundary_check(estimate_spectrum(plan.final_map, 16, 1000, 20), CAT).passed
    back = SteeringPlan.from_json(json.loads(json.dumps(plan.to_json())))
    assert np.array_equal(back.steps[0].measured, step.measured)
    x = np.random.default_rng(1).random((50, 2))
    assert np.array_equal(back.final_map.evaluate(x), plan.final_map.evaluate(x))


def test_steerer_interface():
    s = Steerer(orbits=8)
    assert clone(s).get_params() == s.get_params()
    s.fit(CAT, CAT.spectrum.entries)
    assert s.predict().shape == (0, 1)
    assert np.allclose(s.spectrum_, CAT.spectrum.entries)
