"""Tests of δ grid search and the counterfactual objective."""

import math

import numpy as np
import pytest
import yaml

import testinfra
from driftlab.denoiser import AnalyticDenoiser, GaussianMixtureSpec
from driftlab.diffusion import DriftConfig, SampleBatch, NO_DRIFT, sample
from driftlab.driftsearch import (GridSearchConfig, GridSearchReport, CounterfactualSpec,
                                  grid_search_delta, grid_search_per_class, class_deltas,
                                  select_delta, refine_grid, counterfactual_loss,
                                  generate_counterfactual, counterfactual_summary,
                                  train_toy_classifier, start_step_for)
from driftlab.errors import InvalidGridError, InvalidRangeError, LabelOutOfRangeError
from driftlab.metrics import EmpiricalDist, DistanceEstimate
from driftlab.rngstreams import StreamFactory
from driftlab.schedule import PriorSpec, make_linear_schedule
from driftlab.stats import Stats

TWO_CLASS = """
  classes:
    - [ {weight: 1.0, mean: [-2.0], std: [0.5]} ]
    - [ {weight: 1.0, mean: [2.0], std: [0.5]} ]
"""

def gaussian_setup():
    s = testinfra.small_schedule()
    return s, AnalyticDenoiser(GaussianMixtureSpec.gaussian(), s)

def shifted_target(s, delta_hat, n=2000, seed=50):
    """Samples distributed exactly like the δ̂-drifted sampler's output."""
    mean, var = testinfra.oracle_moments(s, delta=delta_hat)
    return EmpiricalDist(np.random.default_rng(seed).normal(mean, math.sqrt(var), (n, 1)))

def estimate(value, se=0.01):
    return DistanceEstimate(value, se, 100, 100, 'L1', 64)

def test_config_validation():
    target = EmpiricalDist(np.zeros(10))
    with pytest.raises(InvalidGridError):
        GridSearchConfig((), 200, target)
    with pytest.raises(InvalidGridError):
        GridSearchConfig((0.1, -0.1), 200, target)
    with pytest.raises(InvalidGridError):
        GridSearchConfig((0.0, float('nan')), 200, target)
    with pytest.raises(InvalidRangeError):
        GridSearchConfig((0.0,), 50, target)
    cfg = GridSearchConfig([-0.1, 0, 0.1], 200, target, mode='both')
    assert cfg.grid == (-0.1, 0.0, 0.1)

def test_select_delta_ties():
    per_delta = [(-0.1, estimate(0.2)), (0.05, estimate(0.2)), (0.1, estimate(0.2))]
    assert select_delta(per_delta)[0] == 0.05
    per_delta = [(-0.05, estimate(0.3)), (0.05, estimate(0.3))]
    assert select_delta(per_delta)[0] == -0.05

def test_select_delta_ambiguity():
    delta, ambiguous = select_delta([(0.0, estimate(0.10, 0.02)), (0.1, estimate(0.11, 0.02))])
    assert delta == 0.0 and ambiguous
    delta, ambiguous = select_delta([(0.0, estimate(0.10, 0.02)), (0.1, estimate(0.5, 0.02))])
    assert delta == 0.0 and not ambiguous

def test_self_target():
    Stats.reset()
    s, model = gaussian_setup()
    own, _ = sample(model, s, PriorSpec(), NO_DRIFT, 2000, 0, StreamFactory(99))
    cfg = GridSearchConfig((-0.1, 0.0, 0.1), 2000, EmpiricalDist(own.data), seed=1, n_boot=50)
    report = grid_search_delta(model, s, cfg)
    assert report.delta_star == 0.0 or report.ambiguity_flag
    assert report.grid == [-0.1, 0.0, 0.1]
    assert Stats.grid_points_evaluated == 3

def test_compensating_delta_recovered():
    s, model = gaussian_setup()
    delta_hat = 0.05
    target_mean = delta_hat * testinfra.drift_gain(s)
    assert testinfra.compensating_delta(s, target_mean) == pytest.approx(delta_hat)
    cfg = GridSearchConfig((-0.1, -0.05, 0.0, 0.05, 0.1), 2000, shifted_target(s, delta_hat),
                           seed=2, n_boot=50)
    report = grid_search_delta(model, s, cfg)
    assert report.delta_star == 0.05
    assert [r['is_argmin'] for r in report.to_rows()] == [0, 0, 0, 1, 0]

def test_argmin_invariant_to_increasing_transform():
    s, model = gaussian_setup()
    cfg = GridSearchConfig((-0.1, -0.05, 0.0, 0.05, 0.1), 1000, shifted_target(s, -0.05),
                           seed=3, n_boot=20)
    report = grid_search_delta(model, s, cfg)
    for transform in (np.sqrt, np.exp, lambda v: 3.0 * v + 1.0):
        moved = [(d, estimate(float(transform(e.value)), e.std_error))
                 for d, e in report.per_delta]
        assert select_delta(moved)[0] == report.delta_star

def test_reproducible_and_order_independent():
    Stats.reset()
    s, model = gaussian_setup()
    target = shifted_target(s, 0.05, n=1000)
    serial = grid_search_delta(model, s, GridSearchConfig(
        (-0.1, 0.0, 0.1), 500, target, seed=4, n_boot=20))
    again = grid_search_delta(model, s, GridSearchConfig(
        (-0.1, 0.0, 0.1), 500, target, seed=4, n_boot=20))
    threaded = grid_search_delta(model, s, GridSearchConfig(
        (-0.1, 0.0, 0.1), 500, target, seed=4, n_boot=20, threads=3))
    assert serial.to_rows() == again.to_rows() == threaded.to_rows()
    assert Stats.grid_points_evaluated == 9
    assert Stats.bootstrap_resamples == 9 * 20

def test_refine_pass():
    assert refine_grid((-0.2, 0.0, 0.2), 0.2) == [0.0, 0.05, 0.1, 0.15, 0.2]
    assert refine_grid((-0.2, 0.0, 0.2), 0.0) == [-0.2, -0.1, 0.0, 0.1, 0.2]
    assert refine_grid((0.0,), 0.0) == [0.0]

    s, model = gaussian_setup()
    cfg = GridSearchConfig((-0.2, 0.0, 0.2), 2000, shifted_target(s, 0.15), seed=5,
                           n_boot=20, refine=True)
    report = grid_search_delta(model, s, cfg)
    assert report.grid == [-0.2, 0.0, 0.05, 0.1, 0.15, 0.2]
    assert report.delta_star == pytest.approx(0.15)

def test_per_class_search():
    s = testinfra.small_schedule()
    spec = GaussianMixtureSpec.from_config(yaml.safe_load(TWO_CLASS))
    model = AnalyticDenoiser(spec, s)
    own, _ = sample(model, s, PriorSpec(), NO_DRIFT, 2000, np.arange(2000) % 2,
                    StreamFactory(98))
    cfg = GridSearchConfig((-0.1, 0.0, 0.1), 1000, EmpiricalDist(own.data), seed=6, n_boot=20)
    reports = grid_search_per_class(model, s, cfg, own)
    assert sorted(reports) == [0, 1]
    assert reports[1].cond == 1
    deltas = class_deltas(reports)
    for label, report in reports.items():
        assert deltas[label] == 0.0 or report.ambiguity_flag
    DriftConfig(0.0, class_deltas=deltas)

def test_counterfactual_loss_hand_values():
    clf = testinfra.FixedClassifier([1.0, -1.0], 0.5)
    x, xp = np.array([0.2, 0.4]), np.array([1.0, -0.5])
    p1 = 1.0 / (1.0 + math.exp(-2.0))

    spec = CounterfactualSpec(1.0, clf, 1)
    total, outcome, instance = counterfactual_loss(x, xp, spec)
    assert outcome == pytest.approx(-math.log(p1), abs=1e-12)
    assert instance == pytest.approx(0.64 + 0.81, abs=1e-12)
    assert total == pytest.approx(-math.log(p1) + 1.45, abs=1e-12)

    spec = CounterfactualSpec(1.0, clf, 1, outcome_loss='squared', instance_loss='l1')
    total, outcome, instance = counterfactual_loss(x, xp, spec)
    assert outcome == pytest.approx(2 * (1 - p1) ** 2, abs=1e-12)
    assert instance == pytest.approx(1.7, abs=1e-12)

def test_counterfactual_loss_limits():
    clf = testinfra.FixedClassifier([1.0, -1.0])
    x, xp = np.array([0.2, 0.4]), np.array([1.0, -0.5])
    total, _, instance = counterfactual_loss(x, xp, CounterfactualSpec(0.0, clf, 1))
    assert total == instance

    certain = CounterfactualSpec(1.0, testinfra.CertainClassifier(), 1)
    assert counterfactual_loss(x, x, certain) == (0.0, 0.0, 0.0)

def test_counterfactual_decomposition_and_monotonicity():
    clf = testinfra.FixedClassifier([0.7, -1.3], 0.2)
    rng = np.random.default_rng(10)
    x, xp = rng.standard_normal((100, 2)), rng.standard_normal((100, 2))
    previous = None
    for lam in (0.0, 0.5, 1.0, 4.0):
        total, outcome, instance = counterfactual_loss(x, xp, CounterfactualSpec(lam, clf, 0))
        assert np.allclose(total, lam * outcome + instance, rtol=0, atol=1e-12)
        if previous is not None:
            assert np.all(total[outcome > 0] > previous[outcome > 0])
        previous = total

def test_counterfactual_spec_validation():
    clf = testinfra.FixedClassifier([1.0])
    with pytest.raises(LabelOutOfRangeError):
        CounterfactualSpec(1.0, clf, 2)
    with pytest.raises(InvalidRangeError):
        CounterfactualSpec(-1.0, clf, 1)
    with pytest.raises(InvalidRangeError):
        CounterfactualSpec(1.0, clf, 1, outcome_loss='hinge')
    with pytest.raises(InvalidRangeError):
        start_step_for(0.0, 10)
    assert start_step_for(1.0, 10) == 10
    assert start_step_for(0.01, 50) == 1

def counterfactual_setup():
    s = make_linear_schedule(50, 1e-4, 0.2)
    spec = GaussianMixtureSpec.from_config(yaml.safe_load(TWO_CLASS))
    clf = train_toy_classifier(spec, 2000, seed=0)
    x, labels = spec.draw(400, np.random.default_rng(20), labels=0)
    return s, AnalyticDenoiser(spec, s), clf, SampleBatch(x, labels)

def test_full_regeneration_flips_label():
    Stats.reset()
    s, model, clf, source = counterfactual_setup()
    spec = CounterfactualSpec(1.0, clf, 1)
    result = generate_counterfactual(source, model, s, spec, NO_DRIFT, 1.0, StreamFactory(1))
    assert result.flip_rate >= 0.95
    assert np.all(result.batch.condition == 1)
    assert result.start_step == s.T
    assert Stats.counterfactuals_generated == 400
    summary = counterfactual_summary(result)
    assert summary['mean_total'] == pytest.approx(
        summary['mean_outcome'] + summary['mean_instance'])

def test_shallow_regeneration_stays_close():
    s, model, clf, source = counterfactual_setup()
    spec = CounterfactualSpec(1.0, clf, 1)
    result = generate_counterfactual(source, model, s, spec, NO_DRIFT, 0.01, StreamFactory(2))
    assert result.start_step == 1
    assert np.median(np.abs(source.data - result.batch.data)) < s.sigma[0]
    base_confusion = np.mean(clf.predict(source.data) == 1)
    assert abs(result.flip_rate - base_confusion) < 0.05

def test_counterfactual_threads_match():
    s, model, clf, source = counterfactual_setup()
    big = SampleBatch(np.tile(source.data, (3, 1)), 0)
    spec = CounterfactualSpec(1.0, clf, 1)
    a = generate_counterfactual(big, model, s, spec, DriftConfig(0.02), 0.5, StreamFactory(3))
    b = generate_counterfactual(big, model, s, spec, DriftConfig(0.02), 0.5, StreamFactory(3),
                                threads=2)
    assert np.array_equal(a.batch.data, b.batch.data)
