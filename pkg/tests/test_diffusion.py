"""Tests of forward noising, drifted reverse sampling and DDIM."""

import math

import numpy as np
import pytest
from scipy import stats as sps

import testinfra
from driftlab.denoiser import AnalyticDenoiser, Denoiser, GaussianMixtureSpec
from driftlab.diffusion import (DriftConfig, DriftMode, SampleBatch, NO_DRIFT,
                                forward_sample, reverse_step, posterior_mean,
                                posterior_mean_x0_form, sample, ddim_sample,
                                make_subgrid)
from driftlab.errors import (DimMismatchError, InsufficientSamplesError, InvalidGridError,
                             InvalidRangeError, NumericFailure, StepIndexError)
from driftlab.rngstreams import StreamFactory
from driftlab.schedule import PriorSpec, make_linear_schedule
from driftlab.stats import Stats

FIG_GRID = [-0.2, -0.1, -0.05, 0.0, 0.05, 0.1, 0.2]

def gaussian_model(s):
    return AnalyticDenoiser(GaussianMixtureSpec.gaussian(), s)

def test_forward_zero_noise():
    s = make_linear_schedule(3, 0.0, 0.0, allow_degenerate=True)
    x0 = SampleBatch(np.array([[0.5], [-1.5]]), 0)
    xt, _ = forward_sample(x0, 2, s, NO_DRIFT, StreamFactory(0).stream("test"))
    assert np.array_equal(xt.data, x0.data)

def test_forward_matches_reference():
    s = testinfra.small_schedule()
    x0 = SampleBatch(np.arange(6, dtype=float).reshape(3, 2), 0)
    xt, target = forward_sample(x0, 4, s, DriftConfig(0.0), StreamFactory(1).stream("test"))
    eps = StreamFactory(1).stream("test").standard_normal((3, 2))
    abar = s.alpha_bar[3]
    assert np.array_equal(target, eps)
    assert np.array_equal(xt.data, np.sqrt(abar) * x0.data + np.sqrt(1 - abar) * eps)
    with pytest.raises(StepIndexError):
        forward_sample(x0, 11, s, NO_DRIFT, StreamFactory(1).stream("test"))

def test_forward_drifted_target_mean():
    s = make_linear_schedule(1, 0.75, 0.75)    # alpha_bar = 0.25
    n = 1_000_000
    x0 = SampleBatch(np.zeros((n, 1)), 0)
    drift = DriftConfig(0.1, apply_in_training=True)
    xt, target = forward_sample(x0, 1, s, drift, StreamFactory(2).stream("test"))
    expect = math.sqrt(0.75) * 0.1
    se = math.sqrt(0.75) / math.sqrt(n)
    assert abs(xt.data.mean() - expect) < 3 * se
    assert abs(target.mean() - 0.1) < 3 / math.sqrt(n)

def test_reverse_step_zero_delta_is_identity():
    s = testinfra.small_schedule()
    model = gaussian_model(s)
    x = SampleBatch(np.linspace(-2, 2, 9)[:, None], 0)
    plain = reverse_step(x, 5, model, s, NO_DRIFT, StreamFactory(3).stream("test"))
    for mode in DriftMode:
        drifted = reverse_step(x, 5, model, s, DriftConfig(0.0, mode),
                               StreamFactory(3).stream("test"))
        assert np.array_equal(plain.data, drifted.data)

def test_reverse_step_antisymmetry():
    s = testinfra.small_schedule()
    model = gaussian_model(s)
    x = SampleBatch(np.linspace(-2, 2, 9)[:, None], 0)
    up = reverse_step(x, 5, model, s, DriftConfig(0.05), StreamFactory(4).stream("test"))
    down = reverse_step(x, 5, model, s, DriftConfig(-0.05), StreamFactory(4).stream("test"))
    assert np.allclose(up.data - down.data, 0.1, rtol=0, atol=1e-12)

def test_posterior_mean_gaussian_conditioning():
    """For N(0,1) data x_{t-1} and x_t are jointly Gaussian with unit
    variances and covariance sqrt(alpha_t), so E[x_{t-1}|x_t] = sqrt(alpha_t) x_t."""
    s = testinfra.small_schedule()
    model = gaussian_model(s)
    x = np.linspace(-3, 3, 7)[:, None]
    c = np.zeros(7, dtype=int)
    for t in range(2, s.T + 1):
        expect = np.sqrt(s.alpha[t - 1]) * x
        assert np.allclose(posterior_mean(model, x, t, c, s), expect, atol=1e-10)
        x0_hat = np.sqrt(s.alpha_bar[t - 1]) * x
        assert np.allclose(posterior_mean_x0_form(x0_hat, x, t, s), expect, atol=1e-10)

def test_final_step_is_noiseless():
    s = testinfra.small_schedule()
    model = gaussian_model(s)
    x = SampleBatch(np.ones((4, 1)), 0)
    a = reverse_step(x, 1, model, s, NO_DRIFT, StreamFactory(0).stream("a"))
    b = reverse_step(x, 1, model, s, NO_DRIFT, StreamFactory(9).stream("b"))
    assert np.array_equal(a.data, b.data)

def test_sample_zero_delta_identity():
    s = testinfra.small_schedule()
    model = gaussian_model(s)
    plain, _ = sample(model, s, PriorSpec(), NO_DRIFT, 300, 0, StreamFactory(5))
    for mode in DriftMode:
        drifted, _ = sample(model, s, PriorSpec(), DriftConfig(0.0, mode), 300, 0,
                            StreamFactory(5))
        assert np.array_equal(plain.data, drifted.data)

def test_sample_shift_matches_affine_oracle():
    """Shared noise and an affine reverse map make the output shift exactly
    gain * delta for every sample."""
    s = testinfra.small_schedule()
    model = gaussian_model(s)
    base, _ = sample(model, s, PriorSpec(), NO_DRIFT, 500, 0, StreamFactory(6))
    gain = testinfra.drift_gain(s)
    means = []
    for delta in FIG_GRID:
        batch, _ = sample(model, s, PriorSpec(), DriftConfig(delta), 500, 0, StreamFactory(6))
        assert np.allclose(batch.data - base.data, gain * delta, atol=1e-10)
        means.append(batch.data.mean())
    assert np.all(np.diff(means) > 0)

def test_prior_shift_carries_through():
    s = testinfra.small_schedule()
    model = gaussian_model(s)
    base, _ = sample(model, s, PriorSpec(), NO_DRIFT, 200, 0, StreamFactory(6))
    shifted, _ = sample(model, s, PriorSpec(), DriftConfig(0.1, DriftMode.PRIOR_ONLY),
                        200, 0, StreamFactory(6))
    expect, _ = testinfra.oracle_moments(s, delta=0.1, prior_shift=True, step_shift=False)
    assert np.allclose(shifted.data - base.data, expect, atol=1e-10)

def test_sample_moments_match_oracle():
    s = testinfra.small_schedule()
    model = gaussian_model(s)
    n = 20000
    batch, _ = sample(model, s, PriorSpec(), DriftConfig(0.1), n, 0, StreamFactory(7))
    mean, var = testinfra.oracle_moments(s, delta=0.1)
    assert abs(batch.data.mean() - mean) < 3 * math.sqrt(var / n)

def test_trajectory():
    Stats.reset()
    s = testinfra.small_schedule()
    model = gaussian_model(s)
    batch, traj = sample(model, s, PriorSpec(), NO_DRIFT, 100, 0, StreamFactory(8),
                         record=True)
    assert len(traj.per_step_mean) == s.T + 1
    assert traj.steps.tolist() == list(range(s.T, -1, -1))
    assert np.all(np.isfinite(traj.per_step_mean)) and np.all(np.isfinite(traj.per_step_std))
    assert traj.per_step_mean[-1] == pytest.approx(batch.data.mean(), abs=1e-12)
    assert traj.terminal_latent_stats['x_0_std'] == pytest.approx(batch.data.std(), abs=1e-12)
    assert Stats.samples_generated == 100
    assert Stats.reverse_steps == s.T

def test_order_independence():
    s = testinfra.small_schedule()
    model = gaussian_model(s)
    serial, _ = sample(model, s, PriorSpec(), DriftConfig(0.05), 2500, 0, StreamFactory(9))
    threaded, _ = sample(model, s, PriorSpec(), DriftConfig(0.05), 2500, 0, StreamFactory(9),
                         threads=4)
    assert np.array_equal(serial.data, threaded.data)
    short, _ = sample(model, s, PriorSpec(), DriftConfig(0.05), 1024, 0, StreamFactory(9))
    assert np.array_equal(short.data, serial.data[:1024])

def test_sample_prefix_independent_of_n():
    s = testinfra.small_schedule()
    model = gaussian_model(s)
    drift = DriftConfig(0.05)
    small, _ = sample(model, s, PriorSpec(), drift, 1000, 0, StreamFactory(9))
    block, _ = sample(model, s, PriorSpec(), drift, 1024, 0, StreamFactory(9))
    assert np.array_equal(small.data, block.data[:1000])

    # across a block boundary
    mid, _ = sample(model, s, PriorSpec(), drift, 1500, 0, StreamFactory(9))
    big, _ = sample(model, s, PriorSpec(), drift, 2500, 0, StreamFactory(9), threads=3)
    assert np.array_equal(mid.data, big.data[:1500])
    assert np.array_equal(mid.data[:1000], small.data)

    ddim_a = ddim_sample(model, s, make_subgrid(s.T, 4), drift, 0.5, 1000, 0, StreamFactory(3))
    ddim_b = ddim_sample(model, s, make_subgrid(s.T, 4), drift, 0.5, 1100, 0, StreamFactory(3))
    assert np.array_equal(ddim_a.data, ddim_b.data[:1000])

def test_counters_exact_with_threads():
    s = testinfra.small_schedule()
    model = gaussian_model(s)
    Stats.reset()
    sample(model, s, PriorSpec(), NO_DRIFT, 5000, 0, StreamFactory(2), threads=4)
    # one batched reverse step per block per t
    assert Stats.reverse_steps == 5 * s.T
    assert Stats.samples_generated == 5000

    Stats.reset()
    grid = make_subgrid(s.T, 3)
    ddim_sample(model, s, grid, NO_DRIFT, 0.0, 3000, 0, StreamFactory(2), threads=3)
    assert Stats.reverse_steps == 3 * len(grid)
    assert Stats.samples_generated == 3000

def test_sample_rejects_prior_dim_mismatch():
    s = testinfra.small_schedule()
    model = gaussian_model(s)
    with pytest.raises(DimMismatchError):
        sample(model, s, PriorSpec(dim=2), NO_DRIFT, 10, 0, StreamFactory(0))
    with pytest.raises(DimMismatchError):
        ddim_sample(model, s, make_subgrid(s.T, 3), NO_DRIFT, 0.0, 10, 0,
                    StreamFactory(0), prior=PriorSpec(dim=3))

def test_sample_rejects_empty():
    s = testinfra.small_schedule()
    with pytest.raises(InsufficientSamplesError):
        sample(gaussian_model(s), s, PriorSpec(), NO_DRIFT, 0, 0, StreamFactory(0))

class NaNDenoiser(Denoiser):
    backend = 'nan'

    def predict(self, x_t, t, c):
        return np.full_like(x_t, np.nan)

def test_numeric_failure_names_step():
    Stats.reset()
    s = testinfra.small_schedule()
    with pytest.raises(NumericFailure) as info:
        sample(NaNDenoiser(), s, PriorSpec(), NO_DRIFT, 10, 0, StreamFactory(0))
    assert info.value.step == s.T
    assert Stats.numeric_failures == 1

def test_class_deltas():
    drift = DriftConfig(0.1, class_deltas={1: -0.2})
    assert drift.for_class(0) == 0.1
    assert drift.for_class(1) == -0.2
    assert drift.delta_column(np.array([0, 1, 1])).ravel().tolist() == [0.1, -0.2, -0.2]
    assert DriftMode.parse('PER_STEP') is DriftMode.PER_STEP
    with pytest.raises(InvalidRangeError):
        DriftMode.parse('sideways')
    with pytest.raises(InvalidRangeError):
        DriftConfig(float('nan'))

def test_ddim_deterministic():
    s = testinfra.small_schedule()
    model = gaussian_model(s)
    z = np.random.default_rng(0).standard_normal((50, 1))
    grid = make_subgrid(s.T, 5)
    a = ddim_sample(model, s, grid, NO_DRIFT, 0.0, 50, 0, StreamFactory(1), z_T=z)
    b = ddim_sample(model, s, grid, NO_DRIFT, 0.0, 50, 0, StreamFactory(2), z_T=z)
    assert np.array_equal(a.data, b.data)
    zero = ddim_sample(model, s, grid, DriftConfig(0.0, DriftMode.BOTH), 0.0, 50, 0,
                       StreamFactory(1), z_T=z)
    assert np.array_equal(a.data, zero.data)

def test_ddim_drift_matches_oracle():
    s = testinfra.small_schedule()
    model = gaussian_model(s)
    z = np.random.default_rng(1).standard_normal((30, 1))
    grid = make_subgrid(s.T, 4)
    base = ddim_sample(model, s, grid, NO_DRIFT, 0.0, 30, 0, StreamFactory(1), z_T=z)
    drifted = ddim_sample(model, s, grid, DriftConfig(0.1), 0.0, 30, 0, StreamFactory(1), z_T=z)

    # for N(0,1) data each eta=0 step is linear: x' = D x + delta
    diff = 0.0
    targets = list(grid[1:]) + [0]
    for t, t_prev in zip(grid, targets):
        abar = s.alpha_bar[t - 1]
        abar_prev = 1.0 if t_prev == 0 else s.alpha_bar[t_prev - 1]
        D = math.sqrt(abar_prev * abar) + math.sqrt((1 - abar_prev) * (1 - abar))
        diff = D * diff + 0.1
    assert np.allclose(drifted.data - base.data, diff, atol=1e-8)

def test_ddim_full_grid_matches_ancestral():
    s = make_linear_schedule(10, 1e-3, 0.2, variance_mode='posterior')
    spec = GaussianMixtureSpec.from_config({'classes': [[
        {'weight': 0.5, 'mean': [-1.5], 'std': [0.4]},
        {'weight': 0.5, 'mean': [1.5], 'std': [0.4]}]]})
    model = AnalyticDenoiser(spec, s)
    anc, _ = sample(model, s, PriorSpec(), NO_DRIFT, 5000, 0, StreamFactory(11))
    ddim = ddim_sample(model, s, make_subgrid(s.T, s.T), NO_DRIFT, 1.0, 5000, 0,
                       StreamFactory(12))
    assert sps.ks_2samp(anc.data[:, 0], ddim.data[:, 0]).pvalue > 0.01

def test_ddim_validation():
    s = testinfra.small_schedule()
    model = gaussian_model(s)
    with pytest.raises(InvalidGridError):
        ddim_sample(model, s, [3, 5, 1], NO_DRIFT, 0.0, 5, 0, StreamFactory(0))
    with pytest.raises(InvalidGridError):
        ddim_sample(model, s, [12, 5, 1], NO_DRIFT, 0.0, 5, 0, StreamFactory(0))
    with pytest.raises(InvalidRangeError):
        ddim_sample(model, s, [5, 1], NO_DRIFT, 1.5, 5, 0, StreamFactory(0))
    assert make_subgrid(10, 4).tolist() == [10, 7, 4, 1]
    with pytest.raises(InvalidGridError):
        make_subgrid(10, 11)
