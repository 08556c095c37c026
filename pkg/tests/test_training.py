"""Tests of denoiser training, the gradient check and checkpoints."""

import json
from collections import OrderedDict

import numpy as np
import pytest

import testinfra
from driftlab.config import Config
from driftlab.denoiser import GaussianMixtureSpec
from driftlab.diffusion import SampleBatch, DriftConfig
from driftlab.errors import (CheckpointError, DimMismatchError, DivergenceError,
                             InvalidRangeError)
from driftlab.network import MLPDenoiser, time_embedding
from driftlab.schedule import make_schedule
from driftlab.stats import Stats
from driftlab.training import (TrainConfig, build_network, train_denoiser, grad_check,
                               save_checkpoint, load_checkpoint, evaluate_loss,
                               expected_oracle_loss)

class LinearModel:
    """ε̂ = θ x with one parameter and the squared loss."""

    def __init__(self, theta=0.7):
        self.theta = float(theta)

    def loss_and_grads(self, x, t, c, target, w):
        resid = self.theta * x - target
        n = x.shape[0]
        loss = float(np.sum(w[:, None] * resid ** 2) / n)
        grad = float(np.sum(w[:, None] * 2 * resid * x) / n)
        return loss, OrderedDict(theta=np.array([grad]))

    def flat_params(self):
        return np.array([self.theta])

    def set_flat_params(self, theta):
        self.theta = float(theta[0])

class CorruptedModel:
    """Wraps a model and scales its analytic gradients by 1.5."""

    def __init__(self, model):
        self.model = model
        self.T = model.T

    def loss_and_grads(self, *args):
        loss, grads = self.model.loss_and_grads(*args)
        return loss, OrderedDict((k, 1.5 * v) for k, v in grads.items())

    def flat_params(self):
        return self.model.flat_params()

    def set_flat_params(self, theta):
        self.model.set_flat_params(theta)

def probe_batch(n=16, seed=3):
    rng = np.random.default_rng(seed)
    return SampleBatch(rng.standard_normal((n, 1)), rng.integers(0, 2, n), seed)

def test_grad_check_linear_exact():
    probe = SampleBatch(np.linspace(1.0, 3.0, 8)[:, None], 0, 1)
    report = grad_check(LinearModel(), probe)
    assert report.n_params == 1
    assert report.max_rel_error <= 1e-9
    assert report.passed

def test_grad_check_network():
    s = testinfra.small_schedule()
    net = build_network(1, 2, s, {}, seed=0)
    before = net.flat_params().copy()
    report = grad_check(net, probe_batch(), tolerance=1e-4, step_size=1e-5)
    assert report.passed, report
    assert report.n_params == net.n_params
    assert np.array_equal(net.flat_params(), before)

def test_grad_check_negative_control():
    s = testinfra.small_schedule()
    net = build_network(1, 2, s, {}, seed=0)
    report = grad_check(CorruptedModel(net), probe_batch())
    assert report.max_rel_error > 1e-2
    assert not report.passed

def test_network_shapes():
    s = testinfra.small_schedule()
    net = build_network(2, 3, s, {'hidden': 8, 'time_embed': 4, 'class_embed': 2}, seed=1)
    assert net.n_params == 3 * 2 + (2 + 4 + 2) * 8 + 8 + 8 * 8 + 8 + 8 * 2 + 2
    y = net.predict(np.zeros((5, 2)), 3, np.array([0, 1, 2, 0, 1]))
    assert y.shape == (5, 2)
    with pytest.raises(DimMismatchError):
        net.predict(np.zeros((5, 3)), 3, 0)
    emb = time_embedding([1, 2], 4)
    assert emb.shape == (2, 4)
    assert emb[0, 0] == pytest.approx(np.sin(1.0))

def test_zero_steps_returns_init():
    s = testinfra.small_schedule()
    net = build_network(1, 1, s, {}, seed=0)
    out, losses = train_denoiser(GaussianMixtureSpec.gaussian(), s,
                                 TrainConfig(steps=0), init=net)
    assert out is net
    assert losses.size == 0

def test_training_deterministic_and_improves():
    Stats.reset()
    s = testinfra.small_schedule()
    cfg = TrainConfig(steps=600, batch_size=64, seed=4)
    spec = GaussianMixtureSpec.gaussian()
    a, losses_a = train_denoiser(spec, s, cfg, net_cfg={'hidden': 32})
    b, losses_b = train_denoiser(spec, s, cfg, net_cfg={'hidden': 32})
    assert np.array_equal(losses_a, losses_b)
    assert np.array_equal(a.flat_params(), b.flat_params())
    assert losses_a[-100:].mean() < losses_a[:100].mean()
    assert Stats.train_steps == 1200

@pytest.mark.parametrize("seed", [0, 1, 2])
def test_default_training_loss_smoothly_nonincreasing(seed):
    defaults = Config().vars
    s = make_schedule(defaults['schedule'])
    cfg = TrainConfig(**defaults['training'], seed=seed)
    _, losses = train_denoiser(GaussianMixtureSpec.gaussian(), s, cfg,
                               net_cfg=defaults['network'])
    blocks = losses[:cfg.steps // 2].reshape(-1, 100)
    means = blocks.mean(axis=1)
    se = blocks.std(axis=1, ddof=1) / np.sqrt(blocks.shape[1])
    for i in range(1, len(means)):
        assert means[i] <= means[i - 1] + 4 * np.hypot(se[i], se[i - 1]), (i, means)

def test_finetune_leaves_init_untouched():
    s = testinfra.small_schedule()
    spec = GaussianMixtureSpec.gaussian()
    pre, _ = train_denoiser(spec, s, TrainConfig(steps=50, seed=1), net_cfg={'hidden': 16})
    before = pre.flat_params().copy()
    target = SampleBatch(np.random.default_rng(0).normal(0.5, 1.0, (500, 1)), 0)
    drift = DriftConfig(0.1, apply_in_training=True)
    tuned, losses = train_denoiser(target, s, TrainConfig(steps=50, seed=1, drift=drift),
                                   init=pre)
    assert np.array_equal(pre.flat_params(), before)
    assert not np.array_equal(tuned.flat_params(), before)
    assert losses.size == 50

def test_divergence():
    Stats.reset()
    s = testinfra.small_schedule()
    cfg = TrainConfig(steps=500, learning_rate=1e6, momentum=0.9, seed=0)
    with pytest.raises(DivergenceError) as info:
        with np.errstate(all='ignore'):
            train_denoiser(GaussianMixtureSpec.gaussian(), s, cfg, net_cfg={'hidden': 8})
    assert info.value.step is not None
    assert Stats.numeric_failures == 1

def test_train_config_validation():
    with pytest.raises(InvalidRangeError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(InvalidRangeError):
        TrainConfig(batch_size=0)
    with pytest.raises(InvalidRangeError):
        TrainConfig(weight_mode='log')

def test_oracle_lower_bounds_untrained():
    s = testinfra.small_schedule()
    spec = GaussianMixtureSpec.gaussian()
    cfg = TrainConfig(seed=2)
    oracle = expected_oracle_loss(spec, s, cfg)
    # for N(0,1) data Var(ε | x_t) = ᾱ_t
    assert oracle == pytest.approx(s.alpha_bar.mean(), rel=0.1)
    untrained = build_network(1, 1, s, {}, seed=0)
    assert evaluate_loss(untrained, spec, s, cfg) > oracle

def test_checkpoint_round_trip(tmp_path):
    s = testinfra.small_schedule()
    net = build_network(2, 2, s, {'hidden': 8}, seed=5)
    path = tmp_path / "model.json"
    save_checkpoint(net, str(path), s.schedule_id, {'note': 'test'})
    loaded = load_checkpoint(str(path), dim=2, n_classes=2, schedule_id=s.schedule_id)
    x = np.random.default_rng(0).standard_normal((4, 2))
    assert np.array_equal(loaded.predict(x, 3, 1), net.predict(x, 3, 1))

    with pytest.raises(CheckpointError):
        load_checkpoint(str(path), dim=1)
    with pytest.raises(CheckpointError):
        load_checkpoint(str(path), n_classes=3)

    doc = json.loads(path.read_text())
    doc['format_version'] = 99
    path.write_text(json.dumps(doc))
    with pytest.raises(CheckpointError):
        load_checkpoint(str(path))
