"""Training for the MLP denoiser: the weighted denoising objective

    E_{x,c,ε,t} w_t || ε̂_θ(sqrt(ᾱ_t) x + sqrt(1-ᾱ_t) ε, t, c) - ε ||²

minimized with momentum SGD, plus a finite-difference gradient check and
JSON checkpoints.

With drift.apply_in_training the noise and target become ε + δ·1, which is
how a model is fine-tuned through latent drift.
"""

import json
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .denoiser import AnalyticDenoiser, GaussianMixtureSpec
from .diffusion import DriftConfig, NO_DRIFT, SampleBatch, noise_batch
from .errors import (InvalidRangeError, DivergenceError, CheckpointError,
                     DimMismatchError, InsufficientSamplesError)
from .network import MLPDenoiser, PARAM_ORDER
from .rngstreams import StreamFactory
from .schedule import NoiseSchedule, WEIGHT_MODES, loss_weights
from .stats import Stats
from .driftlab_logger import Logger

logger = logging.getLogger(__name__)
LOGGER = Logger()

CHECKPOINT_FORMAT_VERSION = 1
LOG_EVERY = 500     # steps between INFO loss reports
REL_FLOOR = 1e-6

@dataclass
class TrainConfig:
    """Hyperparameters for one training (or fine-tuning) run."""
    steps: int = 2000
    batch_size: int = 128
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_mode: str = 'uniform'
    drift: DriftConfig = field(default_factory=lambda: NO_DRIFT)
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise InvalidRangeError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise InvalidRangeError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.steps < 0:
            raise InvalidRangeError(f"steps must be >= 0, got {self.steps}")
        if not 0.0 <= self.momentum < 1.0:
            raise InvalidRangeError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_mode not in WEIGHT_MODES:
            raise InvalidRangeError(f"unknown weight_mode {self.weight_mode}")

    def to_manifest(self) -> dict:
        return {'steps': self.steps, 'batch_size': self.batch_size,
                'learning_rate': self.learning_rate, 'momentum': self.momentum,
                'weight_mode': self.weight_mode, 'drift': self.drift.to_manifest(),
                'seed': self.seed}

def build_network(dim: int, n_classes: int, s: NoiseSchedule, net_cfg: dict,
                  seed: int) -> MLPDenoiser:
    """Fresh network with weights from the 'training.init' stream of seed."""
    rng = StreamFactory(seed).stream("training.init")
    return MLPDenoiser(dim, n_classes, s.T, hidden=net_cfg.get('hidden', 64),
                       time_embed=net_cfg.get('time_embed', 16),
                       class_embed=net_cfg.get('class_embed', 8), rng=rng)

def _training_batches(data, s: NoiseSchedule, cfg: TrainConfig,
                      rng: np.random.Generator, weights: np.ndarray):
    """One minibatch: (x_t, t, c, target, w)."""
    x0, c = data.draw(cfg.batch_size, rng)
    t = rng.integers(1, s.T + 1, cfg.batch_size)
    x_t, target = noise_batch(x0, t, s, cfg.drift, c, rng)
    return x_t, t, c, target, weights[t - 1]

def train_denoiser(data, s: NoiseSchedule, cfg: TrainConfig,
                   init: Optional[MLPDenoiser] = None, net_cfg: dict = None,
                   on_step: Callable = None):
    """Train (or fine-tune, when init is given) an MLP denoiser.

    Args:
        data: anything with draw(n, rng) -> (x0, labels), e.g. a
            GaussianMixtureSpec or a SampleBatch
        s: noise schedule
        cfg: hyperparameters; batch order and init are fixed by cfg.seed
        init: starting model.  Not modified; training works on a copy.
        net_cfg: layer widths when init is None
        on_step: optional callback(step, loss)

    Returns:
        (model, loss_curve).  Zero steps returns init itself and an empty curve.
    """
    if isinstance(data, SampleBatch) and data.n < 1:
        raise InsufficientSamplesError("training data is empty")
    model = init if init is not None else build_network(
        data.dim, data.n_classes, s, net_cfg or {}, cfg.seed)
    if model.dim != data.dim:
        raise DimMismatchError(f"model dim {model.dim} != data dim {data.dim}")
    if cfg.steps == 0:
        return model, np.zeros(0)

    model = model.copy()
    rng = StreamFactory(cfg.seed).stream("training.batches")
    weights = loss_weights(s.alpha_bar, cfg.weight_mode)
    velocity = OrderedDict((k, np.zeros_like(v)) for k, v in model.params.items())
    losses = np.empty(cfg.steps)

    for step in range(cfg.steps):
        x_t, t, c, target, w = _training_batches(data, s, cfg, rng, weights)
        loss, grads = model.loss_and_grads(x_t, t, c, target, w)
        if not np.isfinite(loss):
            Stats.increment("numeric_failures")
            logger.error("Training diverged at step %d", step)
            raise DivergenceError(f"loss became non-finite at step {step}", step=step)
        for k in model.params:
            velocity[k] = cfg.momentum * velocity[k] - cfg.learning_rate * grads[k]
            model.params[k] = model.params[k] + velocity[k]
        losses[step] = loss
        Stats.increment("train_steps")
        if on_step:
            on_step(step, loss)
        if (step + 1) % LOG_EVERY == 0:
            logger.info("step %d/%d loss %.5f", step + 1, cfg.steps,
                        losses[max(0, step - LOG_EVERY + 1):step + 1].mean())

    return model, losses

def evaluate_loss(model, data, s: NoiseSchedule, cfg: TrainConfig,
                  n_batches: int = 20) -> float:
    """Mean weighted denoising loss of any Denoiser over n_batches fixed
    minibatches (the same ones for every model given the same cfg.seed).
    With an AnalyticDenoiser this estimates the best achievable loss."""
    rng = StreamFactory(cfg.seed).stream("training.eval")
    weights = loss_weights(s.alpha_bar, cfg.weight_mode)
    total = 0.0
    for _ in range(n_batches):
        x_t, t, c, target, w = _training_batches(data, s, cfg, rng, weights)
        resid = model.predict(x_t, t, c) - target
        total += float(np.sum(w[:, None] * resid ** 2) / resid.size)
    return total / n_batches

def expected_oracle_loss(spec: GaussianMixtureSpec, s: NoiseSchedule,
                         cfg: TrainConfig, n_batches: int = 20) -> float:
    """Loss of the exact posterior ε predictor on the batches evaluate_loss
    uses for cfg.  A trained net cannot do better in expectation."""
    return evaluate_loss(AnalyticDenoiser(spec, s), spec, s, cfg, n_batches)

@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    n_params: int
    passed: bool
    worst_param: str = ""

def grad_check(model, probe: SampleBatch, tolerance: float = 1e-4,
               step_size: float = 1e-5, s: NoiseSchedule = None) -> GradCheckReport:
    """Compare analytic parameter gradients of the denoising loss with
    central finite differences.

    The probe rows are used as x_t directly; timesteps cycle through 1..T
    and targets are drawn from the probe's seed.  Failures are reported,
    never raised.
    """
    if probe.n < 1:
        raise InsufficientSamplesError("probe is empty")
    rng = StreamFactory(probe.seed or 0).stream("training.gradcheck")
    T = getattr(model, 'T', 1)
    t = 1 + np.arange(probe.n) % T
    target = rng.standard_normal(probe.data.shape)
    w = np.ones(probe.n) if s is None else s.w[t - 1]
    x, c = probe.data, probe.condition

    _, grads = model.loss_and_grads(x, t, c, target, w)
    analytic = np.concatenate([np.ravel(grads[k]) for k in grads])
    names = [k for k in grads for _ in range(np.size(grads[k]))]

    theta = model.flat_params()
    numeric = np.empty_like(theta)
    try:
        for i in range(theta.size):
            orig = theta[i]
            theta[i] = orig + step_size
            model.set_flat_params(theta)
            plus, _ = model.loss_and_grads(x, t, c, target, w)
            theta[i] = orig - step_size
            model.set_flat_params(theta)
            minus, _ = model.loss_and_grads(x, t, c, target, w)
            theta[i] = orig
            numeric[i] = (plus - minus) / (2 * step_size)
    finally:
        model.set_flat_params(theta)

    abs_err = np.abs(numeric - analytic)
    # parameters whose gradient is below the floor are judged on absolute error
    rel_err = abs_err / np.maximum(np.abs(numeric) + np.abs(analytic), REL_FLOOR)
    worst = int(np.argmax(rel_err))
    report = GradCheckReport(float(rel_err.max()), float(abs_err.max()),
                             int(theta.size), bool(rel_err.max() <= tolerance),
                             names[worst])
    log = logger.info if report.passed else logger.warning
    log("grad check: max rel error %.3e over %d params (worst in %s)",
        report.max_rel_error, report.n_params, report.worst_param)
    return report

def save_checkpoint(model: MLPDenoiser, path: str, schedule_id: str,
                    manifest: dict = None) -> None:
    """JSON checkpoint: dims, parameter arrays in declaration order,
    schedule id and the training manifest."""
    doc = {'format_version': CHECKPOINT_FORMAT_VERSION,
           'backend': model.backend,
           'config': model.config(),
           'schedule_id': schedule_id,
           'param_order': list(PARAM_ORDER),
           'params': [model.params[k].tolist() for k in PARAM_ORDER],
           'manifest': manifest or {}}
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(doc, f)

def load_checkpoint(path: str, dim: int = None, n_classes: int = None,
                    schedule_id: str = None) -> MLPDenoiser:
    """Load a checkpoint, checking it against the expected dims."""
    with open(path, 'r', encoding='utf-8') as f:
        doc = json.load(f)
    if doc.get('format_version') != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {doc.get('format_version')}")
    cfg = doc['config']
    if dim is not None and cfg['dim'] != dim:
        raise CheckpointError(f"checkpoint dim {cfg['dim']} != expected {dim}")
    if n_classes is not None and cfg['n_classes'] != n_classes:
        raise CheckpointError(
            f"checkpoint has {cfg['n_classes']} classes, expected {n_classes}")
    if schedule_id is not None and doc['schedule_id'] != schedule_id:
        logger.warning("Checkpoint trained under schedule %s, using %s",
                       doc['schedule_id'], schedule_id)
    params = dict(zip(doc['param_order'], doc['params']))
    try:
        return MLPDenoiser(params=params, **cfg)
    except DimMismatchError as e:
        raise CheckpointError(str(e)) from e
