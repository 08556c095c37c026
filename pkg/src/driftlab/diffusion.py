"""Forward noising, drifted reverse sampling (ancestral and DDIM), and
per-step trajectory diagnostics.

Latent drift is a signed scalar δ, broadcast as δ·1 over all coordinates.
Depending on DriftConfig.mode it shifts the prior draw z_T, every reverse
step's mean, or both:

    p(x_{t-1} | x_t) = N(μ_θ(x_t, t) + δ, σ_t² I)

μ_θ is reconstructed from the ε prediction with the DDPM posterior mean
    μ_θ = (x_t - β_t / sqrt(1 - ᾱ_t) ε̂) / sqrt(α_t)
The final step (t=1) adds no noise.
"""

import enum
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .denoiser import Denoiser, x0_from_eps
from .errors import (InvalidRangeError, InvalidGridError, NumericFailure,
                     InsufficientSamplesError, DimMismatchError)
from .rngstreams import StreamFactory, blocks
from .schedule import NoiseSchedule, PriorSpec, alpha_bar_at
from .stats import Stats
from .driftlab_logger import Logger

logger = logging.getLogger(__name__)
LOGGER = Logger()

class DriftMode(enum.Enum):
    PRIOR_ONLY = 'prior'
    PER_STEP = 'per-step'
    BOTH = 'both'

    @classmethod
    def parse(cls, value) -> "DriftMode":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower().replace('_', '-'))
        except ValueError:
            raise InvalidRangeError(
                f"unknown drift mode {value!r}, expected one of "
                f"{[m.value for m in cls]}") from None

@dataclass(frozen=True)
class DriftConfig:
    """Latent drift settings.

    Attributes:
        delta: global signed drift δ
        mode: where δ is applied at sampling time
        apply_in_training: drift the forward noise target during fine-tuning
        class_deltas: optional per-class δ overrides, label -> δ
    """
    delta: float = 0.0
    mode: DriftMode = DriftMode.PER_STEP
    apply_in_training: bool = False
    class_deltas: Optional[dict] = None

    def __post_init__(self):
        object.__setattr__(self, 'mode', DriftMode.parse(self.mode))
        values = [self.delta] + list((self.class_deltas or {}).values())
        if not all(math.isfinite(v) for v in values):
            raise InvalidRangeError(f"drift must be finite, got {values}")

    @property
    def shifts_prior(self) -> bool:
        return self.mode in (DriftMode.PRIOR_ONLY, DriftMode.BOTH)

    @property
    def shifts_steps(self) -> bool:
        return self.mode in (DriftMode.PER_STEP, DriftMode.BOTH)

    def for_class(self, label: int) -> float:
        if self.class_deltas and int(label) in self.class_deltas:
            return float(self.class_deltas[int(label)])
        return float(self.delta)

    def delta_column(self, labels: np.ndarray) -> np.ndarray:
        """δ for each row, shaped (N, 1) for broadcasting over coordinates."""
        if not self.class_deltas:
            return np.full((len(labels), 1), float(self.delta))
        return np.array([self.for_class(c) for c in labels],
                        dtype=np.float64)[:, None]

    def with_delta(self, delta: float) -> "DriftConfig":
        return DriftConfig(delta, self.mode, self.apply_in_training, self.class_deltas)

    def to_manifest(self) -> dict:
        out = {'delta': self.delta, 'mode': self.mode.value,
               'apply_in_training': self.apply_in_training}
        if self.class_deltas:
            out['class_deltas'] = {int(k): float(v) for k, v in self.class_deltas.items()}
        return out

NO_DRIFT = DriftConfig()

@dataclass
class SampleBatch:
    """N labeled samples.

    Attributes:
        data: (N, dim) sample values
        condition: (N,) integer class labels
        seed: seed of the stream that produced the batch, if any
        schedule_id: id of the producing schedule, if any
    """
    data: np.ndarray
    condition: np.ndarray
    seed: Optional[int] = None
    schedule_id: Optional[str] = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim == 1:
            self.data = self.data[:, None]
        if self.data.shape[0] < 1:
            raise InsufficientSamplesError("a batch needs at least one sample")
        self.condition = np.broadcast_to(
            np.asarray(self.condition, dtype=np.int64), (self.data.shape[0],)).copy()
        if not np.all(np.isfinite(self.data)):
            raise NumericFailure("batch contains non-finite values")

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    @property
    def n_classes(self) -> int:
        return int(self.condition.max()) + 1

    def draw(self, n: int, rng: np.random.Generator, labels=None):
        """Resample n rows with replacement, so a fixed batch can act as a
        training data source like GaussianMixtureSpec.draw()."""
        if labels is None:
            idx = rng.integers(0, self.n, n)
        else:
            pool = np.flatnonzero(self.condition == labels)
            idx = pool[rng.integers(0, pool.size, n)]
        return self.data[idx], self.condition[idx]

@dataclass
class Trajectory:
    """Per-step statistics of x_t during one reverse run.

    Index 0 is the start (t=T), index T is the end (t=0).

    Attributes:
        steps: the t value at each index
        per_step_mean, per_step_std: mean/std over all samples and coordinates
        per_channel_mean: (T+1, dim) coordinate-wise means
        terminal_latent_stats: mean/std of the starting latent z_T and of
            the final x_0
    """
    steps: np.ndarray
    per_step_mean: np.ndarray
    per_step_std: np.ndarray
    per_channel_mean: np.ndarray
    terminal_latent_stats: dict = field(default_factory=dict)

    def __post_init__(self):
        assert len(self.steps) == len(self.per_step_mean) == len(self.per_step_std)

class _StepAccumulator:
    """Running per-step sums for one block; merged in block order."""

    def __init__(self, n_steps: int, dim: int):
        self.count = 0
        self.sums = np.zeros((n_steps, dim))
        self.sumsq = np.zeros(n_steps)

    def add(self, index: int, x: np.ndarray):
        self.sums[index] += x.sum(axis=0)
        self.sumsq[index] += np.sum(x ** 2)

    def merge(self, other: "_StepAccumulator"):
        self.count += other.count
        self.sums += other.sums
        self.sumsq += other.sumsq

def _check_n(n: int):
    if n < 1:
        raise InsufficientSamplesError(f"need n >= 1 samples, got {n}")

def _labels(cond, n: int) -> np.ndarray:
    return np.broadcast_to(np.asarray(cond, dtype=np.int64), (n,)).copy()

def _check_finite(values: np.ndarray, t: int, what: str):
    if not np.all(np.isfinite(values)):
        Stats.increment("numeric_failures")
        logger.error("Non-finite %s at step %d", what, t)
        raise NumericFailure(f"non-finite {what} at step {t}", step=t)

def noise_batch(x0: np.ndarray, t: np.ndarray, s: NoiseSchedule,
                drift: DriftConfig, labels: np.ndarray,
                rng: Optional[np.random.Generator] = None,
                noise: Optional[np.ndarray] = None):
    """Vectorized closed-form forward noising at per-row steps t.
    Returns (x_t, regression target)."""
    abar = s.alpha_bar[np.asarray(t) - 1][:, None]
    eps = rng.standard_normal(x0.shape) if noise is None else noise
    if drift.apply_in_training:
        eps = eps + drift.delta_column(labels)
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps, eps

def forward_sample(x0: SampleBatch, t: int, s: NoiseSchedule,
                   drift: DriftConfig, rng: Optional[np.random.Generator] = None,
                   noise: Optional[np.ndarray] = None):
    """x_t = sqrt(ᾱ_t) x_0 + sqrt(1 - ᾱ_t) ε, ε ~ N(0, I).  When
    drift.apply_in_training the noise (and so the target) is ε + δ·1."""
    alpha_bar_at(s, t)
    steps = np.full(x0.n, t, dtype=np.int64)
    xt, target = noise_batch(x0.data, steps, s, drift, x0.condition, rng, noise)
    return SampleBatch(xt, x0.condition, x0.seed, s.schedule_id), target

def posterior_mean(model: Denoiser, x_t: np.ndarray, t: int, c: np.ndarray,
                   s: NoiseSchedule) -> np.ndarray:
    """Undrifted μ_θ(x_t, t) from the model's ε prediction."""
    eps = model.predict(x_t, t, c)
    _check_finite(eps, t, "model output")
    beta = s.beta[t - 1]
    noise_scale = math.sqrt(1.0 - s.alpha_bar[t - 1])
    coef = beta / noise_scale if noise_scale > 0 else 0.0
    return (x_t - coef * eps) / math.sqrt(s.alpha[t - 1])

def posterior_mean_x0_form(x0_hat: np.ndarray, x_t: np.ndarray, t: int,
                           s: NoiseSchedule) -> np.ndarray:
    """The same posterior mean written in terms of an x_0 prediction:
    sqrt(ᾱ_{t-1}) β_t / (1-ᾱ_t) x̂_0 + sqrt(α_t) (1-ᾱ_{t-1}) / (1-ᾱ_t) x_t"""
    abar = s.alpha_bar[t - 1]
    abar_prev = s.alpha_bar_prev(t)
    return (math.sqrt(abar_prev) * s.beta[t - 1] / (1.0 - abar) * x0_hat
            + math.sqrt(s.alpha[t - 1]) * (1.0 - abar_prev) / (1.0 - abar) * x_t)

def reverse_step(xt: SampleBatch, t: int, model: Denoiser, s: NoiseSchedule,
                 drift: DriftConfig, rng: Optional[np.random.Generator] = None,
                 noise: Optional[np.ndarray] = None) -> SampleBatch:
    """One ancestral step x_t -> x_{t-1}.  The step noise is `noise` when
    given (N x dim standard normals), otherwise drawn from rng."""
    alpha_bar_at(s, t)
    Stats.increment("reverse_steps")
    mean = posterior_mean(model, xt.data, t, xt.condition, s)
    if drift.shifts_steps:
        mean = mean + drift.delta_column(xt.condition)
    if t > 1:
        if noise is None:
            noise = rng.standard_normal(mean.shape)
        mean = mean + s.sigma[t - 1] * noise
    _check_finite(mean, t, "reverse step output")
    logger.debug("reverse step t=%d mean %.5f", t, mean.mean())
    return SampleBatch(mean, xt.condition, xt.seed, s.schedule_id)

def _draw_prior(prior: PriorSpec, drift: DriftConfig, labels: np.ndarray,
                normals: np.ndarray, z_T=None) -> np.ndarray:
    if z_T is None:
        z = prior.mean + prior.std * normals
    else:
        z = np.array(z_T, dtype=np.float64).reshape(normals.shape)
    if drift.shifts_prior:
        z = z + drift.delta_column(labels)
    return z

def _check_prior_dim(prior: PriorSpec, model: Denoiser):
    if prior.dim != model.dim:
        raise DimMismatchError(f"prior dim {prior.dim} != model dim {model.dim}")

def _run_blocks(fn, n: int, threads: int):
    work = list(blocks(n))
    if threads > 1 and len(work) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(lambda b: fn(*b), work))
    return [fn(*b) for b in work]

def _assemble(results, n, dim, record, steps, labels, streams, s):
    data = np.concatenate([r[0] for r in results], axis=0)
    batch = SampleBatch(data, labels, streams.seed, s.schedule_id)
    Stats.increment("samples_generated", n)
    if not record:
        return batch, None

    acc = _StepAccumulator(len(steps), dim)
    for _, block_acc in results:
        acc.merge(block_acc)
    values = acc.count * dim
    means = acc.sums.sum(axis=1) / values
    stds = np.sqrt(np.maximum(acc.sumsq / values - means ** 2, 0.0))
    traj = Trajectory(
        steps=np.asarray(steps), per_step_mean=means, per_step_std=stds,
        per_channel_mean=acc.sums / acc.count,
        terminal_latent_stats={'z_T_mean': float(means[0]), 'z_T_std': float(stds[0]),
                               'x_0_mean': float(means[-1]), 'x_0_std': float(stds[-1])})
    return batch, traj

def sample(model: Denoiser, s: NoiseSchedule, prior: PriorSpec,
           drift: DriftConfig, n: int, cond, rng: StreamFactory,
           record: bool = False, threads: int = 1, z_T=None):
    """Ancestral sampling from t=T down to 1.

    Sample i draws all of its noise (prior draw and every step) from the
    substream keyed by its index i, so output i depends neither on n nor on
    whether blocks run serially or on `threads` workers.  z_T optionally
    fixes the starting noise (N x dim), e.g. to compare conditions on
    identical noise.

    Returns (SampleBatch, Trajectory or None)."""
    _check_n(n)
    _check_prior_dim(prior, model)
    labels = _labels(cond, n)
    dim = model.dim
    steps = list(range(s.T, -1, -1))

    def run_block(b, start, stop):
        # noise[:, 0] is the prior draw, noise[:, i] feeds the i-th step
        noise = rng.row_normals("diffusion.sample", start, stop, (s.T + 1, dim))
        zb = None if z_T is None else np.asarray(z_T)[start:stop]
        x = SampleBatch(_draw_prior(prior, drift, labels[start:stop], noise[:, 0], zb),
                        labels[start:stop], rng.seed, s.schedule_id)
        acc = _StepAccumulator(len(steps), dim) if record else None
        if record:
            acc.count = x.n
            acc.add(0, x.data)
        for i, t in enumerate(range(s.T, 0, -1)):
            x = reverse_step(x, t, model, s, drift, noise=noise[:, i + 1])
            if record:
                acc.add(i + 1, x.data)
        return x.data, acc

    results = _run_blocks(run_block, n, threads)
    logger.debug("Sampled %d with delta %s mode %s", n, drift.delta, drift.mode.value)
    return _assemble(results, n, dim, record, steps, labels, rng, s)

def make_subgrid(T: int, n_steps: int) -> np.ndarray:
    """Evenly spaced strictly decreasing steps from T down to 1."""
    if not 1 <= n_steps <= T:
        raise InvalidGridError(f"need 1 <= n_steps <= T, got {n_steps}")
    grid = np.unique(np.round(np.linspace(1, T, n_steps)).astype(np.int64))[::-1]
    return grid.copy()

def _check_subgrid(subgrid, T: int) -> np.ndarray:
    grid = np.asarray(subgrid, dtype=np.int64)
    if grid.ndim != 1 or grid.size == 0:
        raise InvalidGridError("subgrid must be a non-empty vector")
    if np.any(np.diff(grid) >= 0):
        raise InvalidGridError(f"subgrid must be strictly decreasing: {grid.tolist()}")
    if grid[0] > T or grid[-1] < 1:
        raise InvalidGridError(f"subgrid must lie within [1, {T}]")
    return grid

def ddim_step(x: np.ndarray, t: int, t_prev: int, model: Denoiser,
              s: NoiseSchedule, drift: DriftConfig, eta: float,
              labels: np.ndarray, rng: Optional[np.random.Generator] = None,
              noise: Optional[np.ndarray] = None) -> np.ndarray:
    """One DDIM update from t to t_prev (t_prev = 0 means clean data).
    With eta > 0 the step noise is `noise` when given, else drawn from rng."""
    Stats.increment("reverse_steps")
    abar = s.alpha_bar[t - 1]
    abar_prev = 1.0 if t_prev == 0 else s.alpha_bar[t_prev - 1]
    eps = model.predict(x, t, labels)
    _check_finite(eps, t, "model output")
    x0_hat = x0_from_eps(x, eps, abar)

    sigma = 0.0
    if eta > 0 and abar < 1.0:
        sigma = eta * math.sqrt((1.0 - abar_prev) / (1.0 - abar)
                                * (1.0 - abar / abar_prev))
    mean = (math.sqrt(abar_prev) * x0_hat
            + math.sqrt(max(1.0 - abar_prev - sigma ** 2, 0.0)) * eps)
    if drift.shifts_steps:
        mean = mean + drift.delta_column(labels)
    if sigma > 0:
        if noise is None:
            noise = rng.standard_normal(mean.shape)
        mean = mean + sigma * noise
    _check_finite(mean, t, "DDIM step output")
    return mean

def ddim_sample(model: Denoiser, s: NoiseSchedule, subgrid, drift: DriftConfig,
                eta: float, n: int, cond, rng: StreamFactory,
                prior: PriorSpec = None, threads: int = 1, z_T=None) -> SampleBatch:
    """DDIM over a strictly decreasing subgrid of steps, ending at x_0.
    Deterministic given z_T when eta = 0."""
    _check_n(n)
    grid = _check_subgrid(subgrid, s.T)
    if not 0.0 <= eta <= 1.0:
        raise InvalidRangeError(f"eta must be in [0, 1], got {eta}")
    prior = prior or PriorSpec(dim=model.dim)
    _check_prior_dim(prior, model)
    labels = _labels(cond, n)
    dim = model.dim
    targets = list(grid[1:]) + [0]

    def run_block(b, start, stop):
        noise = rng.row_normals("diffusion.ddim", start, stop, (len(grid) + 1, dim))
        zb = None if z_T is None else np.asarray(z_T)[start:stop]
        lab = labels[start:stop]
        x = _draw_prior(prior, drift, lab, noise[:, 0], zb)
        for i, (t, t_prev) in enumerate(zip(grid, targets)):
            x = ddim_step(x, int(t), int(t_prev), model, s, drift, eta, lab,
                          noise=noise[:, i + 1])
        return x, None

    results = _run_blocks(run_block, n, threads)
    batch, _ = _assemble(results, n, dim, False, [], labels, rng, s)
    return batch
