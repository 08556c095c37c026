"""Noise schedules: the diffusion time discretization and every per-step
coefficient used by the forward process, reverse process and training loss.

Timesteps are 1-indexed.  t=0 denotes clean data x_0; index t maps to
array position t-1."""

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidRangeError, StepIndexError
from .util import content_hash
from .driftlab_logger import Logger

logger = logging.getLogger(__name__)
LOGGER = Logger()

VARIANCE_MODES = ('beta', 'posterior')
WEIGHT_MODES = ('uniform', 'snr')

@dataclass(frozen=True)
class PriorSpec:
    """Gaussian prior p(x_T) = N(mean, std^2 I) over dim coordinates."""
    mean: float = 0.0
    std: float = 1.0
    dim: int = 1

    def __post_init__(self):
        if not self.std > 0:
            raise InvalidRangeError(f"prior std must be > 0, got {self.std}")
        if self.dim < 1:
            raise InvalidRangeError(f"prior dim must be >= 1, got {self.dim}")

@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Per-step coefficients over T steps.  Immutable after construction;
    the arrays are marked read-only so samplers can share one instance.

    Attributes:
        T: number of steps
        beta, alpha, alpha_bar, sigma, w: vectors of length T, index t-1
        params: the constructor parameters, for manifests and schedule_id
    """
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray
    w: np.ndarray
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ('beta', 'alpha', 'alpha_bar', 'sigma', 'w'):
            arr = getattr(self, name)
            assert arr.shape == (self.T,), f"{name} must have length T"
            arr.setflags(write=False)

    @property
    def schedule_id(self) -> str:
        return content_hash(self.params, 12)

    def alpha_bar_prev(self, t: int) -> float:
        """ᾱ_{t-1}, with ᾱ_0 = 1 for clean data."""
        return 1.0 if t == 1 else float(self.alpha_bar[t - 2])

    def to_manifest(self) -> dict:
        return dict(self.params)

def _check_step(s: NoiseSchedule, t: int) -> None:
    if not 1 <= t <= s.T:
        raise StepIndexError(f"timestep {t} outside 1..{s.T}")

def alpha_bar_at(s: NoiseSchedule, t: int) -> float:
    """Return ᾱ_t = prod_{s<=t} α_s."""
    _check_step(s, t)
    return float(s.alpha_bar[t - 1])

def loss_weights(alpha_bar: np.ndarray, weight_mode: str) -> np.ndarray:
    if weight_mode == 'uniform':
        return np.ones_like(alpha_bar)
    # SNR weighting, normalized to mean 1 so learning rates stay comparable.
    with np.errstate(divide='ignore'):
        snr = alpha_bar / (1.0 - alpha_bar)
    snr = np.where(np.isfinite(snr), snr, 1.0)
    return snr / snr.mean()

def make_linear_schedule(T: int, beta_start: float, beta_end: float,
                         variance_mode: str = 'beta',
                         weight_mode: str = 'uniform',
                         allow_degenerate: bool = False) -> NoiseSchedule:
    """Linear β from beta_start to beta_end inclusive.

    variance_mode 'beta' fixes σ_t² = β_t.  'posterior' uses the forward
    posterior variance β_t (1-ᾱ_{t-1}) / (1-ᾱ_t).
    allow_degenerate permits β = 0 (ᾱ_t = 1 throughout), for test builds only.
    """
    if int(T) != T or T < 1:
        raise InvalidRangeError(f"T must be a positive integer, got {T}")
    low_ok = beta_start >= 0 if allow_degenerate else beta_start > 0
    if not (low_ok and beta_start <= beta_end < 1):
        raise InvalidRangeError(
            f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if variance_mode not in VARIANCE_MODES:
        raise InvalidRangeError(f"unknown variance_mode {variance_mode}")
    if weight_mode not in WEIGHT_MODES:
        raise InvalidRangeError(f"unknown weight_mode {weight_mode}")

    T = int(T)
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)

    if variance_mode == 'beta':
        sigma = np.sqrt(beta)
    else:
        alpha_bar_prev = np.concatenate(([1.0], alpha_bar[:-1]))
        denom = 1.0 - alpha_bar
        post = np.divide(beta * (1.0 - alpha_bar_prev), denom,
                         out=np.zeros_like(beta), where=denom > 0)
        sigma = np.sqrt(post)

    params = {'T': T, 'beta_start': float(beta_start),
              'beta_end': float(beta_end), 'variance_mode': variance_mode,
              'weight_mode': weight_mode}
    logger.debug("Built schedule %s", params)
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar,
                         sigma=sigma, w=loss_weights(alpha_bar, weight_mode),
                         params=params)

def make_schedule(cfg: dict) -> NoiseSchedule:
    """Build a schedule from a config mapping (the `schedule` section)."""
    return make_linear_schedule(cfg['T'], cfg['beta_start'], cfg['beta_end'],
                                cfg.get('variance_mode', 'beta'),
                                cfg.get('weight_mode', 'uniform'))
