"""The conditional noise predictor ε̂_θ(x_t, t, c) behind both samplers.

Two backends implement the Denoiser interface:
    AnalyticDenoiser: exact prediction for Gaussian-mixture data, computed
        from the closed-form posterior E[x_0 | x_t].  Used as an oracle.
    MLPDenoiser (network.py): a small trainable net.

Predictions are in ε-form.  The x_0-form and ε-form are related by
    x̂_0 = (x_t - sqrt(1 - ᾱ_t) ε̂) / sqrt(ᾱ_t)
"""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp, softmax

from .errors import InvalidRangeError, LabelOutOfRangeError, DimMismatchError
from .schedule import NoiseSchedule, alpha_bar_at
from .driftlab_logger import Logger

logger = logging.getLogger(__name__)
LOGGER = Logger()

class Denoiser(ABC):
    """Conditional ε predictor.  Implementations must be safe for concurrent
    read-only use: predict() never mutates the model.

    Attributes:
        backend: short tag, 'analytic' or 'mlp'
        dim: data dimension
        n_classes: number of class labels, labels are 0..n_classes-1
    """
    backend: str = ""
    dim: int = 1
    n_classes: int = 1

    @abstractmethod
    def predict(self, x_t: np.ndarray, t, c: np.ndarray) -> np.ndarray:
        """Return ε̂ with the same shape as x_t (N x dim).  t is a scalar
        step or a length-N vector of steps; c is a length-N label vector."""

    def check_labels(self, c: np.ndarray) -> None:
        if c.size and (c.min() < 0 or c.max() >= self.n_classes):
            raise LabelOutOfRangeError(
                f"labels must be in 0..{self.n_classes - 1}, got {np.unique(c)}")

    def metadata(self) -> dict:
        return {'backend': self.backend, 'dim': self.dim,
                'n_classes': self.n_classes}

@dataclass(frozen=True)
class MixtureComponent:
    """One diagonal-covariance Gaussian."""
    weight: float
    mean: tuple
    var: tuple

    def __post_init__(self):
        if self.weight < 0:
            raise InvalidRangeError("component weight must be >= 0")
        if len(self.mean) != len(self.var):
            raise DimMismatchError("component mean and var differ in length")
        if min(self.var) <= 0:
            raise InvalidRangeError("component variances must be > 0")

@dataclass
class GaussianMixtureSpec:
    """Per-class Gaussian mixtures with diagonal covariances.

    Attributes:
        classes: list indexed by class label, each a list of components
            whose weights sum to 1
    """
    classes: list = field(default_factory=list)

    def __post_init__(self):
        if not self.classes:
            raise InvalidRangeError("mixture needs at least one class")
        dims = set()
        for label, comps in enumerate(self.classes):
            if not comps:
                raise InvalidRangeError(f"class {label} has no components")
            total = sum(comp.weight for comp in comps)
            if abs(total - 1.0) > 1e-9:
                raise InvalidRangeError(
                    f"class {label} weights sum to {total}, not 1")
            dims.update(len(comp.mean) for comp in comps)
        if len(dims) != 1:
            raise DimMismatchError(f"components disagree on dim: {sorted(dims)}")

        # stacked arrays, per class: weights (K,), means (K,d), vars (K,d)
        self._arrays = [(np.array([comp.weight for comp in comps]),
                         np.array([comp.mean for comp in comps], dtype=float),
                         np.array([comp.var for comp in comps], dtype=float))
                        for comps in self.classes]

    @property
    def dim(self) -> int:
        return len(self.classes[0][0].mean)

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    @classmethod
    def gaussian(cls, mean: float = 0.0, std: float = 1.0, dim: int = 1):
        """Single-class, single-component N(mean, std^2 I)."""
        return cls([[MixtureComponent(1.0, (float(mean),) * dim,
                                      (float(std) ** 2,) * dim)]])

    @classmethod
    def from_config(cls, cfg: dict):
        """Build from the config form:
            classes:
              - [ {weight: 1.0, mean: [-2.0], std: [0.5]} ]
              - [ {weight: 1.0, mean: [2.0], std: [0.5]} ]
        A bare {mean, std, dim} mapping means one Gaussian."""
        if 'classes' not in cfg:
            return cls.gaussian(cfg.get('mean', 0.0), cfg.get('std', 1.0),
                                cfg.get('dim', 1))
        classes = []
        for comps in cfg['classes']:
            classes.append([MixtureComponent(
                float(comp.get('weight', 1.0)),
                tuple(float(m) for m in comp['mean']),
                tuple(float(sd) ** 2 for sd in comp['std'])) for comp in comps])
        return cls(classes)

    def class_arrays(self, label: int):
        return self._arrays[label]

    def moments(self, label: int):
        """Mixture mean and per-dim variance for one class."""
        w, means, var = self._arrays[label]
        mean = w @ means
        second = w @ (var + means ** 2)
        return mean, second - mean ** 2

    def draw(self, n: int, rng: np.random.Generator, labels=None):
        """Draw n labeled samples.  Labels are uniform over classes unless
        given (scalar or length-n vector)."""
        if labels is None:
            labels = rng.integers(0, self.n_classes, n)
        labels = np.broadcast_to(np.asarray(labels, dtype=np.int64), (n,)).copy()
        out = np.empty((n, self.dim))
        for label in np.unique(labels):
            rows = np.flatnonzero(labels == label)
            w, means, var = self._arrays[label]
            k = rng.choice(len(w), size=rows.size, p=w)
            out[rows] = means[k] + np.sqrt(var[k]) * rng.standard_normal((rows.size, self.dim))
        return out, labels

def _component_log_density(spec: GaussianMixtureSpec, x_t: np.ndarray,
                           abar: float, label: int):
    """log π_k N(x_t; sqrt(ᾱ) m_k, ᾱ v_k + 1 - ᾱ) per row and component,
    plus the residuals and marginal variances they came from."""
    w, means, var = spec.class_arrays(label)       # (K,), (K,d), (K,d)
    marg_var = abar * var + (1.0 - abar)
    resid = x_t[:, None, :] - np.sqrt(abar) * means[None]   # (n, K, d)
    log_w = np.log(w, where=w > 0, out=np.full_like(w, -np.inf))
    log_p = log_w[None] - 0.5 * np.sum(
        np.log(2 * np.pi * marg_var)[None] + resid ** 2 / marg_var[None], axis=-1)
    return log_p, resid, marg_var

def analytic_responsibilities(spec: GaussianMixtureSpec, x_t: np.ndarray,
                              abar: float, label: int) -> np.ndarray:
    """Posterior component probabilities for rows of x_t under one class."""
    log_p, _, _ = _component_log_density(spec, x_t, abar, label)
    return np.exp(log_p - logsumexp(log_p, axis=1, keepdims=True))

def analytic_posterior_x0(spec: GaussianMixtureSpec, x_t: np.ndarray,
                          abar: float, c: np.ndarray) -> np.ndarray:
    """E[x_0 | x_t] for mixture data noised to level ᾱ.

    The marginal of x_t is a mixture with means sqrt(ᾱ) m_k and variances
    ᾱ v_k + (1 - ᾱ); each component's posterior mean is
    m_k + sqrt(ᾱ) v_k / (ᾱ v_k + 1 - ᾱ) (x_t - sqrt(ᾱ) m_k),
    and the responsibilities weight them."""
    x0 = np.empty_like(x_t)
    for label in np.unique(c):
        rows = np.flatnonzero(c == label)
        log_p, resid, marg_var = _component_log_density(spec, x_t[rows], abar, label)
        resp = softmax(log_p, axis=1)                  # (n, K)
        _, means, var = spec.class_arrays(label)
        comp_x0 = means[None] + (np.sqrt(abar) * var / marg_var)[None] * resid
        x0[rows] = np.einsum('nk,nkd->nd', resp, comp_x0)
    return x0

def eps_from_x0(x_t: np.ndarray, x0_hat: np.ndarray, abar) -> np.ndarray:
    """ε̂ implied by an x_0 prediction.  At ᾱ = 1 there is no noise, ε̂ = 0."""
    noise_scale = np.sqrt(1.0 - abar)
    diff = x_t - np.sqrt(abar) * x0_hat
    return np.divide(diff, noise_scale, out=np.zeros_like(diff),
                     where=np.broadcast_to(noise_scale > 0, diff.shape))

def x0_from_eps(x_t: np.ndarray, eps_hat: np.ndarray, abar) -> np.ndarray:
    return (x_t - np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(abar)

def analytic_predict(spec: GaussianMixtureSpec, x_t: np.ndarray, t: int,
                     c: np.ndarray, s: NoiseSchedule) -> np.ndarray:
    """Exact ε̂ for mixture data at step t."""
    abar = alpha_bar_at(s, t)
    c = np.asarray(c, dtype=np.int64)
    if c.size and (c.min() < 0 or c.max() >= spec.n_classes):
        raise LabelOutOfRangeError(f"labels must be in 0..{spec.n_classes - 1}")
    return eps_from_x0(x_t, analytic_posterior_x0(spec, x_t, abar, c), abar)

class AnalyticDenoiser(Denoiser):
    """Closed-form oracle backend.  Holds the schedule it predicts under."""
    backend = 'analytic'

    def __init__(self, spec: GaussianMixtureSpec, schedule: NoiseSchedule):
        self.spec = spec
        self.schedule = schedule
        self.dim = spec.dim
        self.n_classes = spec.n_classes

    def predict(self, x_t: np.ndarray, t, c: np.ndarray) -> np.ndarray:
        c = np.broadcast_to(np.asarray(c, dtype=np.int64), (x_t.shape[0],))
        self.check_labels(c)
        if np.ndim(t) == 0:
            return analytic_predict(self.spec, x_t, int(t), c, self.schedule)
        t = np.asarray(t)
        out = np.empty_like(x_t)
        for step in np.unique(t):
            rows = np.flatnonzero(t == step)
            out[rows] = analytic_predict(self.spec, x_t[rows], int(step),
                                         c[rows], self.schedule)
        return out
