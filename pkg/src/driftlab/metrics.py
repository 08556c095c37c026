"""Monte-Carlo distribution distances and summary diagnostics.

The L1 distance between two sample sets is the per-dimension normalized
histogram discrepancy sum_bins |p_a - p_b| over shared equal-width edges
spanning both sets, averaged over dimensions.  It lies in [0, 2]; twice
the discretized total variation distance.  High-dimensional data is
compared through its marginals only.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import stats as sps
from scipy.spatial.distance import cdist
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import roc_auc_score

from .diffusion import SampleBatch
from .errors import DimMismatchError, InsufficientSamplesError, InvalidRangeError
from .rngstreams import StreamFactory
from .stats import Stats
from .util import fmt_float
from .driftlab_logger import Logger

logger = logging.getLogger(__name__)
LOGGER = Logger()

DEFAULT_BINS = 64
DEFAULT_BOOTSTRAP = 200
REPORT_COLUMNS = ('metric', 'value', 'std_error', 'n_a', 'n_b', 'bins_or_bandwidth')

class EmpiricalDist:
    """A sample set with cached moments.

    Attributes:
        samples: (N, dim) values
    """

    def __init__(self, samples):
        samples = np.asarray(samples, dtype=np.float64)
        self.samples = samples[:, None] if samples.ndim == 1 else samples
        self._moments = None

    @classmethod
    def from_batch(cls, batch: SampleBatch, label: int = None) -> "EmpiricalDist":
        """All of a batch, or only the rows with the given class label."""
        if label is None:
            return cls(batch.data)
        return cls(batch.data[batch.condition == label])

    @property
    def n(self) -> int:
        return self.samples.shape[0]

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    @property
    def moments(self):
        """(mean, std) per dim, population convention."""
        if self._moments is None:
            self._moments = (self.samples.mean(axis=0), self.samples.std(axis=0))
        return self._moments

@dataclass
class DistanceEstimate:
    """One distance value with its Monte-Carlo standard error."""
    value: float
    std_error: float
    n_a: int
    n_b: int
    metric_id: str
    param: float
    per_dim: Optional[list] = field(default=None, repr=False)

    def to_row(self) -> dict:
        return {'metric': self.metric_id, 'value': fmt_float(self.value),
                'std_error': fmt_float(self.std_error), 'n_a': self.n_a,
                'n_b': self.n_b, 'bins_or_bandwidth': fmt_float(self.param)}

def _check_pair(a: EmpiricalDist, b: EmpiricalDist, min_n: int = 2):
    if a.dim != b.dim:
        raise DimMismatchError(f"dim {a.dim} vs {b.dim}")
    if a.n < min_n or b.n < min_n:
        raise InsufficientSamplesError(
            f"need at least {min_n} samples per side, got {a.n} and {b.n}")

def shared_edges(a: EmpiricalDist, b: EmpiricalDist, bins: int) -> list:
    """Equal-width edges over [min, max] of the union, per dim.  Depends
    only on the union, so it is the same for (a, b) and (b, a)."""
    lo = np.minimum(a.samples.min(axis=0), b.samples.min(axis=0))
    hi = np.maximum(a.samples.max(axis=0), b.samples.max(axis=0))
    return [np.linspace(lo[d], hi[d], bins + 1) for d in range(a.dim)]

def _bin_index(x: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """Bin of each value, closed on the right for the last bin like np.histogram."""
    bins = len(edges) - 1
    idx = np.searchsorted(edges, x, side='right') - 1
    return np.clip(idx, 0, bins - 1)

def _l1_from_counts(ca: np.ndarray, cb: np.ndarray, na: int, nb: int) -> float:
    # integer numerator keeps the value exact and symmetric in (a, b)
    num = np.abs(ca.astype(np.int64) * nb - cb.astype(np.int64) * na).sum()
    return float(num) / float(na * nb)

def l1_distance(a: EmpiricalDist, b: EmpiricalDist, bins: int = DEFAULT_BINS,
                n_boot: int = DEFAULT_BOOTSTRAP, seed: int = 0) -> DistanceEstimate:
    """Per-dim normalized-histogram L1 averaged over dims, with a bootstrap
    standard error from n_boot resamples of both sets (keyed streams)."""
    _check_pair(a, b)
    if bins < 2:
        raise InvalidRangeError(f"bins must be >= 2, got {bins}")

    edges = shared_edges(a, b, bins)
    idx_a = np.stack([_bin_index(a.samples[:, d], edges[d]) for d in range(a.dim)], axis=1)
    idx_b = np.stack([_bin_index(b.samples[:, d], edges[d]) for d in range(b.dim)], axis=1)

    def value_of(ia, ib):
        return [_l1_from_counts(np.bincount(ia[:, d], minlength=bins),
                                np.bincount(ib[:, d], minlength=bins),
                                ia.shape[0], ib.shape[0]) for d in range(a.dim)]

    per_dim = value_of(idx_a, idx_b)
    value = float(np.mean(per_dim))

    std_error = 0.0
    if n_boot > 0:
        streams = StreamFactory(seed)
        boot = np.empty(n_boot)
        for r in range(n_boot):
            rng = streams.stream("metrics.bootstrap", r)
            ra = idx_a[rng.integers(0, a.n, a.n)]
            rb = idx_b[rng.integers(0, b.n, b.n)]
            boot[r] = np.mean(value_of(ra, rb))
        Stats.increment("bootstrap_resamples", n_boot)
        std_error = float(boot.std(ddof=1)) if n_boot > 1 else 0.0

    return DistanceEstimate(value, std_error, a.n, b.n, 'L1', bins, per_dim)

def _gaussian_kernel(x: np.ndarray, y: np.ndarray, bandwidth: float) -> np.ndarray:
    return np.exp(-0.5 * cdist(x, y, 'sqeuclidean') / bandwidth ** 2)

def mmd_distance(a: EmpiricalDist, b: EmpiricalDist, bandwidth: float,
                 max_n: int = 2000, seed: int = 0) -> DistanceEstimate:
    """Unbiased squared MMD with a Gaussian kernel.  The raw value is
    reported and may be slightly negative.

    Sets larger than max_n are subsampled (keyed stream) to bound the
    kernel matrices.  The standard error is the first-order U-statistic
    estimate built from per-sample kernel row means."""
    _check_pair(a, b)
    if not bandwidth > 0:
        raise InvalidRangeError(f"bandwidth must be > 0, got {bandwidth}")

    streams = StreamFactory(seed)
    x, y = a.samples, b.samples
    if x.shape[0] > max_n:
        x = x[np.sort(streams.stream("metrics.mmd", 0).choice(x.shape[0], max_n, replace=False))]
    if y.shape[0] > max_n:
        y = y[np.sort(streams.stream("metrics.mmd", 1).choice(y.shape[0], max_n, replace=False))]
    m, n = x.shape[0], y.shape[0]

    kxx = _gaussian_kernel(x, x, bandwidth)
    kyy = _gaussian_kernel(y, y, bandwidth)
    kxy = _gaussian_kernel(x, y, bandwidth)
    np.fill_diagonal(kxx, 0.0)
    np.fill_diagonal(kyy, 0.0)

    value = kxx.sum() / (m * (m - 1)) + kyy.sum() / (n * (n - 1)) - 2.0 * kxy.mean()

    zeta_x = kxx.sum(axis=1) / (m - 1) - kxy.mean(axis=1)
    zeta_y = kyy.sum(axis=1) / (n - 1) - kxy.mean(axis=0)
    var = 4.0 * zeta_x.var() / m + 4.0 * zeta_y.var() / n
    return DistanceEstimate(float(value), float(np.sqrt(var)), m, n, 'MMD', bandwidth)

@dataclass
class MomentsReport:
    """Per-dim sample statistics.  std uses the population convention
    (divide by N).  Where std is 0 the skew is undefined; it is reported
    as 0 and flagged degenerate."""
    mean: np.ndarray
    std: np.ndarray
    skew: np.ndarray
    degenerate: np.ndarray
    n: int
    convention: str = 'population'

    def to_dict(self) -> dict:
        return {'mean': self.mean.tolist(), 'std': self.std.tolist(),
                'skew': self.skew.tolist(), 'degenerate': self.degenerate.tolist(),
                'n': self.n, 'convention': self.convention}

def moments_report(d: EmpiricalDist) -> MomentsReport:
    if d.n < 2:
        raise InsufficientSamplesError(f"need at least 2 samples, got {d.n}")
    mean, std = d.moments
    degenerate = std == 0
    with np.errstate(all='ignore'):
        skew = np.atleast_1d(sps.skew(d.samples, axis=0, bias=True))
    skew = np.where(degenerate | ~np.isfinite(skew), 0.0, skew)
    if degenerate.any():
        logger.warning("Degenerate dims (zero variance): %s",
                       np.flatnonzero(degenerate).tolist())
    return MomentsReport(mean, std, skew, degenerate, d.n)

def synthetic_to_real_score(generated: SampleBatch, real: SampleBatch) -> dict:
    """Train a logistic classifier on labeled generated samples and score it
    on labeled real samples.  Returns accuracy and ROC AUC (one-vs-rest
    macro average when there are more than two classes)."""
    if generated.dim != real.dim:
        raise DimMismatchError(f"dim {generated.dim} vs {real.dim}")
    if np.unique(generated.condition).size < 2:
        raise InsufficientSamplesError("generated samples need at least two classes")
    clf = LogisticRegression(max_iter=1000).fit(generated.data, generated.condition)
    proba = clf.predict_proba(real.data)
    accuracy = float(np.mean(clf.predict(real.data) == real.condition))
    if proba.shape[1] == 2:
        auc = roc_auc_score(real.condition, proba[:, 1])
    else:
        auc = roc_auc_score(real.condition, proba, multi_class='ovr',
                            labels=clf.classes_)
    return {'accuracy': accuracy, 'auc': float(auc)}
