"""δ selection by grid search against the L1 distribution distance, and the
counterfactual objective

    L(x, x', y', λ) = λ · ℓ_o(f̂(x'), y') + ℓ_in(x, x')

where ℓ_o pulls the classifier's verdict on x' toward the desired label y'
and ℓ_in keeps x' close to the source x.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from sklearn.linear_model import LogisticRegression

from .denoiser import Denoiser, GaussianMixtureSpec
from .diffusion import (DriftConfig, DriftMode, SampleBatch, sample,
                        forward_sample, reverse_step, NO_DRIFT)
from .errors import (InvalidGridError, InvalidRangeError, LabelOutOfRangeError,
                     DimMismatchError)
from .metrics import EmpiricalDist, DistanceEstimate, l1_distance, DEFAULT_BINS
from .rngstreams import StreamFactory, blocks
from .schedule import NoiseSchedule, PriorSpec
from .stats import Stats
from .util import fmt_float
from .driftlab_logger import Logger

logger = logging.getLogger(__name__)
LOGGER = Logger()

DEFAULT_GRID = tuple(np.round(np.linspace(-0.2, 0.2, 9), 10))
REFINE_POINTS = 5
MIN_PER_POINT = 100

@dataclass
class GridSearchConfig:
    """One δ search.

    Attributes:
        grid: strictly increasing candidate δ values
        n_per_point: samples generated per candidate
        target: samples of the target distribution D_GT
        mode: where δ is applied while sampling
        seed: root seed; every candidate reuses the same keyed sample streams
        cond: class label to sample under
        bins, n_boot: L1 distance parameters
        refine: run a second pass on a 5-point sub-grid around the first arg-min
        threads: candidates evaluated concurrently
    """
    grid: tuple
    n_per_point: int
    target: EmpiricalDist
    mode: DriftMode = DriftMode.PER_STEP
    seed: int = 0
    cond: int = 0
    bins: int = DEFAULT_BINS
    n_boot: int = 200
    refine: bool = False
    threads: int = 1
    prior: Optional[PriorSpec] = None

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=np.float64)
        if grid.ndim != 1 or grid.size == 0:
            raise InvalidGridError("drift grid must be a non-empty list")
        if not np.all(np.isfinite(grid)):
            raise InvalidGridError(f"drift grid must be finite: {grid.tolist()}")
        if np.any(np.diff(grid) <= 0):
            raise InvalidGridError(f"drift grid must be strictly increasing: {grid.tolist()}")
        if self.n_per_point < MIN_PER_POINT:
            raise InvalidRangeError(
                f"n_per_point must be >= {MIN_PER_POINT}, got {self.n_per_point}")
        self.grid = tuple(float(g) for g in grid)
        self.mode = DriftMode.parse(self.mode)

@dataclass
class GridSearchReport:
    """Per-candidate distances and the selected δ*.

    ambiguity_flag is set when the runner-up's distance is within one
    standard error of the best."""
    per_delta: list
    delta_star: float
    ambiguity_flag: bool
    mode: DriftMode = DriftMode.PER_STEP
    cond: int = 0

    @property
    def grid(self) -> list:
        return [d for d, _ in self.per_delta]

    def distance_at(self, delta: float) -> DistanceEstimate:
        for d, est in self.per_delta:
            if d == delta:
                return est
        raise KeyError(delta)

    def to_rows(self) -> list:
        return [{'delta': fmt_float(d), 'l1': fmt_float(est.value),
                 'l1_se': fmt_float(est.std_error),
                 'is_argmin': int(d == self.delta_star)}
                for d, est in self.per_delta]

def select_delta(per_delta: list):
    """Arg-min over (δ, estimate) pairs.  Ties go to the smaller |δ|, then
    the smaller δ.  Returns (δ*, ambiguity_flag)."""
    order = sorted(per_delta, key=lambda item: (item[1].value, abs(item[0]), item[0]))
    best_delta, best = order[0]
    ambiguous = False
    if len(order) > 1:
        _, runner_up = order[1]
        ambiguous = runner_up.value - best.value <= max(best.std_error,
                                                        runner_up.std_error)
    return best_delta, ambiguous

def _evaluate(model: Denoiser, s: NoiseSchedule, cfg: GridSearchConfig,
              delta: float) -> DistanceEstimate:
    drift = DriftConfig(delta, cfg.mode)
    prior = cfg.prior or PriorSpec(dim=model.dim)
    batch, _ = sample(model, s, prior, drift, cfg.n_per_point, cfg.cond,
                      StreamFactory(cfg.seed))
    est = l1_distance(EmpiricalDist(batch.data), cfg.target, cfg.bins,
                      cfg.n_boot, cfg.seed)
    Stats.increment("grid_points_evaluated")
    logger.info("delta %+.4f: L1 %.5f +- %.5f", delta, est.value, est.std_error)
    return est

def _evaluate_all(model, s, cfg, deltas) -> list:
    if cfg.threads > 1 and len(deltas) > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            estimates = list(pool.map(lambda d: _evaluate(model, s, cfg, d), deltas))
    else:
        estimates = [_evaluate(model, s, cfg, d) for d in deltas]
    return list(zip(deltas, estimates))

def refine_grid(grid: tuple, delta_star: float) -> list:
    """REFINE_POINTS evenly spaced values between the neighbors of δ* in
    grid (or δ* itself at the ends)."""
    i = grid.index(delta_star)
    lo = grid[i - 1] if i > 0 else delta_star
    hi = grid[i + 1] if i < len(grid) - 1 else delta_star
    if lo == hi:
        return [delta_star]
    return [float(v) for v in np.round(np.linspace(lo, hi, REFINE_POINTS), 12)]

def grid_search_delta(model: Denoiser, s: NoiseSchedule,
                      cfg: GridSearchConfig) -> GridSearchReport:
    """Generate cfg.n_per_point samples per candidate δ, measure L1 to the
    target, and pick the arg-min.  Every candidate samples from the same
    keyed streams, so the report is reproducible and does not depend on
    evaluation order."""
    if cfg.target.dim != model.dim:
        raise DimMismatchError(f"target dim {cfg.target.dim} != model dim {model.dim}")
    results = dict(_evaluate_all(model, s, cfg, list(cfg.grid)))

    if cfg.refine:
        first, _ = select_delta(list(results.items()))
        extra = [d for d in refine_grid(cfg.grid, first) if d not in results]
        results.update(_evaluate_all(model, s, cfg, extra))

    per_delta = sorted(results.items())
    delta_star, ambiguous = select_delta(per_delta)
    if ambiguous:
        logger.warning("delta* %+.4f is ambiguous: runner-up within one std error",
                       delta_star)
    logger.info("Selected delta* = %+.4f (mode %s, class %d)", delta_star,
                cfg.mode.value, cfg.cond)
    return GridSearchReport(per_delta, delta_star, ambiguous, cfg.mode, cfg.cond)

def grid_search_per_class(model: Denoiser, s: NoiseSchedule,
                          cfg: GridSearchConfig, target: SampleBatch) -> dict:
    """One search per class label present in target.  Returns
    label -> GridSearchReport; class_deltas() turns it into a drift mapping."""
    reports = {}
    for label in np.unique(target.condition):
        sub = GridSearchConfig(cfg.grid, cfg.n_per_point,
                               EmpiricalDist.from_batch(target, int(label)),
                               cfg.mode, cfg.seed, int(label), cfg.bins,
                               cfg.n_boot, cfg.refine, cfg.threads, cfg.prior)
        reports[int(label)] = grid_search_delta(model, s, sub)
    return reports

def class_deltas(reports: dict) -> dict:
    return {label: report.delta_star for label, report in reports.items()}

OUTCOME_LOSSES = ('cross-entropy', 'squared')
INSTANCE_LOSSES = ('l2', 'l1')

@dataclass
class CounterfactualSpec:
    """Parameters of the counterfactual objective.

    Attributes:
        lam: λ >= 0, weight on the desired-outcome term
        outcome_loss: ℓ_o, 'cross-entropy' or 'squared' (Brier) against y'
        instance_loss: ℓ_in, 'l2' (squared) or 'l1'
        classifier: frozen f̂ with predict_proba / predict / classes_
        desired_label: y'
    """
    lam: float
    classifier: object
    desired_label: int
    outcome_loss: str = 'cross-entropy'
    instance_loss: str = 'l2'

    def __post_init__(self):
        if not (self.lam >= 0 and math.isfinite(self.lam)):
            raise InvalidRangeError(f"lambda must be >= 0, got {self.lam}")
        if self.outcome_loss not in OUTCOME_LOSSES:
            raise InvalidRangeError(f"unknown outcome_loss {self.outcome_loss}")
        if self.instance_loss not in INSTANCE_LOSSES:
            raise InvalidRangeError(f"unknown instance_loss {self.instance_loss}")
        self.label_index()

    def label_index(self) -> int:
        classes = list(getattr(self.classifier, 'classes_', []))
        if self.desired_label not in classes:
            raise LabelOutOfRangeError(
                f"desired label {self.desired_label} not in classifier labels {classes}")
        return classes.index(self.desired_label)

def counterfactual_loss(x, x_prime, spec: CounterfactualSpec):
    """(total, outcome_term, instance_term) for one pair of vectors, or
    per row for (N, dim) arrays.  total = λ·outcome_term + instance_term."""
    x = np.asarray(x, dtype=np.float64)
    x_prime = np.asarray(x_prime, dtype=np.float64)
    if x.shape != x_prime.shape:
        raise DimMismatchError(f"x shape {x.shape} != x' shape {x_prime.shape}")
    single = x.ndim == 1
    x2, xp2 = np.atleast_2d(x), np.atleast_2d(x_prime)

    proba = spec.classifier.predict_proba(xp2)
    k = spec.label_index()
    if spec.outcome_loss == 'cross-entropy':
        outcome = -np.log(np.maximum(proba[:, k], np.finfo(float).tiny))
    else:
        onehot = np.zeros_like(proba)
        onehot[:, k] = 1.0
        outcome = np.sum((proba - onehot) ** 2, axis=1)

    diff = x2 - xp2
    if spec.instance_loss == 'l2':
        instance = np.sum(diff ** 2, axis=1)
    else:
        instance = np.sum(np.abs(diff), axis=1)

    total = spec.lam * outcome + instance
    if single:
        return float(total[0]), float(outcome[0]), float(instance[0])
    return total, outcome, instance

def train_toy_classifier(spec: GaussianMixtureSpec, n: int = 2000,
                         seed: int = 0) -> LogisticRegression:
    """Logistic f̂ fit on n labeled mixture samples, then left frozen."""
    rng = StreamFactory(seed).stream("driftsearch.classifier")
    x, labels = spec.draw(n, rng)
    clf = LogisticRegression(max_iter=1000).fit(x, labels)
    logger.info("Toy classifier train accuracy %.4f", clf.score(x, labels))
    return clf

@dataclass
class CounterfactualResult:
    """Counterfactuals x' for a source batch and their objective terms."""
    source: SampleBatch
    batch: SampleBatch
    total: np.ndarray
    outcome_term: np.ndarray
    instance_term: np.ndarray
    flipped: np.ndarray
    start_step: int
    delta: float = 0.0

    @property
    def flip_rate(self) -> float:
        return float(np.mean(self.flipped))

def start_step_for(strength: float, T: int) -> int:
    """Depth of forward noising for a regeneration strength in (0, 1]."""
    if not 0.0 < strength <= 1.0:
        raise InvalidRangeError(f"strength must be in (0, 1], got {strength}")
    return max(1, int(round(strength * T)))

def generate_counterfactual(x: SampleBatch, model: Denoiser, s: NoiseSchedule,
                            spec: CounterfactualSpec, drift: DriftConfig,
                            strength: float, rng: StreamFactory,
                            threads: int = 1) -> CounterfactualResult:
    """Noise x forward to depth strength·T, then regenerate it with the
    drifted reverse chain conditioned on the desired label y'."""
    t0 = start_step_for(strength, s.T)
    target_label = spec.desired_label
    if not 0 <= target_label < model.n_classes:
        raise LabelOutOfRangeError(
            f"desired label {target_label} outside model labels 0..{model.n_classes - 1}")

    def run_block(b, start, stop):
        noise = rng.row_normals("driftsearch.counterfactual", start, stop,
                                (t0 + 1, x.dim))
        src = SampleBatch(x.data[start:stop], x.condition[start:stop])
        xt, _ = forward_sample(src, t0, s, NO_DRIFT, noise=noise[:, 0])
        cur = SampleBatch(xt.data, np.full(src.n, target_label), x.seed, s.schedule_id)
        if drift.shifts_prior:
            cur.data = cur.data + drift.delta_column(cur.condition)
        for i, t in enumerate(range(t0, 0, -1)):
            cur = reverse_step(cur, t, model, s, drift, noise=noise[:, i + 1])
        return cur.data

    work = list(blocks(x.n))
    if threads > 1 and len(work) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda w: run_block(*w), work))
    else:
        parts = [run_block(*w) for w in work]

    x_prime = SampleBatch(np.concatenate(parts, axis=0), target_label,
                          rng.seed, s.schedule_id)
    total, outcome, instance = counterfactual_loss(x.data, x_prime.data, spec)
    flipped = spec.classifier.predict(x_prime.data) == target_label
    Stats.increment("counterfactuals_generated", x.n)
    result = CounterfactualResult(x, x_prime, total, outcome, instance,
                                  flipped, t0, drift.for_class(target_label))
    logger.info("Counterfactuals: %d samples, start step %d, flip rate %.4f",
                x.n, t0, result.flip_rate)
    return result

def counterfactual_summary(result: CounterfactualResult) -> dict:
    return {'n': result.source.n, 'start_step': result.start_step,
            'delta': result.delta, 'flip_rate': result.flip_rate,
            'mean_total': float(np.mean(result.total)),
            'mean_outcome': float(np.mean(result.outcome_term)),
            'mean_instance': float(np.mean(result.instance_term))}
