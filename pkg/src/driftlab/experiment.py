"""Run manifests, config validation and the experiment kinds.

An experiment is described by one YAML (or JSON) config.  Usage:

    manifest = RunManifest.from_config(load_config("sweep.yaml"), seed=7)
    result = run_experiment(manifest, "out/sweep")

Every kind writes its artifacts through an ArtifactSink, then
manifest.json and result.json next to them.  The manifest carries
timestamps and is not part of any checksum; everything else is a pure
function of (config, seed).
"""

import contextlib
import copy
import json
import logging
import os
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import yaml
from scipy import stats as sps

from .artifacts import (Artifact, ArtifactSink, write_batch_csv, write_trajectory_csv,
                        write_trajectory_jsonl, write_rows_csv, write_json,
                        REPORT_HEADER)
from .config import Config
from .denoiser import AnalyticDenoiser, GaussianMixtureSpec
from .diffusion import (DriftConfig, DriftMode, SampleBatch, sample, ddim_sample,
                        make_subgrid)
from .driftsearch import (DEFAULT_GRID, GridSearchConfig, CounterfactualSpec,
                          grid_search_delta, grid_search_per_class, class_deltas,
                          generate_counterfactual, counterfactual_summary,
                          train_toy_classifier)
from .errors import (ConfigError, DriftlabError, InvalidRangeError,
                     InvalidGridError, KindMismatchError, LabelOutOfRangeError)
from .metrics import (EmpiricalDist, l1_distance, mmd_distance, moments_report,
                      synthetic_to_real_score)
from .rngstreams import StreamFactory
from .schedule import NoiseSchedule, PriorSpec, make_schedule
from .training import TrainConfig, train_denoiser, save_checkpoint
from .util import content_hash, fmt_float
from .driftlab_logger import Logger

logger = logging.getLogger(__name__)
#logger.level = logging.DEBUG
LOGGER = Logger()

SCHEMA_VERSION = 1
TOOL_VERSION = "0.1.0"
MANIFEST_FILE = "manifest.json"
RESULT_FILE = "result.json"

VALID_KINDS = ('sample', 'sweep-drift', 'grid-search', 'finetune', 'counterfactual')
VALID_BACKENDS = ('analytic', 'mlp')

_MIXTURE_KEYS = ('classes', 'mean', 'std', 'dim')
VALID_KEYS = {
    '': ('schema_version', 'kind', 'backend', 'seed', 'seeds', 'schedule',
         'prior', 'data', 'target', 'network', 'training', 'finetune', 'drift',
         'sampler', 'search', 'metrics', 'counterfactual'),
    'schedule': ('T', 'beta_start', 'beta_end', 'variance_mode', 'weight_mode'),
    'prior': ('mean', 'std'),
    'data': _MIXTURE_KEYS,
    'target': _MIXTURE_KEYS,
    'network': ('hidden', 'time_embed', 'class_embed'),
    'training': ('steps', 'batch_size', 'learning_rate', 'momentum', 'weight_mode'),
    'finetune': ('steps', 'batch_size', 'learning_rate', 'momentum',
                 'weight_mode', 'n', 'apply_drift', 'search'),
    'drift': ('delta', 'mode', 'apply_in_training', 'class_deltas'),
    'sampler': ('name', 'n', 'cond', 'eta', 'n_steps', 'record'),
    'search': ('grid', 'n_per_point', 'mode', 'refine', 'per_class'),
    'metrics': ('bins', 'bootstrap', 'mmd_bandwidth'),
    'counterfactual': ('lambda', 'outcome_loss', 'instance_loss', 'strength',
                       'target_label', 'source_label', 'n', 'classifier_samples',
                       'search_delta', 'baseline'),
}
REQUIRED_KEYS = {
    '': ('schema_version', 'kind', 'schedule'),
    'schedule': ('T', 'beta_start', 'beta_end'),
}
# sections a kind cannot run without
KIND_SECTIONS = {
    'grid-search': ('target',),
    'finetune': ('data', 'target'),
    'counterfactual': ('data',),
}

def load_config(path: str) -> dict:
    """Parse a YAML or JSON experiment config.  Not validated here."""
    with open(path, 'r', encoding='utf-8') as f:
        cfg = yaml.safe_load(f)
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a mapping", path)
    return cfg

def validate_config(cfg: dict) -> None:
    """Check keys against the schema, naming the first bad field by its
    dotted path."""
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a mapping")
    for section, required in REQUIRED_KEYS.items():
        scope = cfg if section == '' else cfg.get(section)
        if section and not isinstance(scope, dict):
            continue
        for key in required:
            if key not in scope:
                path = f"{section}.{key}" if section else key
                raise ConfigError("required key missing", path)
    for key, value in cfg.items():
        if key not in VALID_KEYS['']:
            raise ConfigError("unknown key", key)
        if key in VALID_KEYS and key != '':
            if not isinstance(value, dict):
                raise ConfigError("section must be a mapping", key)
            for sub in value:
                if sub not in VALID_KEYS[key]:
                    raise ConfigError("unknown key", f"{key}.{sub}")
    if cfg['schema_version'] != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema version {cfg['schema_version']}",
                          'schema_version')
    if cfg['kind'] not in VALID_KINDS:
        raise ConfigError(f"unknown kind {cfg['kind']!r}, expected one of {VALID_KINDS}",
                          'kind')
    if cfg.get('backend', 'analytic') not in VALID_BACKENDS:
        raise ConfigError(f"unknown backend {cfg['backend']!r}", 'backend')
    for section in KIND_SECTIONS.get(cfg['kind'], ()):
        if section not in cfg:
            raise ConfigError(f"required for kind {cfg['kind']}", section)

def with_defaults(cfg: dict, defaults: Config = None) -> dict:
    """Validated cfg with the lab defaults filled in under each section."""
    validate_config(cfg)
    defaults = defaults or Config()
    return defaults.merged(cfg)

@contextlib.contextmanager
def _parsing(section: str):
    """Turn value errors raised while building objects from a config
    section into ConfigError naming that section."""
    try:
        yield
    except ConfigError:
        raise
    except (InvalidRangeError, InvalidGridError, LabelOutOfRangeError,
            KeyError, TypeError, ValueError) as e:
        raise ConfigError(str(e), section) from e

@dataclass
class RunManifest:
    """Config and seed of one run.  run_id is a pure function of both."""
    config: dict
    seed: int = 0
    tool_version: str = TOOL_VERSION
    created: float = field(default_factory=time.time)
    finished: Optional[float] = None

    @classmethod
    def from_config(cls, cfg: dict, seed: int = None) -> "RunManifest":
        cfg = copy.deepcopy(cfg)
        cfg_seed = cfg.pop('seed', 0)
        return cls(config=cfg, seed=int(cfg_seed if seed is None else seed))

    @property
    def run_id(self) -> str:
        return content_hash({'config': self.config, 'seed': self.seed})

    @property
    def kind(self) -> str:
        return self.config.get('kind', '')

    def to_dict(self) -> dict:
        return {'run_id': self.run_id, 'config': self.config, 'seed': self.seed,
                'tool_version': self.tool_version, 'created': self.created,
                'finished': self.finished}

@dataclass
class ExperimentResult:
    """Artifacts and flat summary metrics of one run.

    Attributes:
        summary: metric -> value; a metric's standard error, when known,
            is stored under '<metric>_se'
        per_seed: metric -> list of per-seed values, for multi-seed kinds
    """
    kind: str
    run_id: str
    out_dir: str
    artifacts: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    per_seed: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {'kind': self.kind, 'run_id': self.run_id,
                'artifacts': [a.to_dict() for a in self.artifacts],
                'summary': self.summary, 'per_seed': self.per_seed}

def load_result(out_dir: str) -> ExperimentResult:
    """Read result.json from a run directory."""
    path = os.path.join(out_dir, RESULT_FILE)
    try:
        with open(path, 'r', encoding='utf-8') as f:
            doc = json.load(f)
    except FileNotFoundError:
        raise DriftlabError(f"no {RESULT_FILE} in {out_dir}") from None
    return ExperimentResult(doc['kind'], doc['run_id'], out_dir,
                            [Artifact(**a) for a in doc['artifacts']],
                            doc['summary'], doc.get('per_seed', {}))

class _Run:
    """Objects built from one validated config, shared by the kinds."""

    def __init__(self, manifest: RunManifest, sink: ArtifactSink, threads: int):
        cfg = self.cfg = manifest.config
        self.seed = manifest.seed
        self.streams = StreamFactory(manifest.seed)
        self.sink = sink
        self.threads = threads
        with _parsing('schedule'):
            self.schedule: NoiseSchedule = make_schedule(cfg['schedule'])
        with _parsing('data'):
            self.data = GaussianMixtureSpec.from_config(cfg.get('data', {}))
        with _parsing('target'):
            self.target = (GaussianMixtureSpec.from_config(cfg['target'])
                           if 'target' in cfg else None)
            if self.target is not None and self.target.dim != self.data.dim:
                raise ConfigError(f"target dim {self.target.dim} != data dim "
                                  f"{self.data.dim}", 'target')
        with _parsing('prior'):
            prior = cfg.get('prior', {})
            self.prior = PriorSpec(prior.get('mean', 0.0), prior.get('std', 1.0),
                                   self.data.dim)
        with _parsing('drift'):
            d = cfg.get('drift', {})
            cd = d.get('class_deltas')
            self.drift = DriftConfig(float(d.get('delta', 0.0)),
                                     DriftMode.parse(d.get('mode', 'per-step')),
                                     bool(d.get('apply_in_training', False)),
                                     {int(k): float(v) for k, v in cd.items()} if cd else None)
        m = cfg.get('metrics', {})
        self.bins = int(m.get('bins', 64))
        self.n_boot = int(m.get('bootstrap', 200))
        self.bandwidth = float(m.get('mmd_bandwidth', 1.0))
        self.backend = cfg.get('backend', 'analytic')

    def train_config(self, section: str, seed: int, drift=None) -> TrainConfig:
        t = self.cfg.get(section, {})
        with _parsing(section):
            return TrainConfig(int(t.get('steps', 2000)), int(t.get('batch_size', 128)),
                               float(t.get('learning_rate', 0.01)),
                               float(t.get('momentum', 0.9)),
                               t.get('weight_mode', 'uniform'),
                               drift or DriftConfig(), seed)

    def model(self, seed: int = None, tag: str = ''):
        """The denoiser for the configured backend.  An mlp is trained on
        the data mixture and checkpointed."""
        if self.backend == 'analytic':
            return AnalyticDenoiser(self.data, self.schedule)
        seed = self.seed if seed is None else seed
        net, losses = train_denoiser(self.data, self.schedule,
                                     self.train_config('training', seed),
                                     net_cfg=self.cfg.get('network', {}))
        self.save(net, f"model{tag}.json")
        logger.info("Trained denoiser: final loss %.5f", float(losses[-50:].mean())
                    if losses.size else float('nan'))
        return net

    def save(self, net, name: str):
        self.sink.write_checkpoint(name, lambda path: save_checkpoint(
            net, path, self.schedule.schedule_id, {'run_seed': self.seed}))

    def draw(self, spec: GaussianMixtureSpec, n: int, module: str, index: int = 0,
             labels=None) -> SampleBatch:
        x, lab = spec.draw(n, self.streams.stream(module, index), labels)
        return SampleBatch(x, lab, self.seed)

    def search_config(self, model, target: EmpiricalDist, seed: int,
                      cond: int = 0) -> GridSearchConfig:
        s = self.cfg.get('search', {})
        with _parsing('search'):
            return GridSearchConfig(tuple(s.get('grid', DEFAULT_GRID)),
                                    int(s.get('n_per_point', 2000)),
                                    target, DriftMode.parse(s.get('mode', 'per-step')),
                                    seed, cond, self.bins, self.n_boot,
                                    bool(s.get('refine', False)), self.threads,
                                    self.prior)

    def sampler_settings(self) -> dict:
        s = self.cfg.get('sampler', {})
        return {'name': s.get('name', 'ancestral'), 'n': int(s.get('n', 1000)),
                'cond': int(s.get('cond', 0)), 'eta': float(s.get('eta', 0.0)),
                'n_steps': int(s.get('n_steps', self.schedule.T)),
                'record': bool(s.get('record', True))}

    def generate(self, model, drift: DriftConfig, streams: StreamFactory = None,
                 n: int = None, cond: int = None, record: bool = None):
        """Run the configured sampler.  Returns (batch, trajectory or None);
        DDIM never records a trajectory."""
        ss = self.sampler_settings()
        n = ss['n'] if n is None else n
        cond = ss['cond'] if cond is None else cond
        record = ss['record'] if record is None else record
        streams = streams or self.streams
        if ss['name'] == 'ddim':
            with _parsing('sampler'):
                grid = make_subgrid(self.schedule.T, ss['n_steps'])
            return ddim_sample(model, self.schedule, grid, drift, ss['eta'], n, cond,
                               streams, self.prior, self.threads), None
        if ss['name'] != 'ancestral':
            raise ConfigError(f"unknown sampler {ss['name']!r}", 'sampler.name')
        return sample(model, self.schedule, self.prior, drift, n, cond, streams,
                      record=record, threads=self.threads)

    def l1(self, a, b, seed: int = None):
        return l1_distance(EmpiricalDist(a), EmpiricalDist(b), self.bins,
                           self.n_boot, self.seed if seed is None else seed)

def _write_batch_and_trajectory(run: _Run, batch, traj, stem: str):
    run.sink.write('batch', f"batch{stem}.csv", write_batch_csv, batch)
    if traj is not None:
        run.sink.write('trajectory', f"trajectory{stem}.csv", write_trajectory_csv, traj)
        run.sink.write('trajectory', f"trajectory{stem}.jsonl", write_trajectory_jsonl, traj)

def _moments_summary(batch: SampleBatch, prefix: str = '') -> dict:
    rep = moments_report(EmpiricalDist(batch.data))
    out = {}
    for d in range(batch.dim):
        out[f"{prefix}mean_{d}"] = float(rep.mean[d])
        out[f"{prefix}std_{d}"] = float(rep.std[d])
    return out

def _run_sample(run: _Run) -> dict:
    model = run.model()
    batch, traj = run.generate(model, run.drift)
    _write_batch_and_trajectory(run, batch, traj, '')
    summary = {'n': batch.n, 'delta': run.drift.delta}
    summary.update(_moments_summary(batch))
    if run.target is not None:
        ref = run.draw(run.target, batch.n, "experiment.target", labels=batch.condition)
        est = run.l1(batch.data, ref.data)
        summary.update({'l1_to_target': est.value, 'l1_to_target_se': est.std_error})
        with _parsing('metrics'):
            mmd = mmd_distance(EmpiricalDist(batch.data), EmpiricalDist(ref.data),
                               run.bandwidth, seed=run.seed)
        summary.update({'mmd_to_target': mmd.value, 'mmd_to_target_se': mmd.std_error})
    return summary

def _run_sweep(run: _Run) -> dict:
    model = run.model()
    grid = run.cfg.get('search', {}).get('grid', DEFAULT_GRID)
    if grid is None or not len(grid):
        raise ConfigError("sweep needs a non-empty grid", 'search.grid')
    rows, summary = [], {'n_deltas': len(grid)}
    ref = None
    for i, delta in enumerate(grid):
        with _parsing('search.grid'):
            drift = run.drift.with_delta(float(delta))
        batch, traj = run.generate(model, drift, record=True)
        _write_batch_and_trajectory(run, batch, traj, f"_{i:02d}")
        mean = float(batch.data.mean())
        row = {'delta': fmt_float(delta), 'mean': fmt_float(mean),
               'std': fmt_float(batch.data.std())}
        summary[f"mean_at_{i:02d}"] = mean
        if run.target is not None:
            if ref is None:
                ref = run.draw(run.target, batch.n, "experiment.target",
                               labels=batch.condition)
            est = run.l1(batch.data, ref.data)
            row.update({'l1': fmt_float(est.value), 'l1_se': fmt_float(est.std_error)})
            summary[f"l1_at_{i:02d}"] = est.value
            summary[f"l1_at_{i:02d}_se"] = est.std_error
        rows.append(row)
        logger.info("sweep delta %+.4f: mean %.5f", delta, mean)
    header = ['delta', 'mean', 'std'] + (['l1', 'l1_se'] if run.target is not None else [])
    run.sink.write('report', "sweep.csv", lambda f, r: write_rows_csv(f, header, r), rows)
    return summary

def _report_summary(report, prefix: str = '') -> dict:
    est = report.distance_at(report.delta_star)
    out = {f"{prefix}delta_star": report.delta_star,
           f"{prefix}ambiguity_flag": int(report.ambiguity_flag),
           f"{prefix}l1_at_delta_star": est.value,
           f"{prefix}l1_at_delta_star_se": est.std_error}
    if 0.0 in report.grid:
        zero = report.distance_at(0.0)
        out.update({f"{prefix}l1_at_zero": zero.value,
                    f"{prefix}l1_at_zero_se": zero.std_error})
    return out

def _write_report(run: _Run, report, name: str):
    run.sink.write('report', name,
                   lambda f, r: write_rows_csv(f, REPORT_HEADER, r.to_rows()), report)

def _run_grid_search(run: _Run) -> dict:
    model = run.model()
    s = run.cfg.get('search', {})
    n = int(s.get('n_per_point', 2000))
    if s.get('per_class'):
        labels = np.arange(n) % run.target.n_classes
        target = run.draw(run.target, n, "experiment.target", labels=labels)
        cfg = run.search_config(model, EmpiricalDist(target.data), run.seed)
        reports = grid_search_per_class(model, run.schedule, cfg, target)
        summary = {'per_class': 1}
        for label, report in reports.items():
            _write_report(run, report, f"report_class{label}.csv")
            summary.update(_report_summary(report, f"class{label}_"))
        logger.info("Per-class delta*: %s", class_deltas(reports))
        return summary

    cond = run.sampler_settings()['cond']
    target = run.draw(run.target, n, "experiment.target", labels=cond)
    cfg = run.search_config(model, EmpiricalDist(target.data), run.seed, cond)
    report = grid_search_delta(model, run.schedule, cfg)
    _write_report(run, report, "report.csv")
    summary = {'per_class': 0}
    summary.update(_report_summary(report))
    return summary

def _finetune_one(run: _Run, seed: int, index: int) -> dict:
    """Pretrain on data, fine-tune on target samples, then measure L1 to
    the target at δ = 0 and at the searched δ*."""
    ft = run.cfg.get('finetune', {})
    streams = StreamFactory(seed)
    pre, _ = train_denoiser(run.data, run.schedule, run.train_config('training', seed),
                            net_cfg=run.cfg.get('network', {}))
    tuning = SampleBatch(*run.target.draw(int(ft.get('n', 1000)),
                                          streams.stream("experiment.finetune_data")))
    drift = run.drift if ft.get('apply_drift') else DriftConfig()
    tuned, _ = train_denoiser(tuning, run.schedule,
                              run.train_config('finetune', seed, drift), init=pre)
    run.save(tuned, f"model_seed{index:02d}.json")

    n = int(run.cfg.get('search', {}).get('n_per_point', 2000))
    delta_star, ambiguous, mode = 0.0, False, run.drift.mode
    if ft.get('search', True):
        search_target = SampleBatch(*run.target.draw(n, streams.stream("experiment.target"), 0))
        cfg = run.search_config(tuned, EmpiricalDist(search_target.data), seed)
        report = grid_search_delta(tuned, run.schedule, cfg)
        _write_report(run, report, f"report_seed{index:02d}.csv")
        delta_star, ambiguous, mode = report.delta_star, report.ambiguity_flag, cfg.mode

    # held-out target draw, separate from the search target
    held_out = run.target.draw(n, streams.stream("experiment.heldout"), 0)[0]
    gen_streams = streams.child("experiment.eval")
    plain, _ = sample(tuned, run.schedule, run.prior, DriftConfig(0.0, mode),
                      n, 0, gen_streams, threads=run.threads)
    drifted, _ = sample(tuned, run.schedule, run.prior, DriftConfig(delta_star, mode),
                        n, 0, gen_streams, threads=run.threads)
    run.sink.write('batch', f"batch_seed{index:02d}.csv", write_batch_csv, drifted)
    no_drift = run.l1(plain.data, held_out, seed)
    final = run.l1(drifted.data, held_out, seed)
    logger.info("seed %d: L1 %.5f at delta 0, %.5f at delta* %+.4f",
                seed, no_drift.value, final.value, delta_star)
    return {'l1_no_drift': no_drift.value, 'l1_no_drift_se': no_drift.std_error,
            'l1_final': final.value, 'l1_final_se': final.std_error,
            'delta_star': delta_star, 'ambiguity_flag': int(ambiguous)}

def _run_finetune(run: _Run):
    seeds = [int(s) for s in run.cfg.get('seeds', [run.seed])]
    rows = [_finetune_one(run, seed, i) for i, seed in enumerate(seeds)]
    per_seed = {k: [r[k] for r in rows] for k in rows[0]}
    summary = {'n_seeds': len(seeds)}
    for k in ('l1_no_drift', 'l1_final', 'delta_star'):
        summary[k] = float(np.median(per_seed[k]))
    if len(seeds) == 1:
        summary['l1_no_drift_se'] = rows[0]['l1_no_drift_se']
        summary['l1_final_se'] = rows[0]['l1_final_se']
    header = ['seed', 'delta_star', 'l1_no_drift', 'l1_final']
    table = [{'seed': s, 'delta_star': fmt_float(r['delta_star']),
              'l1_no_drift': fmt_float(r['l1_no_drift']),
              'l1_final': fmt_float(r['l1_final'])} for s, r in zip(seeds, rows)]
    run.sink.write('report', "finetune.csv", lambda f, r: write_rows_csv(f, header, r), table)
    return summary, per_seed

def _run_counterfactual(run: _Run) -> dict:
    c = run.cfg.get('counterfactual', {})
    if run.data.n_classes < 2:
        raise ConfigError("counterfactuals need at least two classes", 'data.classes')
    model = run.model()
    target_label = int(c.get('target_label', 1))
    source_label = int(c.get('source_label', 0))
    clf = train_toy_classifier(run.data, int(c.get('classifier_samples', 2000)), run.seed)
    with _parsing('counterfactual'):
        spec = CounterfactualSpec(float(c.get('lambda', 1.0)), clf, target_label,
                                  c.get('outcome_loss', 'cross-entropy'),
                                  c.get('instance_loss', 'l2'))
        strength = float(c.get('strength', 0.6))
    source = run.draw(run.data, int(c.get('n', 1000)), "experiment.source",
                      labels=source_label)

    drift = run.drift
    summary = {}
    if c.get('search_delta'):
        n = int(run.cfg.get('search', {}).get('n_per_point', 2000))
        ref = run.draw(run.data, n, "experiment.target", labels=target_label)
        cfg = run.search_config(model, EmpiricalDist(ref.data), run.seed, target_label)
        report = grid_search_delta(model, run.schedule, cfg)
        _write_report(run, report, "report.csv")
        drift = DriftConfig(report.delta_star, cfg.mode)
        summary.update(_report_summary(report))

    result = generate_counterfactual(source, model, run.schedule, spec, drift, strength,
                                     run.streams.child("experiment.counterfactual"),
                                     run.threads)
    run.sink.write('batch', "source.csv", write_batch_csv, source)
    run.sink.write('batch', "counterfactual.csv", write_batch_csv, result.batch)
    header = ['sample_id', 'total', 'outcome', 'instance', 'flipped']
    rows = [{'sample_id': i, 'total': fmt_float(t), 'outcome': fmt_float(o),
             'instance': fmt_float(ins), 'flipped': int(fl)}
            for i, (t, o, ins, fl) in enumerate(zip(result.total, result.outcome_term,
                                                    result.instance_term, result.flipped))]
    run.sink.write('report', "losses.csv", lambda f, r: write_rows_csv(f, header, r), rows)
    summary.update(counterfactual_summary(result))

    if c.get('baseline', True) and strength < 1.0:
        full = generate_counterfactual(source, model, run.schedule, spec, drift, 1.0,
                                       run.streams.child("experiment.counterfactual"),
                                       run.threads)
        summary['baseline_mean_instance'] = float(np.mean(full.instance_term))
        summary['baseline_flip_rate'] = full.flip_rate

    n_score = source.n
    synthetic, _ = run.generate(model, run.drift, n=n_score,
                                cond=np.arange(n_score) % run.data.n_classes, record=False)
    real = run.draw(run.data, n_score, "experiment.real")
    score = synthetic_to_real_score(synthetic, real)
    summary['synthetic_to_real_accuracy'] = score['accuracy']
    summary['synthetic_to_real_auc'] = score['auc']
    return summary

def run_experiment(manifest: RunManifest, out_dir: str, threads: int = 1,
                   defaults: Config = None) -> ExperimentResult:
    """Validate the manifest's config, dispatch on its kind and write all
    artifacts plus manifest.json and result.json into out_dir.  On any
    failure the files written so far are removed and the error re-raised."""
    manifest.config = with_defaults(manifest.config, defaults)
    kind = manifest.kind
    logger.info("Run %s: kind %s seed %d -> %s", manifest.run_id, kind,
                manifest.seed, out_dir)
    sink = ArtifactSink(out_dir)
    try:
        run = _Run(manifest, sink, threads)
        per_seed = {}
        if kind == 'sample':
            summary = _run_sample(run)
        elif kind == 'sweep-drift':
            summary = _run_sweep(run)
        elif kind == 'grid-search':
            summary = _run_grid_search(run)
        elif kind == 'finetune':
            summary, per_seed = _run_finetune(run)
        else:
            summary = _run_counterfactual(run)
        sink.audit()
        result = ExperimentResult(kind, manifest.run_id, out_dir,
                                  list(sink.artifacts), summary, per_seed)
        sink.write('report', RESULT_FILE, write_json, result.to_dict(), record=False)
        manifest.finished = time.time()
        sink.write('report', MANIFEST_FILE, write_json, manifest.to_dict(), record=False)
    except BaseException:
        logger.error("Run %s failed, cleaning up %s", manifest.run_id, out_dir)
        sink.cleanup()
        raise
    logger.info("Run %s done: %d artifacts", manifest.run_id, len(result.artifacts))
    return result

@dataclass
class MetricDiff:
    metric: str
    a: float
    b: float
    delta: float
    p_value: Optional[float] = None
    test: str = ''

    def significant(self, alpha: float = 0.05) -> bool:
        return self.p_value is not None and self.p_value < alpha

    def to_row(self) -> dict:
        return {'metric': self.metric, 'a': fmt_float(self.a), 'b': fmt_float(self.b),
                'delta': fmt_float(self.delta),
                'p_value': '' if self.p_value is None else fmt_float(self.p_value),
                'test': self.test}

DIFF_HEADER = ('metric', 'a', 'b', 'delta', 'p_value', 'test')

def _z_test(diff: float, se_a: float, se_b: float) -> Optional[float]:
    scale = float(np.hypot(se_a, se_b))
    if scale == 0:
        return 1.0 if diff == 0 else None
    return float(2.0 * sps.norm.sf(abs(diff) / scale))

def compare_runs(a: ExperimentResult, b: ExperimentResult) -> list:
    """Per-metric differences b - a over the metrics both runs report.

    Metrics reported per seed in both runs get a Welch t-test over the
    seed values; otherwise metrics with a '<metric>_se' entry get a
    two-sided z-test.  Others carry no p-value."""
    if a.kind != b.kind:
        raise KindMismatchError(f"cannot compare a {a.kind} run with a {b.kind} run")
    diffs = []
    for metric in sorted(set(a.summary) & set(b.summary)):
        if metric.endswith('_se'):
            continue
        va, vb = a.summary[metric], b.summary[metric]
        if not isinstance(va, (int, float)) or not isinstance(vb, (int, float)):
            continue
        d = MetricDiff(metric, float(va), float(vb), float(vb) - float(va))
        sa, sb = a.per_seed.get(metric), b.per_seed.get(metric)
        if sa and sb and len(sa) > 1 and len(sb) > 1:
            if np.array_equal(sa, sb):
                d.p_value = 1.0
            else:
                d.p_value = float(sps.ttest_ind(sb, sa, equal_var=False).pvalue)
            d.test = 'welch'
        elif f"{metric}_se" in a.summary and f"{metric}_se" in b.summary:
            d.p_value = _z_test(d.delta, a.summary[f"{metric}_se"],
                                b.summary[f"{metric}_se"])
            d.test = 'z'
        diffs.append(d)
    logger.info("Compared %s vs %s: %d metrics", a.run_id, b.run_id, len(diffs))
    return diffs
