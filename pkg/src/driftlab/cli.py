#!/usr/bin/python3
"""Command line entry point.

    driftlab sweep-drift --grid=-0.2,-0.1,0,0.1,0.2 --out out/sweep
    driftlab grid-search --config search.yaml --out report.csv
    driftlab counterfactual --lambda 1.0 --target-label 1 --strength 0.6
    driftlab compare out/plain out/drifted

Exit codes: 0 success, 2 config error, 3 numeric failure, 1 other failure.
"""

import argparse
import copy
import logging
import os
import shutil
import sys

import yaml
from prometheus_client import start_http_server

from .config import Config
from .errors import ConfigError, DriftlabError, NumericFailure
from .experiment import (RunManifest, run_experiment, load_config, load_result,
                         compare_runs, DIFF_HEADER)
from .artifacts import write_rows_csv
from .stats import Stats
from .driftlab_logger import Logger, set_debug

logger = logging.getLogger(__name__)
#logger.level = logging.DEBUG
LOGGER = Logger()

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

# used by `counterfactual` when no --config names a data mixture
TWO_CLASS_DATA = {'classes': [[{'weight': 1.0, 'mean': [-2.0], 'std': [0.5]}],
                              [{'weight': 1.0, 'mean': [2.0], 'std': [0.5]}]]}

RUN_KINDS = ('sample', 'sweep-drift', 'grid-search', 'finetune', 'counterfactual')

def _floats(text: str) -> list:
    return [float(v) for v in text.split(',') if v.strip()]

def _ints(text: str) -> list:
    return [int(v) for v in text.split(',') if v.strip()]

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help="experiment config, YAML or JSON")
    common.add_argument('--seed', type=int, help="root seed (default: config or 0)")
    common.add_argument('--out', default='driftlab_out',
                        help="output directory; a path ending in .csv receives the main report")
    common.add_argument('--threads', type=int, default=1, help="worker threads")
    common.add_argument('-m', '--mport', type=int, help="prometheus metrics port to listen on")
    common.add_argument('-d', '--debug', action='store_true')

    sampling = argparse.ArgumentParser(add_help=False)
    sampling.add_argument('--n', type=int, help="samples to generate")
    sampling.add_argument('--delta', type=float, help="latent drift δ")
    sampling.add_argument('--mode', choices=['prior', 'per-step', 'both'])
    sampling.add_argument('--backend', choices=['analytic', 'mlp'])

    parser = argparse.ArgumentParser(
        prog='driftlab', description="latent drift experiments on a desk-scale diffusion model")
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('sample', parents=[common, sampling], help="generate one batch")
    p.add_argument('--cond', type=int, help="class label to sample under")
    p.add_argument('--sampler', choices=['ancestral', 'ddim'])
    p.add_argument('--eta', type=float)
    p.add_argument('--n-steps', type=int, help="DDIM subgrid size")

    p = sub.add_parser('sweep-drift', parents=[common, sampling],
                       help="one batch and trajectory per δ in a grid")
    p.add_argument('--grid', type=_floats, help="comma separated δ values")

    p = sub.add_parser('grid-search', parents=[common, sampling],
                       help="select δ* against a target distribution")
    p.add_argument('--grid', type=_floats)
    p.add_argument('--n-per-point', type=int)
    p.add_argument('--refine', action='store_true')
    p.add_argument('--per-class', action='store_true')
    p.add_argument('--target-mean', type=float, help="mean of a Gaussian target")
    p.add_argument('--target-std', type=float, default=1.0)

    p = sub.add_parser('finetune', parents=[common],
                       help="pretrain, fine-tune on the target, compare δ=0 with δ*")
    p.add_argument('--seeds', type=_ints, help="comma separated seeds")
    p.add_argument('--steps', type=int, help="fine-tuning steps")
    p.add_argument('--apply-drift', action='store_true',
                   help="drift the noise target while fine-tuning")

    p = sub.add_parser('counterfactual', parents=[common, sampling],
                       help="regenerate source samples under a desired label")
    p.add_argument('--lambda', dest='lam', type=float)
    p.add_argument('--target-label', type=int)
    p.add_argument('--source-label', type=int)
    p.add_argument('--strength', type=float)
    p.add_argument('--search-delta', action='store_true', help="grid-search δ* first")

    p = sub.add_parser('report', parents=[common], help="print a run's summary")
    p.add_argument('run_dir')

    p = sub.add_parser('compare', parents=[common], help="compare two runs of one kind")
    p.add_argument('run_a')
    p.add_argument('run_b')
    return parser

def _set(cfg: dict, section: str, key: str, value):
    if value is not None:
        cfg.setdefault(section, {})[key] = value

def build_config(args) -> dict:
    """The experiment config for a run subcommand: --config as given (or the
    lab defaults), with command line flags applied over it."""
    if args.config:
        cfg = load_config(args.config)
        if cfg.get('kind', args.command) != args.command:
            raise ConfigError(f"config is for {cfg['kind']}, not {args.command}", 'kind')
    else:
        cfg = copy.deepcopy(Config().vars)
        if args.command == 'counterfactual':
            cfg['data'] = copy.deepcopy(TWO_CLASS_DATA)
        if args.command == 'finetune':
            cfg['data'] = {'mean': 0.0, 'std': 1.0}
            cfg['target'] = {'mean': 0.5, 'std': 1.0}
    cfg['kind'] = args.command

    if getattr(args, 'backend', None):
        cfg['backend'] = args.backend
    _set(cfg, 'sampler', 'n', getattr(args, 'n', None))
    _set(cfg, 'drift', 'delta', getattr(args, 'delta', None))
    _set(cfg, 'drift', 'mode', getattr(args, 'mode', None))

    if args.command == 'sample':
        _set(cfg, 'sampler', 'cond', args.cond)
        _set(cfg, 'sampler', 'name', args.sampler)
        _set(cfg, 'sampler', 'eta', args.eta)
        _set(cfg, 'sampler', 'n_steps', args.n_steps)
    elif args.command in ('sweep-drift', 'grid-search'):
        _set(cfg, 'search', 'grid', args.grid)
    if args.command == 'grid-search':
        _set(cfg, 'search', 'n_per_point', args.n_per_point)
        _set(cfg, 'search', 'mode', args.mode)
        if args.refine:
            _set(cfg, 'search', 'refine', True)
        if args.per_class:
            _set(cfg, 'search', 'per_class', True)
        if args.target_mean is not None:
            cfg['target'] = {'mean': args.target_mean, 'std': args.target_std}
    elif args.command == 'finetune':
        if args.seeds:
            cfg['seeds'] = args.seeds
        _set(cfg, 'finetune', 'steps', args.steps)
        if args.apply_drift:
            _set(cfg, 'finetune', 'apply_drift', True)
            _set(cfg, 'drift', 'apply_in_training', True)
    elif args.command == 'counterfactual':
        _set(cfg, 'counterfactual', 'lambda', args.lam)
        _set(cfg, 'counterfactual', 'target_label', args.target_label)
        _set(cfg, 'counterfactual', 'source_label', args.source_label)
        _set(cfg, 'counterfactual', 'strength', args.strength)
        _set(cfg, 'counterfactual', 'n', args.n)
        if args.search_delta:
            _set(cfg, 'counterfactual', 'search_delta', True)
    return cfg

def _print_summary(result):
    print(f"run {result.run_id} ({result.kind}), {len(result.artifacts)} artifacts")
    for key in sorted(result.summary):
        print(f"  {key}: {result.summary[key]}")

def _out_dir(out: str) -> str:
    return out[:-len('.csv')] + '_run' if out.endswith('.csv') else out

def _main_report(result) -> str:
    """The file a .csv --out names: the run's report, or for sample runs
    the generated batch."""
    for kind in ('report', 'batch'):
        paths = [a.path for a in result.artifacts if a.kind == kind]
        if paths:
            return paths[0]
    return None

def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.debug:
        set_debug()
    if args.mport:
        Stats.register_prom_callbacks()
        start_http_server(args.mport)

    try:
        if args.command == 'report':
            _print_summary(load_result(args.run_dir))
        elif args.command == 'compare':
            diffs = compare_runs(load_result(args.run_a), load_result(args.run_b))
            for d in diffs:
                p = '-' if d.p_value is None else f"{d.p_value:.4g}"
                print(f"{d.metric}: {d.a:.6g} -> {d.b:.6g} (delta {d.delta:+.6g}, p {p})")
            if args.out.endswith('.csv'):
                with open(args.out, 'w', encoding='utf-8', newline='') as f:
                    write_rows_csv(f, DIFF_HEADER, [d.to_row() for d in diffs])
        else:
            manifest = RunManifest.from_config(build_config(args), args.seed)
            out_dir = _out_dir(args.out)
            result = run_experiment(manifest, out_dir, args.threads)
            report = _main_report(result)
            if args.out.endswith('.csv') and report:
                shutil.copyfile(os.path.join(out_dir, report), args.out)
            _print_summary(result)
    except (ConfigError, yaml.YAMLError) as e:
        logger.error("Config error: %s", e)
        return EXIT_CONFIG
    except NumericFailure as e:
        logger.error("Numeric failure: %s", e)
        return EXIT_NUMERIC
    except (DriftlabError, OSError) as e:
        logger.error("%s", e)
        return EXIT_FAILURE
    return EXIT_OK

def run():
    sys.exit(main())

if __name__ == "__main__":
    run()
