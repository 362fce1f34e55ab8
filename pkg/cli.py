"""nlre: noisy-label noise-rate estimation experiments.

    python cli.py gen --kind idn --rate 0.5 --n 4000 --c 4 --d 2 --seed 7 --out blobs.nlds
    python cli.py train --config run.cfg --out runs/idn04
    python cli.py train --rate 0.4 --no-epsilon --out runs/idn04-no-eps
    python cli.py selftest --suite elbo
    python cli.py sweep --rates 0.2,0.3,0.4,0.5 --seeds 0,1,2,3,4 --out runs/grid

Exit codes: 0 ok, 2 invalid arguments, 3 I/O, 4 training, 5 self-test, 6 sweep cell failed.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from multiprocessing import Pool

import pandas as pd

import selftest
from config import ConfigError, DatasetSource, ExperimentConfig, ablation_overrides, load_experiment, with_updates
from datagen import (DatasetFormatError, NoiseKind, gen_gaussian_blobs, inject_noise, load_dataset, save_dataset,
                     split_train_test)
from emtrain import Curriculum, SelectionScope, TrainingError, train
from evalkit import EpochEvaluator, write_records
from logger import log_path, setup_logger
from numkit import Rng
from selection import CriterionKind

cli_logger = setup_logger('cli', log_path('cli'))

EXIT_OK = 0
EXIT_ARGS = 2
EXIT_IO = 3
EXIT_TRAINING = 4
EXIT_SELFTEST = 5
EXIT_SWEEP = 6

SUMMARY_KEYS = ('final_eps_hat', 'realized_rate', 'final_test_acc', 'best_test_acc', 'config_echo', 'seed',
                'wall_time_s')

# flag dest -> config key
FLAG_KEYS = {
    'kind': 'noise_kind', 'rate': 'noise_rate', 'std': 'noise_std', 'n': 'n', 'c': 'num_classes', 'd': 'd',
    'separation': 'separation', 'test_fraction': 'test_fraction', 'seed': 'seed',
    'epochs': 'epochs', 'warmup': 'warmup_epochs', 'batch_size': 'batch_size', 'lr': 'lr_theta',
    'lr_eps': 'lr_eps', 'momentum': 'momentum', 'criterion': 'criterion', 'knn_k': 'knn_k',
    'selection_scope': 'selection_scope', 'curriculum': 'curriculum', 'coteaching_tau': 'coteaching_tau',
    'coteaching_tk': 'coteaching_tk', 'hidden': 'hidden_width', 'e_steps': 'e_steps_per_batch',
    'm_steps': 'm_steps_per_batch', 'checkpoint_every': 'checkpoint_every', 'dump_splits': 'dump_splits_dir',
}
SWITCH_KEYS = {'full_batch': 'full_batch', 'freeze_classifier': 'freeze_classifier', 'progress': 'progress'}


# -- datasets ---------------------------------------------------------------

def generate_dataset(config):
    """Blobs plus injected noise, from the config's data stream."""
    data_rng = Rng(config.seed).child('data')
    clean = gen_gaussian_blobs(config.n, config.num_classes, config.d, config.separation, data_rng.child('blobs'))
    return inject_noise(clean, config.noise, data_rng.child('noise'))


def build_datasets(config):
    """``(train_ds, test_ds)``; the test side keeps clean labels only."""
    if config.source is DatasetSource.FILE:
        full = load_dataset(config.dataset_path)
    else:
        full = generate_dataset(config)
    return split_train_test(full, config.test_fraction, Rng(config.seed).child('data').child('split'))


# -- experiments --------------------------------------------------------------

def run_experiment(config, out_dir=None):
    """Train one configuration and write ``records.csv`` and ``summary.json`` under ``out_dir``."""
    out_dir = out_dir or config.out_dir
    os.makedirs(out_dir, exist_ok=True)
    train_ds, test_ds = build_datasets(config)
    evaluator = EpochEvaluator(test_ds, flip_mask=train_ds.flip_mask)
    cli_logger.info(f'Running experiment in {out_dir}: seed={config.seed}, noise={config.noise}')
    result = train(config.train, train_ds, test_ds, evaluator)
    write_records(result.records, os.path.join(out_dir, 'records.csv'))
    summary = {
        'final_eps_hat': result.eps_trajectory[-1],
        'realized_rate': train_ds.true_rate,
        'final_test_acc': result.records[-1].test_acc,
        'best_test_acc': max(r.test_acc for r in result.records),
        'config_echo': config.echo(),
        'seed': config.seed,
        'wall_time_s': result.wall_time_s if config.record_wall_time else 0.0,
    }
    with open(os.path.join(out_dir, 'summary.json'), 'w', encoding='utf-8') as fh:
        json.dump(summary, fh, indent=2)
        fh.write('\n')
    cli_logger.info(f'Experiment finished: eps_hat={summary["final_eps_hat"]:.4f} '
                    f'realized={summary["realized_rate"]:.4f} test_acc={summary["final_test_acc"]:.4f}')
    return summary


def _run_cell(job):
    rate, seed, echo, out_dir = job
    try:
        config = ExperimentConfig.model_validate(echo)
        summary = run_experiment(config, out_dir)
        return {'rate': rate, 'seed': seed, 'status': 'ok', 'error': '',
                **{k: summary[k] for k in ('final_eps_hat', 'realized_rate', 'final_test_acc', 'best_test_acc')}}
    except Exception as e:  # one failed cell must not stop the sweep
        cli_logger.warning(f'Sweep cell rate={rate} seed={seed} failed: {e}')
        return {'rate': rate, 'seed': seed, 'status': 'failed', 'error': str(e)}


def sweep_threads():
    try:
        return max(1, int(os.environ.get('NLRE_THREADS', '1')))
    except ValueError:
        raise ConfigError('NLRE_THREADS', f'expected a positive integer, got {os.environ["NLRE_THREADS"]!r}')


def run_sweep(config, rates, seeds, out_dir):
    """One run directory per (rate, seed), ``cells.csv`` per cell and ``sweep.csv`` mean/std per rate."""
    os.makedirs(out_dir, exist_ok=True)
    jobs = []
    for rate in rates:
        for seed in seeds:
            cell_dir = os.path.join(out_dir, f'rate_{rate:g}_seed_{seed}')
            cell = with_updates(config, noise_rate=rate, seed=seed, out_dir=cell_dir)
            jobs.append((rate, seed, cell.echo(), cell_dir))
    threads = min(sweep_threads(), len(jobs))
    cli_logger.info(f'Sweep of {len(jobs)} cells on {threads} process(es) into {out_dir}')
    if threads > 1:
        with Pool(processes=threads) as pool:
            rows = pool.map(_run_cell, jobs)
    else:
        rows = [_run_cell(job) for job in jobs]
    cells = pd.DataFrame(rows, columns=['rate', 'seed', 'status', 'final_eps_hat', 'realized_rate',
                                        'final_test_acc', 'best_test_acc', 'error'])
    cells.to_csv(os.path.join(out_dir, 'cells.csv'), index=False, float_format='%.17g')
    aggregate = aggregate_sweep(cells)
    aggregate.to_csv(os.path.join(out_dir, 'sweep.csv'), index=False, float_format='%.17g')
    return cells, aggregate


def aggregate_sweep(cells):
    metrics = ['final_eps_hat', 'realized_rate', 'final_test_acc', 'best_test_acc']
    rows = []
    for rate, group in cells.groupby('rate', sort=True):
        ok = group[group['status'] == 'ok']
        row = {'rate': rate, 'n_ok': len(ok), 'n_failed': len(group) - len(ok)}
        for metric in metrics:
            values = ok[metric].astype(float)
            row[f'{metric}_mean'] = values.mean() if len(ok) else float('nan')
            row[f'{metric}_std'] = values.std(ddof=0) if len(ok) else float('nan')
        rows.append(row)
    return pd.DataFrame(rows)


# -- commands -----------------------------------------------------------------

def _experiment_overrides(args):
    overrides = {key: getattr(args, dest) for dest, key in FLAG_KEYS.items()
                 if getattr(args, dest, None) is not None}
    for dest, key in SWITCH_KEYS.items():
        if getattr(args, dest, False):
            overrides[key] = True
    for item in getattr(args, 'set', None) or []:
        key, sep, value = item.partition('=')
        if not sep:
            raise ConfigError(item, 'expected --set key=value')
        overrides[key.strip()] = value.strip()
    if getattr(args, 'dataset', None):
        overrides.update(source=DatasetSource.FILE.value, dataset_path=args.dataset)
    if getattr(args, 'out', None):
        overrides['out_dir'] = args.out
    if getattr(args, 'no_record_time', False):
        overrides['record_wall_time'] = False
    overrides.update(ablation_overrides(no_epsilon=getattr(args, 'no_epsilon', False),
                                        fixed_eps=getattr(args, 'fixed_eps', None),
                                        lam=getattr(args, 'lam', None)))
    return overrides


def _load(args):
    overrides = _experiment_overrides(args)
    config = load_experiment(getattr(args, 'config', None), overrides)
    if config.train.checkpoint_every and not config.train.checkpoint_dir:
        config = with_updates(config, checkpoint_dir=os.path.join(config.out_dir, 'checkpoints'))
    return config


def cmd_gen(args):
    config = _load(args)
    ds = generate_dataset(config)
    save_dataset(ds, args.out_file)
    print(f'Wrote {len(ds)} samples to {args.out_file}')
    print(f'Realized noise rate: {ds.true_rate:.6f} (nominal {config.noise_rate})')
    return EXIT_OK


def cmd_train(args):
    config = _load(args)
    summary = run_experiment(config)
    print(f'Final eps_hat:     {summary["final_eps_hat"]:.4f}')
    print(f'Realized rate:     {summary["realized_rate"]:.4f}')
    print(f'Final test acc:    {summary["final_test_acc"]:.4f}')
    print(f'Best test acc:     {summary["best_test_acc"]:.4f}')
    print(f'Artifacts in {config.out_dir}')
    return EXIT_OK


def cmd_selftest(args):
    results = selftest.run_suites(args.suite, seed=args.seed)
    for result in results:
        print(f'[{"PASS" if result.passed else "FAIL"}] {result.name:<11} {result.seconds:6.2f}s  {result.detail}')
    failed = [r for r in results if not r.passed]
    if failed:
        print(f'Self-test failed: {failed[0].name}', file=sys.stderr)
        return EXIT_SELFTEST
    return EXIT_OK


def cmd_sweep(args):
    config = _load(args)
    cells, aggregate = run_sweep(config, args.rates, args.seeds, config.out_dir)
    print(aggregate.to_string(index=False))
    failed = cells[cells['status'] != 'ok']
    if len(failed):
        print(f'{len(failed)} of {len(cells)} sweep cells failed; see {config.out_dir}/cells.csv', file=sys.stderr)
        return EXIT_SWEEP
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------

def _float_list(text):
    try:
        return [float(v) for v in text.split(',') if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f'expected comma-separated numbers, got {text!r}')


def _int_list(text):
    try:
        return [int(v) for v in text.split(',') if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f'expected comma-separated integers, got {text!r}')


def _add_dataset_flags(parser):
    group = parser.add_argument_group('dataset')
    group.add_argument('--kind', choices=[k.value for k in NoiseKind], help='Noise kind')
    group.add_argument('--rate', type=float, help='Nominal noise rate in [0, 1)')
    group.add_argument('--std', type=float, help='Spread of per-sample IDN flip rates')
    group.add_argument('--n', type=int, help='Number of samples')
    group.add_argument('--c', type=int, help='Number of classes')
    group.add_argument('--d', type=int, help='Feature dimension')
    group.add_argument('--separation', type=float, help='Radius of the class-mean circle')
    group.add_argument('--seed', type=int, help='Experiment seed (u64)')


def _add_experiment_flags(parser):
    parser.add_argument('--config', type=str, help='Flat key = value config file')
    parser.add_argument('--out', type=str, help='Output directory')
    parser.add_argument('--set', action='append', metavar='KEY=VALUE', help='Override any config key')
    _add_dataset_flags(parser)
    parser.add_argument('--dataset', type=str, help='Load an NLDS file instead of generating blobs')
    parser.add_argument('--test-fraction', dest='test_fraction', type=float)
    group = parser.add_argument_group('training')
    group.add_argument('--epochs', type=int)
    group.add_argument('--warmup', type=int, help='Warm-up epochs')
    group.add_argument('--batch-size', dest='batch_size', type=int)
    group.add_argument('--lr', type=float, help='Learning rate of the networks')
    group.add_argument('--lr-eps', dest='lr_eps', type=float, help='Learning rate of the noise-rate logit')
    group.add_argument('--momentum', type=float)
    group.add_argument('--lam', type=float, help='Weight of the selection constraint')
    group.add_argument('--criterion', choices=[k.value for k in CriterionKind])
    group.add_argument('--knn-k', dest='knn_k', type=int)
    group.add_argument('--selection-scope', dest='selection_scope', choices=[s.value for s in SelectionScope])
    group.add_argument('--curriculum', choices=[c.value for c in Curriculum])
    group.add_argument('--coteaching-tau', dest='coteaching_tau', type=float)
    group.add_argument('--coteaching-tk', dest='coteaching_tk', type=int)
    group.add_argument('--hidden', type=int, help='Hidden width of every network')
    group.add_argument('--e-steps', dest='e_steps', type=int)
    group.add_argument('--m-steps', dest='m_steps', type=int)
    group.add_argument('--full-batch', dest='full_batch', action='store_true',
                       help='One unshuffled batch per epoch with ascent checks')
    group.add_argument('--freeze-classifier', dest='freeze_classifier', action='store_true')
    group.add_argument('--checkpoint-every', dest='checkpoint_every', type=int)
    group.add_argument('--dump-splits', dest='dump_splits', type=str, help='Directory for per-epoch split CSVs')
    group.add_argument('--progress', action='store_true')
    group = parser.add_argument_group('ablations')
    group.add_argument('--no-epsilon', dest='no_epsilon', action='store_true',
                       help='No selection (R=1) and no constraint (lam=0)')
    group.add_argument('--fixed-eps', dest='fixed_eps', type=float, help='Select with the constant R=1-v')
    parser.add_argument('--no-record-time', dest='no_record_time', action='store_true',
                        help='Write wall_time_s as 0.0 so repeated runs are byte-identical')


def build_parser():
    parser = argparse.ArgumentParser(prog='nlre', description='Noise-rate estimation for learning with noisy labels')
    sub = parser.add_subparsers(dest='command', required=True)

    gen = sub.add_parser('gen', help='Generate a noisy Gaussian-blob dataset file')
    _add_dataset_flags(gen)
    gen.add_argument('--out', dest='out_file', type=str, required=True, help='Dataset file to write')
    gen.set_defaults(handler=cmd_gen)

    train_cmd = sub.add_parser('train', help='Train one configuration')
    _add_experiment_flags(train_cmd)
    train_cmd.set_defaults(handler=cmd_train)

    check = sub.add_parser('selftest', help='Run the oracle self-test suites')
    check.add_argument('--suite', action='append', choices=list(selftest.SUITES), help='Run only this suite')
    check.add_argument('--seed', type=int, default=0)
    check.set_defaults(handler=cmd_selftest)

    sweep = sub.add_parser('sweep', help='Grid over noise rates and seeds')
    _add_experiment_flags(sweep)
    sweep.add_argument('--rates', type=_float_list, required=True, help='Comma-separated noise rates')
    sweep.add_argument('--seeds', type=_int_list, required=True, help='Comma-separated seeds')
    sweep.set_defaults(handler=cmd_sweep)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except ConfigError as e:
        print(f'error: {e}', file=sys.stderr)
        return EXIT_ARGS
    except TrainingError as e:
        cli_logger.error(str(e))
        print(f'error: {e}', file=sys.stderr)
        return EXIT_TRAINING
    except (OSError, DatasetFormatError) as e:
        cli_logger.error(f'I/O error: {e}')
        print(f'error: {e}', file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        cli_logger.error(f'Invalid arguments: {e}')
        print(f'error: {e}', file=sys.stderr)
        return EXIT_ARGS


if __name__ == '__main__':
    sys.exit(main())
