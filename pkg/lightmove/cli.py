"""Command-line front end: synth, prepare, train, eval, predict, sweep.

Every command writes one run manifest (JSON) recording its resolved flags,
configs, seed and the SHA-256 of its inputs and outputs. ``--manifest`` replays
a run from such a file.
"""
from __future__ import annotations

import io
import itertools
import json
import logging
import os
import sys
import time
from argparse import ArgumentParser, ArgumentTypeError, Namespace
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import lib
from .baselines import KINDS as BASELINE_KINDS
from .baselines import BaselineData, fit_baseline, training_sequences
from .checkpoint import read_checkpoint, write_checkpoint
from .data import (SEGMENT_MODES, SPLIT_NAMES, SplitSpec, latest_history, prepare,
                   read_bundle, read_logs, synth_generate, write_bundle, write_logs)
from .evaluate import comparison_table, model_predictor, timed_evaluate
from .lib import CheckpointError, ConfigError
from .model import (JUMP_PLACEMENTS, JUMP_WIRINGS, MODEL_KINDS, RESIZE_KINDS, ROW_ORDERS,
                    ModelConfig, apply_variant, count_params, forward, variant_code)
from .odeint import SolveSpec
from .train import METRICS, TrainConfig, fit, write_training_log

log = logging.getLogger(__name__)


@dataclass
class RunManifest:
    command: str
    args: dict
    config: dict = field(default_factory=dict)
    seed: int = 0
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    seconds: float = 0.0

    def write(self, path):
        with io.open(path, 'w', encoding='utf-8') as f:
            json.dump(asdict(self), f, indent=2, sort_keys=True)
        log.info('run manifest: %s', path)

    @classmethod
    def read(cls, path):
        with io.open(path, 'r', encoding='utf-8') as f:
            return cls(**json.load(f))


def _hashes(paths):
    return {p: lib.sha256_file(p) for p in paths}


# argument types

def grid_type(text):
    try:
        w, h = (int(x) for x in text.lower().split('x'))
    except ValueError:
        raise ArgumentTypeError('grid must look like WxH, got {!r}'.format(text))
    if w < 1 or h < 1 or w * h < 2:
        raise ArgumentTypeError('grid {!r} needs at least 2 cells'.format(text))
    return (w, h)


def ratios_type(text):
    try:
        r = tuple(float(x) for x in text.split(','))
    except ValueError:
        raise ArgumentTypeError('ratios must be three comma-separated numbers')
    if len(r) != 3:
        raise ArgumentTypeError('ratios must be three comma-separated numbers')
    return r


def list_of(kind):
    def parse(text):
        try:
            return [kind(x) for x in text.split(',') if x]
        except ValueError:
            raise ArgumentTypeError('bad list {!r}'.format(text))
    return parse


def baselines_type(text):
    kinds = [x for x in text.split(',') if x]
    for k in kinds:
        if k not in BASELINE_KINDS:
            raise ArgumentTypeError('unknown baseline {!r}; choose from {}'.format(
                k, ', '.join(BASELINE_KINDS)))
    return kinds


def _model_flags(p):
    p.add_argument('-v', '--variant', default='G2E',
                   help='jump kind, jump count, solver, fine-tune (e.g. G2E, L2E, G2EF, G0R)')
    p.add_argument('--d-loc', type=int, default=24)
    p.add_argument('--d-time', type=int, default=8)
    p.add_argument('--d-taxi', type=int, default=8)
    p.add_argument('--time-slots', type=int, default=24)
    p.add_argument('-M', '--horizon', type=int, default=1)
    p.add_argument('--step-size', type=float, default=0.25)
    p.add_argument('--dropout', type=float, default=0.3)
    p.add_argument('--resize', choices=RESIZE_KINDS, default='slice_last_M')
    p.add_argument('--resize-window', type=int, default=0)
    p.add_argument('--row-order', choices=ROW_ORDERS, default='long_first')
    p.add_argument('--jump-placement', choices=JUMP_PLACEMENTS, default='boundaries')
    p.add_argument('--jump-wiring', choices=JUMP_WIRINGS, default='pre_segment')
    p.add_argument('--model-kind', choices=MODEL_KINDS, default='lightmove')
    p.add_argument('--history-window', type=int, default=36)


def _train_flags(p):
    p.add_argument('--lr', type=float, default=0.01)
    p.add_argument('--decay', type=float, default=0.9)
    p.add_argument('--min-lr', type=float, default=0.0005)
    p.add_argument('--l2', type=float, default=1e-5)
    p.add_argument('-e', '--epochs', type=int, default=100)
    p.add_argument('--metric', choices=METRICS, default='mrr')
    p.add_argument('--sliding', dest='sliding', action='store_true', default=True,
                   help='one training example per session boundary (default)')
    p.add_argument('--no-sliding', dest='sliding', action='store_false')


def build_parser():
    parser = ArgumentParser(prog='lightmove', description='LightMove next-location prediction')
    parser.add_argument('-d', '--debug', action='store_true', help='verbose logging and progress bars')
    parser.add_argument('--manifest', help='replay the run recorded in this manifest')
    sub = parser.add_subparsers(dest='command')

    p = sub.add_parser('synth', help='generate a synthetic cab fleet log')
    p.add_argument('--grid', type=grid_type, required=True, help='WxH cells, e.g. 4x4')
    p.add_argument('--cabs', type=int, default=5)
    p.add_argument('--routes', type=int, default=1, help='routes per cab')
    p.add_argument('--route-len', type=int, default=12)
    p.add_argument('--noise', type=float, default=0.0)
    p.add_argument('--steps', type=int, default=2000, help='logs per cab')
    p.add_argument('--interval', type=int, default=300, help='seconds between logs')
    p.add_argument('-s', '--seed', type=int)
    p.add_argument('-o', '--output', required=True)

    p = sub.add_parser('prepare', help='segment, split and index a log into a bundle')
    p.add_argument('-i', '--input', required=True)
    p.add_argument('-o', '--output', required=True, help='bundle directory')
    p.add_argument('--mode', choices=SEGMENT_MODES, default='fixed_count')
    p.add_argument('-K', '--session-len', type=int, default=9)
    p.add_argument('--gap-hours', type=float, default=10.0)
    p.add_argument('--window-minutes', type=float, default=45.0)
    p.add_argument('--ratios', type=ratios_type, default=(0.70, 0.15, 0.15))

    p = sub.add_parser('train', help='fit a model on a bundle')
    p.add_argument('-b', '--bundle', required=True)
    p.add_argument('-o', '--output', required=True, help='checkpoint path')
    p.add_argument('--log', help='training log TSV (default: <output>.log.tsv)')
    p.add_argument('-s', '--seed', type=int)
    p.add_argument('-t', '--threads', type=int, default=1)
    _model_flags(p)
    _train_flags(p)

    p = sub.add_parser('eval', help='score a checkpoint and baselines on a split')
    p.add_argument('-c', '--checkpoint', required=True)
    p.add_argument('-b', '--bundle', required=True)
    p.add_argument('-o', '--output', required=True, help='report prefix')
    p.add_argument('--split', choices=SPLIT_NAMES, default='test')
    p.add_argument('--baselines', type=baselines_type, default=[])
    p.add_argument('--gru-epochs', type=int, default=0, help='epochs for plain_gru (0: as recorded)')
    p.add_argument('--no-verify', action='store_true', help='skip the checkpoint/bundle hash check')
    p.add_argument('-t', '--threads', type=int, default=1)

    p = sub.add_parser('predict', help='top-k next locations for one user')
    p.add_argument('-c', '--checkpoint', required=True)
    p.add_argument('-b', '--bundle', required=True)
    p.add_argument('-u', '--user', required=True)
    p.add_argument('-k', '--top', type=int, default=5)
    p.add_argument('-o', '--output', required=True)

    p = sub.add_parser('sweep', help='grid search over embedding sizes, dropout and lr')
    p.add_argument('-b', '--bundle', required=True)
    p.add_argument('-o', '--output', required=True, help='sweep TSV')
    p.add_argument('-s', '--seed', type=int)
    p.add_argument('-t', '--threads', type=int, default=1)
    p.add_argument('--d-loc-grid', type=list_of(int), default=[16, 24])
    p.add_argument('--d-time-grid', type=list_of(int), default=[8])
    p.add_argument('--d-taxi-grid', type=list_of(int), default=[8])
    p.add_argument('--dropout-grid', type=list_of(float), default=[0.3])
    p.add_argument('--lr-grid', type=list_of(float), default=[0.01])
    _model_flags(p)
    _train_flags(p)
    return parser


# config resolution

def _seed(args):
    if getattr(args, 'seed', None) is None:
        args.seed = lib.default_seed()
    return args.seed


def model_config_from_args(args, bundle):
    config = ModelConfig(
        num_locations=len(bundle.vocab.locations),
        num_users=len(bundle.vocab.users),
        num_time_slots=args.time_slots,
        d_loc=args.d_loc, d_time=args.d_time, d_taxi=args.d_taxi,
        session_len=bundle.spec.session_len,
        horizon=args.horizon,
        solver=SolveSpec(step_size=args.step_size),
        dropout=args.dropout,
        resize_kind=args.resize, resize_window=args.resize_window,
        row_order=args.row_order,
        jump_placement=args.jump_placement, jump_wiring=args.jump_wiring,
        model_kind=args.model_kind, history_window=args.history_window,
    )
    return apply_variant(config, args.variant).validate()


def train_config_from_args(args):
    return TrainConfig(lr=args.lr, decay=args.decay, min_lr=args.min_lr, l2=args.l2,
                       epochs=args.epochs, seed=args.seed, metric=args.metric,
                       threads=args.threads).validate()


def model_label(config):
    if config.model_kind == 'plain_gru':
        return 'GRU'
    return 'LightMove({})'.format(variant_code(config))


def _example_sets(bundle, config, sliding):
    K = bundle.spec.session_len
    train = bundle.examples('train', config.horizon, config.num_time_slots, K, sliding=sliding)
    valid = bundle.examples('valid', config.horizon, config.num_time_slots, K)
    return train, valid


# commands

def cmd_synth(args):
    seed = _seed(args)
    counters = {}
    records = synth_generate(grid=tuple(args.grid), cabs=args.cabs, routes_per_cab=args.routes,
                             noise=args.noise, steps=args.steps, interval=args.interval,
                             seed=seed, route_len=args.route_len, counters=counters)
    write_logs(args.output, records)
    log.info('wrote %d logs for %d cabs to %s (%d deviations)', counters['logs'],
             counters['users'], args.output, counters['deviations'])
    return RunManifest('synth', vars(args), config={'counters': counters}, seed=seed,
                       outputs=_hashes([args.output])), args.output + '.run.json'


def cmd_prepare(args):
    records, _ = read_logs(args.input)
    spec = SplitSpec(ratios=tuple(args.ratios), mode=args.mode, session_len=args.session_len,
                     gap_seconds=int(round(args.gap_hours * 3600)),
                     window_seconds=int(round(args.window_minutes * 60))).validate()
    bundle = prepare(records, spec)
    write_bundle(args.output, bundle)
    s = bundle.stats
    log.info('%d users, %d locations, %d logs, %.2f logs per session',
             s['num_users'], s['num_locations'], s['num_logs'], s['avg_session_len'])
    outputs = [os.path.join(args.output, n + '.tsv') for n in SPLIT_NAMES]
    outputs.append(os.path.join(args.output, 'bundle.json'))
    return RunManifest('prepare', vars(args), config={'split_spec': spec.to_dict(), 'stats': s},
                       inputs=_hashes([args.input]), outputs=_hashes(outputs)), \
        os.path.join(args.output, 'run.json')


def cmd_train(args):
    seed = _seed(args)
    bundle = read_bundle(args.bundle)
    config = model_config_from_args(args, bundle)
    train_config = train_config_from_args(args)
    train, valid = _example_sets(bundle, config, args.sliding)
    history = []
    ckpt = fit(train, valid, config, train_config, history=history)
    bundle_file = os.path.join(args.bundle, 'bundle.json')
    ckpt.meta['bundle_sha256'] = lib.sha256_file(bundle_file)
    ckpt.meta['sliding'] = args.sliding
    write_checkpoint(args.output, ckpt, config)
    log_path = args.log or args.output + '.log.tsv'
    write_training_log(log_path, history)
    log.info('best epoch %d: valid mrr=%.4f, checkpoint %s', ckpt.epoch, ckpt.valid_mrr, args.output)
    args.log = log_path
    return RunManifest('train', vars(args),
                       config={'model': config.to_dict(), 'train': train_config.to_dict()},
                       seed=seed, inputs=_hashes([bundle_file]),
                       outputs=_hashes([args.output, log_path])), args.output + '.run.json'


def _load_for_bundle(args):
    ckpt, config = read_checkpoint(args.checkpoint)
    bundle = read_bundle(args.bundle)
    bundle_file = os.path.join(args.bundle, 'bundle.json')
    recorded = ckpt.meta.get('bundle_sha256')
    if not getattr(args, 'no_verify', False) and recorded and recorded != lib.sha256_file(bundle_file):
        raise CheckpointError('{} was trained on a different bundle than {}'.format(
            args.checkpoint, args.bundle))
    if (config.num_locations, config.num_users) != (len(bundle.vocab.locations), len(bundle.vocab.users)):
        raise CheckpointError('checkpoint vocabulary ({} locations, {} users) does not match the bundle'
                              .format(config.num_locations, config.num_users))
    return ckpt, config, bundle


def cmd_eval(args):
    ckpt, config, bundle = _load_for_bundle(args)
    params = ckpt.to_store(config)
    K = bundle.spec.session_len
    examples = bundle.examples(args.split, config.horizon, config.num_time_slots, K)
    report = timed_evaluate(model_predictor(params, config), examples, name=model_label(config),
                            num_params=count_params(config), threads=args.threads)
    if args.split == 'valid':
        report.extra['recorded_valid_mrr'] = ckpt.valid_mrr
    reports = [report]

    if args.baselines:
        train_config = TrainConfig.from_dict(ckpt.meta['train_config'])
        if args.gru_epochs:
            train_config = replace(train_config, epochs=args.gru_epochs)
        train, valid = _example_sets(bundle, config, ckpt.meta.get('sliding', True))
        data = BaselineData(training_sequences(bundle.split('train'), bundle.vocab),
                            config.num_locations, config.horizon, train, valid, config, train_config)
        for kind in args.baselines:
            b = fit_baseline(kind, data)
            reports.append(timed_evaluate(b.predict, examples, name=b.name,
                                          num_params=b.num_params, threads=args.threads))

    table = comparison_table(reports)
    sys.stdout.write(table)
    tsv, js, txt = args.output + '.tsv', args.output + '.json', args.output + '.table.txt'
    with io.open(tsv, 'w', encoding='utf-8', newline='\n') as f:
        for i, r in enumerate(reports):
            if i:
                f.write('\n')
            f.writelines(r.tsv_lines())
    with io.open(js, 'w', encoding='utf-8') as f:
        json.dump([r.to_dict() for r in reports], f, indent=2, sort_keys=True)
    with io.open(txt, 'w', encoding='utf-8') as f:
        f.write(table)
    return RunManifest('eval', vars(args), config={'model': config.to_dict()},
                       inputs=_hashes([args.checkpoint, os.path.join(args.bundle, 'bundle.json')]),
                       outputs=_hashes([tsv, js, txt])), args.output + '.run.json'


def cmd_predict(args):
    ckpt, config, bundle = _load_for_bundle(args)
    if bundle.vocab.user(args.user) < 0:
        raise ConfigError('user {!r} is not in the training data'.format(args.user))
    sessions = []
    for name in SPLIT_NAMES:
        sessions += bundle.split(name).get(args.user, [])
    batch = latest_history(sessions, bundle.vocab, config.num_time_slots, config.session_len)
    P = forward(batch, ckpt.to_store(config), config).data
    locations = bundle.vocab.location_ids()
    with io.open(args.output, 'w', encoding='utf-8', newline='\n') as f:
        f.write('step\trank\tlocation_id\tprobability\n')
        for step, row in enumerate(P, 1):
            order = np.argsort(-row, kind='stable')[:args.top]
            for rank, k in enumerate(order, 1):
                line = '{}\t{}\t{}\t{!r}\n'.format(step, rank, locations[k], float(row[k]))
                f.write(line)
                sys.stdout.write(line)
    return RunManifest('predict', vars(args), config={'model': config.to_dict()},
                       inputs=_hashes([args.checkpoint]),
                       outputs=_hashes([args.output])), args.output + '.run.json'


def cmd_sweep(args):
    seed = _seed(args)
    bundle = read_bundle(args.bundle)
    base = model_config_from_args(args, bundle)
    base_train = train_config_from_args(args)
    rows = []
    grid = itertools.product(args.d_loc_grid, args.d_time_grid, args.d_taxi_grid,
                             args.dropout_grid, args.lr_grid)
    for d_loc, d_time, d_taxi, dropout, lr in grid:
        config = replace(base, d_loc=d_loc, d_time=d_time, d_taxi=d_taxi, dropout=dropout).validate()
        train_config = replace(base_train, lr=lr, min_lr=min(base_train.min_lr, lr)).validate()
        train, valid = _example_sets(bundle, config, args.sliding)
        ckpt = fit(train, valid, config, train_config)
        rows.append((d_loc, d_time, d_taxi, dropout, lr, ckpt.epoch,
                     ckpt.meta['valid_hits1'], ckpt.valid_mrr))
        log.info('d_loc=%d d_time=%d d_taxi=%d dropout=%g lr=%g: valid mrr=%.4f',
                 d_loc, d_time, d_taxi, dropout, lr, ckpt.valid_mrr)
    best = max(range(len(rows)), key=lambda i: rows[i][-1])
    with io.open(args.output, 'w', encoding='utf-8', newline='\n') as f:
        f.write('d_loc\td_time\td_taxi\tdropout\tlr\tbest_epoch\tvalid_hits1\tvalid_mrr\tbest\n')
        for i, r in enumerate(rows):
            f.write('{}\t{}\t{}\t{!r}\t{!r}\t{}\t{!r}\t{!r}\t{}\n'.format(*r, int(i == best)))
    return RunManifest('sweep', vars(args), config={'model': base.to_dict(),
                                                    'train': base_train.to_dict()},
                       seed=seed, inputs=_hashes([os.path.join(args.bundle, 'bundle.json')]),
                       outputs=_hashes([args.output])), args.output + '.run.json'


COMMANDS = {
    'synth': cmd_synth,
    'prepare': cmd_prepare,
    'train': cmd_train,
    'eval': cmd_eval,
    'predict': cmd_predict,
    'sweep': cmd_sweep,
}


def run(args):
    start = time.perf_counter()
    manifest, path = COMMANDS[args.command](args)
    manifest.args = {k: v for k, v in manifest.args.items() if k not in ('manifest', 'debug')}
    manifest.seconds = time.perf_counter() - start
    manifest.write(path)
    return manifest


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code
    lib.setup_logging(args.debug)

    if args.manifest:
        try:
            recorded = RunManifest.read(args.manifest)
        except (OSError, ValueError, TypeError) as e:
            log.error('cannot read manifest %s: %s', args.manifest, e)
            return 1
        args = Namespace(**dict(recorded.args, command=recorded.command,
                                debug=args.debug, manifest=args.manifest))
    elif args.command is None:
        parser.print_usage(sys.stderr)
        return 2

    try:
        run(args)
    except (ValueError, ArithmeticError, OSError, LookupError) as e:
        log.error('%s failed: %s', args.command, e)
        if lib.debug:
            log.exception('traceback')
        return 1
    return 0
