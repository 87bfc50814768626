#!/usr/bin/env python
"""Command-line entry point for zoo generation, training, probing and reports.

Commands:
    zoo generate     train a model zoo and write its manifest
    zoo export       flatten a zoo manifest into csv
    augment verify   check forward/backward permutation equivalence
    train            train a hyper-representation encoder on a zoo
    probe            linear probes on zoo representations
    ood              transfer encoder and probes to other zoos
    report           aggregate run directories into markdown and SVG

Values resolve as built-in defaults < config file section < flags. The
resolved values are written to config.json in the output directory.

Examples:
    hyperzoo zoo generate --kind tetris-seed --models 200 --epochs 25 \
        --out zoos/ts
    hyperzoo train --config config/ex_config.json --zoo zoos/ts --out runs/ed
"""
import argparse
import logging
import os
import sys

from scripts.develNet.createZoo import ZOO_KINDS, ZooCreator
from scripts.develNet.introspectZoo import ZooIntrospector
from scripts.develNet.probeZoo import OOD_COLUMNS, SOURCES, ZooProber
from scripts.develNet.reportRuns import RunReporter, plot_probe_bars
from scripts.develNet.trainModel import HyperRepTrainer, reconstruction_r2
from scripts.modules.augment import AugmentConfig
from scripts.modules.errors import ConfigError, HyperZooError, \
    VerificationError
from scripts.modules.helperFunctions import (load_config, setup_logger,
                                             write_config)
from scripts.modules.hyperEncoder import (ARCHITECTURES, TOKENIZATIONS,
                                          EncoderConfig, HyperEncoder)
from scripts.modules.json2csv import manifest2csv, records2csv
from scripts.modules.probes import ProbeReport
from scripts.modules.sslLosses import MODES, SSLConfig
from scripts.modules.zooStore import ZooManifest

PROBE_REPORT = 'probe_report.csv'
OOD_REPORT = 'ood.csv'


def _split_list(value):
    if isinstance(value, (list, tuple)):
        return list(value)
    return [v.strip() for v in value.split(',') if v.strip()]


def _require(args, *names):
    for name in names:
        if getattr(args, name, None) in [None, '']:
            raise ConfigError('--%s is required (flag or config file)'
                              % name.replace('_', '-'))


def _prepare_out(path):
    if not os.path.isdir(path):
        os.makedirs(path)
    return path


def resolved_config(args):
    """Serializable copy of the parsed arguments."""
    return {k: v for k, v in vars(args).items() if k not in ['func']}


# Commands ---------------------------------------------------------------

def cmd_zoo_generate(args, logger):
    _require(args, 'out')
    creator = ZooCreator(
        args.out, kind=args.kind, models=args.models, epochs=args.epochs,
        seed=args.seed, jobs=args.jobs, logger=logger, force=args.force,
        samples_per_class=args.samples_per_class, noise_std=args.noise_std,
        lr=args.lr, batch_size=args.batch_size, grid=args.grid,
        idx_paths=args.idx_paths, arch=args.arch)
    manifest = creator.run()
    write_config(resolved_config(args), args.out)
    print('zoo %s: %i models, %i crashed, splits %s'
          % (manifest.name, len(manifest.models), len(manifest.crashed),
             manifest.split_sizes()))
    return manifest


def cmd_zoo_export(args, logger):
    _require(args, 'zoo')
    path = manifest2csv(args.zoo, args.out)
    logger.info('Saved csv to %s' % path)
    return path


def cmd_augment_verify(args, logger):
    _require(args, 'zoo')
    if args.out:
        write_config(resolved_config(args), _prepare_out(args.out))
    introspector = ZooIntrospector(ZooManifest.load(args.zoo), seed=args.seed,
                                   logger=logger)
    report = introspector.run(args.samples, args.permutations, args.inputs,
                              args.epochs, args.out, strict=False)
    print('forward max deviation %.3e (tol %.0e)'
          % (report['forward']['max_deviation'],
             report['forward']['tolerance']))
    for row in report['backward']['epochs']:
        print('epoch %3i  |A-B| %.5f  |Ap-B| %.5f  |A-Ap| %.5f  acc diff %.4f'
              % (row['epoch'], row['d_a_b'], row['d_ap_b'], row['d_a_ap'],
                 row['acc_diff']))
    if not report['passed']:
        raise VerificationError('permutation equivalence check failed')
    return report


def encoder_config(args):
    return EncoderConfig(
        tokenization=args.tokenization,
        use_compression_token=args.compression_token, blocks=args.blocks,
        heads=args.heads, token_dim=args.token_dim, ffn_dim=args.ffn_dim,
        latent_dim=args.latent, dropout=args.dropout,
        projection_dim=args.projection_dim, architecture=args.architecture,
        ffn_layers=args.ffn_layers)


def ssl_config(args):
    augment = AugmentConfig(
        permutation_count=args.permutation_count, erase_prob=args.erase_prob,
        erase_low=args.erase_low, erase_high=args.erase_high,
        noise_std=args.aug_noise_std, permute=args.permute, erase=args.erase,
        noise=args.noise)
    return SSLConfig(mode=args.mode, beta=args.beta,
                     temperature=args.temperature, batch_size=args.batch_size,
                     epochs=args.epochs, lr=args.lr,
                     weight_decay=args.weight_decay, seed=args.seed,
                     augment=augment)


def cmd_train(args, logger):
    _require(args, 'zoo', 'out')
    encoder_cfg, ssl_cfg = encoder_config(args), ssl_config(args)
    write_config(resolved_config(args), _prepare_out(args.out))
    trainer = HyperRepTrainer(ZooManifest.load(args.zoo), encoder_cfg,
                              ssl_cfg, dir_save=args.out, logger=logger,
                              jobs=args.jobs)
    encoder, history = trainer.run(resume=args.resume)
    test_weights = trainer.manifest.samples('test')[0]
    if ssl_cfg.reconstructs() and test_weights.shape[0] > 0:
        logger.info('Show:test_r2=%.4f'
                    % reconstruction_r2(encoder, test_weights))
    return encoder, history


def _load_encoder(path):
    if not path:
        return None
    return HyperEncoder.load(path)[0]


def cmd_probe(args, logger):
    _require(args, 'zoo', 'out')
    sources, tasks = _split_list(args.sources), _split_list(args.tasks)
    if 'hyperrep' in sources and not args.encoder:
        raise ConfigError('source hyperrep needs --encoder')
    write_config(resolved_config(args), _prepare_out(args.out))
    prober = ZooProber(ZooManifest.load(args.zoo), _load_encoder(args.encoder),
                       standardize=args.standardize, pca_dim=args.pca_dim,
                       jobs=args.jobs, logger=logger)
    report = prober.run(sources, tasks)
    records2csv(report.rows, os.path.join(args.out, PROBE_REPORT),
                ProbeReport.COLUMNS)
    if args.plot:
        plot_probe_bars(report.rows, args.out)
    return report


def cmd_ood(args, logger):
    _require(args, 'zoo', 'target', 'out')
    targets, tasks = _split_list(args.target), _split_list(args.tasks)
    if args.source == 'hyperrep' and not args.encoder:
        raise ConfigError('source hyperrep needs --encoder')
    write_config(resolved_config(args), _prepare_out(args.out))
    prober = ZooProber(ZooManifest.load(args.zoo), _load_encoder(args.encoder),
                       standardize=args.standardize, jobs=args.jobs,
                       logger=logger)
    prober.run([args.source], tasks)
    table = []
    for target in targets:
        table.extend(prober.ood_transfer(ZooManifest.load(target), tasks,
                                         args.source))
    records2csv(table, os.path.join(args.out, OOD_REPORT), OOD_COLUMNS)
    return table


def cmd_report(args, logger):
    _require(args, 'out')
    write_config(resolved_config(args), _prepare_out(args.out))
    return RunReporter(args.runs, args.out, logger=logger).run()


# Parser -----------------------------------------------------------------

def _common_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', default=None,
                        help='JSON config file (default: %(default)s)')
    common.add_argument('--seed', type=int, default=0,
                        help='global seed (default: %(default)s)')
    common.add_argument('--jobs', type=int, default=os.cpu_count() or 1,
                        help='worker pool size (default: logical cores)')
    common.add_argument('--strict-determinism', dest='strict_determinism',
                        action='store_true',
                        help='serialize all parallel work (forces --jobs 1)')
    common.add_argument('--verbosity', type=int, default=logging.INFO,
                        help='stdout log level (default: %(default)s)')
    common.add_argument('--dir-log', dest='dir_log', default=None,
                        help='directory for DEBUG log files')
    return common


def _add_train_flags(p):
    p.add_argument('--zoo', help='zoo directory')
    p.add_argument('--out', help='run output directory')
    p.add_argument('--mode', choices=MODES, default='EcD',
                   help='objective (default: %(default)s)')
    p.add_argument('--beta', type=float, default=0.5,
                   help='reconstruction weight (default: %(default)s)')
    p.add_argument('--temperature', type=float, default=0.1,
                   help='contrastive temperature (default: %(default)s)')
    p.add_argument('--latent', type=int, default=50,
                   help='latent dimension L (default: %(default)s)')
    p.add_argument('--tokenization', choices=TOKENIZATIONS,
                   default='per_neuron', help='(default: %(default)s)')
    p.add_argument('--no-compression-token', dest='compression_token',
                   action='store_false',
                   help='concatenate all token outputs instead')
    p.add_argument('--architecture', choices=ARCHITECTURES,
                   default='transformer', help='(default: %(default)s)')
    p.add_argument('--blocks', type=int, default=2,
                   help='attention blocks per side (default: %(default)s)')
    p.add_argument('--heads', type=int, default=1,
                   help='attention heads (default: %(default)s)')
    p.add_argument('--token-dim', dest='token_dim', type=int, default=128,
                   help='(default: %(default)s)')
    p.add_argument('--ffn-dim', dest='ffn_dim', type=int, default=512,
                   help='(default: %(default)s)')
    p.add_argument('--ffn-layers', dest='ffn_layers', type=int, default=3,
                   help='layers of the ffn architecture (default: '
                        '%(default)s)')
    p.add_argument('--projection-dim', dest='projection_dim', type=int,
                   default=64, help='(default: %(default)s)')
    p.add_argument('--dropout', type=float, default=0.1,
                   help='(default: %(default)s)')
    p.add_argument('--batch-size', dest='batch_size', type=int, default=500,
                   help='(default: %(default)s)')
    p.add_argument('--epochs', type=int, default=2500,
                   help='(default: %(default)s)')
    p.add_argument('--lr', type=float, default=1e-4,
                   help='(default: %(default)s)')
    p.add_argument('--weight-decay', dest='weight_decay', type=float,
                   default=1e-9, help='(default: %(default)s)')
    p.add_argument('--permutation-count', dest='permutation_count', type=int,
                   default=120, help='(default: %(default)s)')
    p.add_argument('--no-permute', dest='permute', action='store_false',
                   help='disable permutation augmentation')
    p.add_argument('--no-erase', dest='erase', action='store_false',
                   help='disable erasing augmentation')
    p.add_argument('--no-noise', dest='noise', action='store_false',
                   help='disable noise augmentation')
    p.add_argument('--erase-prob', dest='erase_prob', type=float, default=0.5,
                   help='(default: %(default)s)')
    p.add_argument('--erase-low', dest='erase_low', type=float, default=0.03,
                   help='(default: %(default)s)')
    p.add_argument('--erase-high', dest='erase_high', type=float, default=0.3,
                   help='(default: %(default)s)')
    p.add_argument('--aug-noise-std', dest='aug_noise_std', type=float,
                   default=0.05, help='(default: %(default)s)')
    p.add_argument('--resume', action='store_true',
                   help='continue from encoder_last.hzp in --out')


def build_parser():
    """Return (parser, leaves) where leaves maps config section -> subparser."""
    common = _common_parser()
    parser = argparse.ArgumentParser(
        prog='hyperzoo', description='Model zoos and hyper-representations')
    commands = parser.add_subparsers(dest='command')
    leaves = {}

    zoo = commands.add_parser('zoo', help='generate or export model zoos')
    zoo_commands = zoo.add_subparsers(dest='action')
    p = zoo_commands.add_parser('generate', parents=[common],
                                help='train a model zoo')
    p.add_argument('--kind', choices=ZOO_KINDS, default='tetris-seed',
                   help='(default: %(default)s)')
    p.add_argument('--models', type=int, default=200,
                   help='(default: %(default)s)')
    p.add_argument('--epochs', type=int, default=25,
                   help='(default: %(default)s)')
    p.add_argument('--out', help='zoo directory')
    p.add_argument('--force', action='store_true',
                   help='write into a non-empty directory')
    p.add_argument('--samples-per-class', dest='samples_per_class', type=int,
                   default=200, help='(default: %(default)s)')
    p.add_argument('--noise-std', dest='noise_std', type=float, default=0.1,
                   help='tetris pixel noise (default: %(default)s)')
    p.add_argument('--lr', type=float, default=None,
                   help='base-model learning rate (default: per kind)')
    p.add_argument('--batch-size', dest='batch_size', type=int, default=32,
                   help='(default: %(default)s)')
    p.add_argument('--arch', choices=['ffn_tetris', 'cnn_mnist'],
                   default='ffn_tetris', help='(default: %(default)s)')
    p.set_defaults(func=cmd_zoo_generate, grid=None, idx_paths=None)
    leaves['zoo_generate'] = p

    p = zoo_commands.add_parser('export', parents=[common],
                                help='write zoo records as csv')
    p.add_argument('--zoo', help='zoo directory')
    p.add_argument('--out', help='csv path (default: <zoo>/<name>.csv)')
    p.set_defaults(func=cmd_zoo_export)
    leaves['zoo_export'] = p

    augment = commands.add_parser('augment', help='augmentation checks')
    augment_commands = augment.add_subparsers(dest='action')
    p = augment_commands.add_parser('verify', parents=[common],
                                    help='permutation equivalence checks')
    p.add_argument('--zoo', help='zoo directory')
    p.add_argument('--samples', type=int, default=50,
                   help='checkpoints to permute (default: %(default)s)')
    p.add_argument('--permutations', type=int, default=20,
                   help='permutations per checkpoint (default: %(default)s)')
    p.add_argument('--inputs', type=int, default=100,
                   help='random inputs per check (default: %(default)s)')
    p.add_argument('--epochs', type=int, default=10,
                   help='trajectory epochs (default: %(default)s)')
    p.add_argument('--out', default=None, help='report directory')
    p.set_defaults(func=cmd_augment_verify)
    leaves['augment_verify'] = p

    p = commands.add_parser('train', parents=[common],
                            help='train a hyper-representation encoder')
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)
    leaves['train'] = p

    p = commands.add_parser('probe', parents=[common],
                            help='linear probes on zoo representations')
    p.add_argument('--zoo', help='zoo directory')
    p.add_argument('--encoder', default=None, help='trained encoder.hzp')
    p.add_argument('--sources', default='raw,sw,hyperrep',
                   help='comma list of %s (default: %%(default)s)'
                        % ','.join(SOURCES))
    p.add_argument('--tasks', default='eph,acc,ggap',
                   help='comma list of tasks (default: %(default)s)')
    p.add_argument('--out', help='report directory')
    p.add_argument('--no-standardize', dest='standardize',
                   action='store_false', help='skip z-scoring of features')
    p.add_argument('--pca-dim', dest='pca_dim', type=int, default=None,
                   help='PCA components (default: encoder latent or 50)')
    p.add_argument('--plot', action='store_true',
                   help='write one SVG bar chart per task')
    p.set_defaults(func=cmd_probe)
    leaves['probe'] = p

    p = commands.add_parser('ood', parents=[common],
                            help='out-of-distribution transfer')
    p.add_argument('--zoo', help='source zoo directory')
    p.add_argument('--encoder', default=None, help='encoder of the source zoo')
    p.add_argument('--target', help='comma list of target zoo directories')
    p.add_argument('--tasks', default='acc',
                   help='comma list of tasks (default: %(default)s)')
    p.add_argument('--source', choices=SOURCES, default='hyperrep',
                   help='representation source (default: %(default)s)')
    p.add_argument('--no-standardize', dest='standardize',
                   action='store_false', help='skip z-scoring of features')
    p.add_argument('--out', help='report directory')
    p.set_defaults(func=cmd_ood)
    leaves['ood'] = p

    p = commands.add_parser('report', parents=[common],
                            help='aggregate run directories')
    p.add_argument('runs', nargs='*', help='run directories')
    p.add_argument('--out', help='report directory')
    p.set_defaults(func=cmd_report)
    leaves['report'] = p
    return parser, leaves


def _section(args):
    if args.command in ['zoo', 'augment']:
        return '%s_%s' % (args.command, args.action)
    return args.command


def parse_args(argv=None):
    """Parse flags on top of the config file section of the command."""
    parser, leaves = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, 'func', None) is None:
        parser.print_help()
        raise ConfigError('no command given')
    if args.config:
        leaves[_section(args)].set_defaults(
            **load_config(args.config, _section(args)))
        args = parser.parse_args(argv)
    if args.strict_determinism:
        args.jobs = 1
    return args


def main(argv=None):
    """Run one command; returns the process exit code."""
    try:
        args = parse_args(argv)
    except HyperZooError as err:
        sys.stderr.write('error: %s\n' % err)
        return err.exit_code

    logger = setup_logger('hyperZoo', args.dir_log, args.verbosity)
    logger.debug('Show:config=%s' % resolved_config(args))
    try:
        args.func(args, logger)
    except HyperZooError as err:
        logger.error('%s: %s' % (type(err).__name__, err))
        return err.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
