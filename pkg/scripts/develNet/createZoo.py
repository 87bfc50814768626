#!/usr/bin/env python
"""Module containing the class that generates model zoos.

Trains a population of base models under prescribed generating factors and
writes one checkpoint per (model, epoch) plus a manifest. Crashed models
are dropped; the survivors are split 70/15/15 at model level so that all
epochs of one model land in the same split.

Examples:
    To generate a desk-scale TETRIS-SEED zoo:
        python -m scripts.hyperZoo zoo generate --kind tetris-seed \
            --models 200 --epochs 25 --out zoos/ts

"""
import itertools
import logging
import os

from concurrent.futures import ProcessPoolExecutor

from scripts.modules.architectures import (ArchSpec, INIT_METHODS,
                                           TrainConfig, build_cnn_mnist,
                                           build_ffn_tetris, train_model)
from scripts.modules.datasets import generate_tetris, parse_idx, split_dataset
from scripts.modules.errors import ConfigError, StorageError
from scripts.modules.helperFunctions import rng_stream, setup_logger
from scripts.modules.zooStore import (WeightVector, ZooManifest,
                                      checkpoint_relpath, save_checkpoint)

ZOO_KINDS = ['tetris-seed', 'tetris-hyp', 'mnist-seed', 'custom-grid']
TETRIS_HYP_GRID = {'activation': ['tanh', 'relu'], 'init': INIT_METHODS,
                   'lr': [1e-3, 1e-4, 1e-5]}
DATASET_TRAIN_FRACTION = 0.8
SPLIT_FRACTIONS = (0.7, 0.15)

_WORKER_STATE = {}


def _worker_init(arch_dict, train_set, test_set, dir_save):
    _WORKER_STATE['arch'] = ArchSpec.from_dict(arch_dict)
    _WORKER_STATE['train'] = train_set
    _WORKER_STATE['test'] = test_set
    _WORKER_STATE['dir_save'] = dir_save


def _train_one(model_id, config_dict):
    """Train one model and write its checkpoints unless it crashed."""
    config = TrainConfig.from_dict(config_dict)
    result = train_model(_WORKER_STATE['arch'], _WORKER_STATE['train'],
                         _WORKER_STATE['test'], config)
    paths = []
    if result.crashed is None:
        for v in result.checkpoints:
            relpath = checkpoint_relpath(model_id, v.epoch)
            path = os.path.join(_WORKER_STATE['dir_save'], relpath)
            if not os.path.isdir(os.path.dirname(path)):
                os.makedirs(os.path.dirname(path))
            save_checkpoint(WeightVector(v.data, v.layout, model_id, v.epoch),
                            path)
            paths.append(relpath)
    return (model_id, config_dict, [r.as_dict() for r in result.records],
            paths, result.crashed)


def assign_splits(model_ids, seed, fractions=SPLIT_FRACTIONS):
    """Seeded model-level 70/15/15 split; returns model id -> split name."""
    order = [model_ids[i] for i in
             rng_stream(seed, 'model-split').permutation(len(model_ids))]
    n_train = int(round(fractions[0] * len(order)))
    n_val = int(round(fractions[1] * len(order)))
    splits = {}
    for i, model_id in enumerate(order):
        if i < n_train:
            splits[model_id] = 'train'
        elif i < n_train + n_val:
            splits[model_id] = 'val'
        else:
            splits[model_id] = 'test'
    return splits


def load_zoo_dataset(dataset_info):
    """Rebuild the (train, test) datasets a zoo was trained on."""
    if dataset_info['source'] == 'tetris':
        data = generate_tetris(dataset_info['seed'],
                               dataset_info['samples_per_class'],
                               dataset_info['noise_std'])
        return split_dataset(data, DATASET_TRAIN_FRACTION,
                             dataset_info['seed'])
    paths = dataset_info['idx_paths']
    train = parse_idx(paths['train_images'], paths['train_labels'], 10,
                      'mnist')
    if paths.get('test_images'):
        return train, parse_idx(paths['test_images'], paths['test_labels'], 10,
                                'mnist-test')
    return split_dataset(train, DATASET_TRAIN_FRACTION, dataset_info['seed'])


class ZooCreator(object):
    """Class for generating a model zoo on disk.

    Use this class to expand a zoo kind into TrainConfigs, train every model
    in a worker pool, drop crashed models, assign splits, and save the
    manifest.

    """

    def __init__(
            self, dir_save, kind='tetris-seed', models=200, epochs=25, seed=0,
            jobs=1, logger=None, dir_log=None, verbosity=logging.INFO,
            force=False, samples_per_class=200, noise_std=0.1, lr=None,
            batch_size=32, grid=None, idx_paths=None, arch='ffn_tetris'):
        """Provide output directory and zoo parameters."""
        if kind not in ZOO_KINDS:
            raise ConfigError('unknown zoo kind %s, expected one of %s'
                              % (kind, ZOO_KINDS))
        if models < 10:
            raise ConfigError('a zoo needs at least 10 models, got %i' % models)
        self.dir_save = dir_save
        self.kind = kind
        self.models = int(models)
        self.epochs = int(epochs)
        self.seed = int(seed)
        self.jobs = max(1, int(jobs))
        self.force = force
        self.samples_per_class = int(samples_per_class)
        self.noise_std = float(noise_std)
        self.lr = lr
        self.batch_size = int(batch_size)
        self.grid = grid or {}
        self.idx_paths = idx_paths or {}
        self.arch_name = arch

        # Set up logger if not given as arg
        if logger is not None:
            self.logger = logger
        else:
            self.logger = setup_logger('zooCreator', dir_log, verbosity)

        self.logger.info('Logging set up for zooCreator object')
        self.logger.info('kind: %s, models: %i, epochs: %i'
                         % (self.kind, self.models, self.epochs))
        self.logger.debug('Exit:__init__')

    def checkOutputDir(self):
        """Refuse to write into a non-empty directory unless forced."""
        self.logger.debug('Entr:checkOutputDir')
        if os.path.isdir(self.dir_save) and os.listdir(self.dir_save) \
                and not self.force:
            raise StorageError('output directory %s is not empty; use --force'
                               % self.dir_save)
        if not os.path.isdir(self.dir_save):
            os.makedirs(self.dir_save)
        self.logger.debug('Exit:checkOutputDir')

    def datasetInfo(self):
        if self.kind == 'mnist-seed' or (self.kind == 'custom-grid'
                                         and self.idx_paths):
            if not self.idx_paths.get('train_images'):
                raise ConfigError('%s zoos need idx_paths.train_images and '
                                  'idx_paths.train_labels' % self.kind)
            return {'source': 'idx', 'seed': self.seed,
                    'idx_paths': self.idx_paths}
        return {'source': 'tetris', 'seed': self.seed,
                'samples_per_class': self.samples_per_class,
                'noise_std': self.noise_std}

    def buildArch(self):
        if self.kind == 'mnist-seed' or self.arch_name == 'cnn_mnist':
            return build_cnn_mnist()
        return build_ffn_tetris()

    def buildConfigs(self):
        """Expand the zoo kind into an ordered list of TrainConfigs.

        Returns:
            configs: list of TrainConfig, model ids follow list order from 1
        """
        self.logger.debug('Entr:buildConfigs')
        base = {'epochs': self.epochs, 'batch_size': self.batch_size,
                'optimizer': 'adam', 'activation': 'tanh', 'init': 'uniform'}
        if self.kind == 'tetris-seed':
            base['lr'] = self.lr or 3e-5
            configs = [TrainConfig(seed=s, **base)
                       for s in range(1, self.models + 1)]
        elif self.kind == 'mnist-seed':
            base['lr'] = self.lr or 3e-4
            configs = [TrainConfig(seed=s, **base)
                       for s in range(1, self.models + 1)]
        else:
            grid = TETRIS_HYP_GRID if self.kind == 'tetris-hyp' else self.grid
            if not grid:
                raise ConfigError('custom-grid zoos need a non-empty grid')
            keys = sorted(grid)
            combos = list(itertools.product(*[grid[k] for k in keys]))
            seeds = max(1, int(round(float(self.models) / len(combos))))
            configs = []
            for seed in range(1, seeds + 1):
                for combo in combos:
                    params = dict(base, lr=self.lr or 1e-3)
                    params.update(dict(zip(keys, combo)))
                    configs.append(TrainConfig(seed=seed, **params))
        self.logger.debug('Show:configs=%i' % len(configs))
        self.logger.debug('Exit:buildConfigs')
        return configs

    def trainAll(self, arch, train_set, test_set, configs):
        """Train every config; results come back ordered by model id."""
        self.logger.debug('Entr:trainAll')
        jobs = [(i + 1, c.as_dict()) for i, c in enumerate(configs)]
        results = []
        progress = []  # Store progress shown to avoid rounding duplicates

        def report(done):
            percent = int(100 * done / len(jobs))
            if percent % 10 == 0 and percent not in progress:
                progress.append(percent)
                self.logger.info('STATUS UPDATE: zoo training is %i%% '
                                 'complete.' % percent)

        init_args = (arch.as_dict(), train_set, test_set, self.dir_save)
        if self.jobs == 1:
            _worker_init(*init_args)
            for model_id, config in jobs:
                results.append(_train_one(model_id, config))
                report(len(results))
        else:
            with ProcessPoolExecutor(max_workers=self.jobs,
                                     initializer=_worker_init,
                                     initargs=init_args) as pool:
                futures = [pool.submit(_train_one, model_id, config)
                           for model_id, config in jobs]
                for future in futures:
                    results.append(future.result())
                    report(len(results))
        self.logger.debug('Exit:trainAll')
        return results

    def run(self):
        """Generate the zoo and return its ZooManifest."""
        self.logger.debug('Entr:run')
        self.checkOutputDir()

        dataset_info = self.datasetInfo()
        train_set, test_set = load_zoo_dataset(dataset_info)
        dataset_info.update({'train': train_set.as_dict(),
                             'test': test_set.as_dict()})
        arch = self.buildArch()
        configs = self.buildConfigs()
        self.logger.info('Training %i models of %s (N=%i)'
                         % (len(configs), arch.name, arch.param_count()))

        results = self.trainAll(arch, train_set, test_set, configs)
        survivors = [r for r in results if r[4] is None]
        crashed = [{'model_id': r[0], 'config': r[1], 'reason': r[4]}
                   for r in results if r[4] is not None]
        for c in crashed:
            self.logger.warning('model %i crashed: %s'
                                % (c['model_id'], c['reason']))
        if len(survivors) < 3:
            raise ConfigError('only %i of %i models survived training'
                              % (len(survivors), len(results)))

        splits = assign_splits([r[0] for r in survivors], self.seed)
        models = [{'model_id': r[0], 'config': r[1], 'split': splits[r[0]],
                   'records': r[2], 'checkpoints': r[3]} for r in survivors]
        manifest = ZooManifest(
            os.path.basename(os.path.normpath(self.dir_save)), self.kind,
            arch.as_dict(), arch.layout(), dataset_info, models, crashed,
            self.seed, self.dir_save)
        manifest.save()

        self.logger.info('Show:models=%i' % len(models))
        self.logger.info('Show:crashed=%i' % len(crashed))
        self.logger.info('Show:split_sizes=%s' % manifest.split_sizes())
        self.logger.info('STATUS UPDATE: zoo generation is 100% complete.')
        self.logger.debug('Exit:run')
        return manifest
