#!/usr/bin/env python
"""Module containing the class that probes representations of a zoo.

Every (source, task) cell extracts features for the train/val/test splits,
fits a ridge or softmax probe on train with selection on val, and scores
it on test. Transforms (standardization, PCA) are fitted on train only.

Examples:
    python -m scripts.hyperZoo probe --zoo zoos/ts \
        --encoder runs/ts-ecd/encoder.hzp --sources raw,sw,hyperrep \
        --tasks eph,acc,ggap --out reports/ts

"""
import logging
import zlib

from multiprocessing.pool import ThreadPool

import numpy as np

from scripts.modules.errors import ConfigError, DataError, LayoutError
from scripts.modules.helperFunctions import setup_logger
from scripts.modules.probes import (PCA_KINDS, ProbeReport, Standardizer,
                                    accuracy, fit_pca, fit_probe_cell,
                                    kendall_tau, r2_score, task_kind,
                                    task_targets)
from scripts.modules.zooStore import SPLITS, weight_statistics_matrix

SOURCES = ['raw', 'sw', 'pca_linear', 'pca_cosine', 'pca_rbf', 'hyperrep']
DEFAULT_PCA_DIM = 50
OOD_COLUMNS = ['source', 'target', 'task', 'tau', 'r2', 'accuracy', 'n']


def cell_seed(source, task):
    return zlib.crc32(('%s/%s' % (source, task)).encode('utf-8'))


class ZooProber(object):
    """Class for linear probing of one zoo's representations.

    Attributes:
        manifest: ZooManifest
        encoder: HyperEncoder or None
        transforms: dict source -> callable mapping [n, N] weights to features
        probes: dict (source, task) -> fitted RidgeProbe or SoftmaxProbe
    """

    def __init__(
            self, manifest, encoder=None, standardize=True, pca_dim=None,
            pca_gamma=None, pca_solver='auto', pool_bias=False, jobs=1,
            softmax_kwargs=None, logger=None, dir_log=None,
            verbosity=logging.INFO):
        self.manifest = manifest
        self.encoder = encoder
        self.standardize = standardize
        self.pca_gamma = pca_gamma
        self.pca_solver = pca_solver
        self.pool_bias = pool_bias
        self.jobs = max(1, int(jobs))
        self.softmax_kwargs = softmax_kwargs
        if pca_dim is None:
            pca_dim = encoder.config.latent_dim if encoder is not None \
                else DEFAULT_PCA_DIM
        self.pca_dim = int(pca_dim)
        if encoder is not None and encoder.layout != manifest.layout:
            raise LayoutError('encoder layout %s does not match zoo %s layout '
                              '%s' % (encoder.layout.describe(), manifest.name,
                                      manifest.layout.describe()))

        # Set up logger if not given as arg
        if logger is not None:
            self.logger = logger
        else:
            self.logger = setup_logger('zooProber', dir_log, verbosity)

        self.splits = {s: manifest.samples(s) for s in SPLITS}
        self.transforms = {}
        self.features = {}
        self.probes = {}

        self.logger.info('Logging set up for zooProber object')
        self.logger.info('Show:split_samples=%s'
                         % {s: len(self.splits[s][1]) for s in SPLITS})
        self.logger.debug('Exit:__init__')

    def _standardized(self, fn, train):
        """Compose fn with a Standardizer fitted on fn(train)."""
        if not self.standardize:
            return fn
        scaler = Standardizer().fit(fn(train))
        return lambda W: scaler.transform(fn(W))

    def fitTransform(self, source):
        """Fit the feature map of one source on the train split.

        Raises:
            ConfigError: for an unknown source, or hyperrep without encoder
        """
        self.logger.debug('Entr:fitTransform')
        if source not in SOURCES:
            raise ConfigError('unknown source %s, expected one of %s'
                              % (source, SOURCES))
        W_train = self.splits['train'][0]
        layout = self.manifest.layout
        if source == 'raw':
            fn = self._standardized(
                lambda W: np.asarray(W, dtype=np.float64), W_train)
        elif source == 'sw':
            fn = self._standardized(
                lambda W: weight_statistics_matrix(W, layout, self.pool_bias),
                W_train)
        elif source in PCA_KINDS:
            base = self._standardized(
                lambda W: np.asarray(W, dtype=np.float64), W_train)
            dim = min(self.pca_dim, W_train.shape[0], layout.N)
            pca = fit_pca(base(W_train), source, dim, self.pca_gamma,
                          self.pca_solver)
            fn = lambda W: pca.transform(base(W))
        else:
            if self.encoder is None:
                raise ConfigError('source hyperrep needs a trained encoder')
            fn = lambda W: self.encoder.embed_batch(W).astype(np.float64)
        self.transforms[source] = fn
        self.features[source] = {s: fn(self.splits[s][0]) for s in SPLITS}
        self.logger.debug('Show:%s_dim=%i'
                          % (source, self.features[source]['train'].shape[1]))
        self.logger.debug('Exit:fitTransform')
        return fn

    def _fit_cell(self, cell):
        source, task, targets = cell
        data = [(self.features[source][s], targets[s]) for s in SPLITS]
        try:
            result, probe = fit_probe_cell(task, data[0], data[1], data[2],
                                           cell_seed(source, task),
                                           self.softmax_kwargs)
        except DataError as err:
            self.logger.warning('%s/%s undefined: %s' % (source, task, err))
            result = {'metric': 'r2' if task_kind(task) == 'regression'
                      else 'accuracy', 'value': float('nan'),
                      'alpha': float('nan'), 'tau': float('nan')}
            probe = None
        return source, task, result, probe

    def run(self, sources, tasks):
        """Run every (source, task) cell and return a ProbeReport.

        Raises:
            DataError: when a task target is undefined for some models
        """
        self.logger.debug('Entr:run')
        targets = {}
        for task in tasks:
            task_kind(task)
            targets[task] = {s: task_targets(task, self.splits[s][1])
                             for s in SPLITS}
        for source in sources:
            if source not in self.transforms:
                self.fitTransform(source)

        cells = [(source, task, targets[task])
                 for source in sources for task in tasks]
        if self.jobs > 1:
            pool = ThreadPool(self.jobs)
            try:
                results = pool.map(self._fit_cell, cells)
            finally:
                pool.close()
        else:
            results = [self._fit_cell(c) for c in cells]

        report = ProbeReport()
        sizes = {s: len(self.splits[s][1]) for s in SPLITS}
        for source, task, result, probe in results:
            self.probes[(source, task)] = probe
            report.add(zoo=self.manifest.name, source=source, task=task,
                       n_train=sizes['train'], n_val=sizes['val'],
                       n_test=sizes['test'], **result)
            self.logger.info('Show:%s/%s %s=%.4f'
                             % (source, task, result['metric'],
                                result['value']))
        self.logger.info('STATUS UPDATE: probing is 100% complete.')
        self.logger.debug('Exit:run')
        return report

    def ood_transfer(self, target, tasks, source='hyperrep'):
        """Apply this zoo's feature map and probes to another zoo's test split.

        Args:
            target: ZooManifest of the target zoo
            tasks: list of task names; probes are fitted first if missing
            source: representation source to transfer

        Returns:
            list of dicts with source, target, task, tau, r2, accuracy, n

        Raises:
            LayoutError: naming both layouts when they differ
        """
        self.logger.debug('Entr:ood_transfer')
        if target.layout != self.manifest.layout:
            raise LayoutError('cannot transfer from zoo %s (%s) to zoo %s (%s)'
                              % (self.manifest.name,
                                 self.manifest.layout.describe(), target.name,
                                 target.layout.describe()))
        missing = [t for t in tasks if (source, t) not in self.probes]
        if missing:
            self.run([source], missing)

        W_test, rows = target.samples('test')
        Z = self.transforms[source](W_test)
        table = []
        for task in tasks:
            truth = task_targets(task, rows)
            probe = self.probes[(source, task)]
            tau = r2 = acc = float('nan')
            if probe is not None and len(truth) >= 2:
                pred = probe.predict(Z)
                if task_kind(task) == 'regression':
                    tau = kendall_tau(pred, truth)
                    r2 = r2_score(pred, truth)
                else:
                    acc = accuracy(pred, truth)
            if len(truth) < 100:
                self.logger.warning('%s: only %i target samples for task %s'
                                    % (target.name, len(truth), task))
            table.append({'source': self.manifest.name, 'target': target.name,
                          'task': task, 'tau': tau, 'r2': r2, 'accuracy': acc,
                          'n': int(len(truth))})
            self.logger.info('Show:%s->%s %s tau=%.4f'
                             % (self.manifest.name, target.name, task, tau))
        self.logger.debug('Exit:ood_transfer')
        return table
