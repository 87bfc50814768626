#!/usr/bin/env python
"""Module containing the class that verifies permutation equivalence on a zoo.

Forward check: permuted checkpoints must produce the same logits on random
inputs. Backward check: a model trained from a permuted init must follow
the permuted trajectory of the original under identical data order.

Examples:
    python -m scripts.hyperZoo augment verify --zoo zoos/ts --samples 50

"""
import json
import logging
import os

import numpy as np

from scripts.develNet.createZoo import load_zoo_dataset
from scripts.modules.architectures import (ArchSpec, TrainConfig,
                                           init_weights, logits_of,
                                           train_model)
from scripts.modules.augment import apply_permutation, random_permutations
from scripts.modules.errors import DataError, VerificationError
from scripts.modules.helperFunctions import rng_stream, setup_logger
from scripts.modules.zooStore import WeightVector

FORWARD_TOL = 1e-5
TRAJECTORY_RATIO = 0.05
ACC_TOL = 0.005
REPORT_NAME = 'verify_report.json'


def non_identity_permutations(layout, rng):
    """Random per-layer permutations with at least one layer moved."""
    while True:
        perms = random_permutations(layout, rng)
        if any(np.any(p != np.arange(len(p))) for p in perms.values()):
            return perms


def trajectory_distances(run_a, run_b, perms):
    """Per-epoch distance triple between A, its permuted copy Ap and B.

    Args:
        run_a: list of WeightVectors of the original run
        run_b: list of WeightVectors of the run from the permuted init
        perms: permutation that maps A's init onto B's init

    Returns:
        list of dicts with epoch, d_a_b, d_ap_b, d_a_ap and ratio
    """
    rows = []
    for a, b in zip(run_a, run_b):
        ap = apply_permutation(a, perms)
        d_a_b = float(np.linalg.norm(a.data.astype(np.float64) - b.data))
        d_ap_b = float(np.linalg.norm(ap.data.astype(np.float64) - b.data))
        d_a_ap = float(np.linalg.norm(a.data.astype(np.float64) - ap.data))
        ratio = d_ap_b / d_a_b if d_a_b > 0 else float('inf')
        rows.append({'epoch': a.epoch, 'd_a_b': d_a_b, 'd_ap_b': d_ap_b,
                     'd_a_ap': d_a_ap, 'ratio': ratio})
    return rows


class ZooIntrospector(object):
    """Class for checking permutation equivalence on a zoo's checkpoints."""

    def __init__(self, manifest, seed=0, logger=None, dir_log=None,
                 verbosity=logging.INFO):
        self.manifest = manifest
        self.seed = int(seed)
        self.arch = ArchSpec.from_dict(manifest.arch)

        # Set up logger if not given as arg
        if logger is not None:
            self.logger = logger
        else:
            self.logger = setup_logger('zooIntrospector', dir_log, verbosity)
        self.logger.info('Logging set up for zooIntrospector object')
        self.logger.debug('Exit:__init__')

    def verifyForward(self, samples=50, permutations=20, inputs=100,
                      tol=FORWARD_TOL):
        """Max |logit difference| over checkpoints x permutations x inputs.

        Returns:
            dict with max_deviation, checks and passed
        """
        self.logger.debug('Entr:verifyForward')
        weights, rows = self.manifest.samples('all')
        if weights.shape[0] == 0:
            raise DataError('zoo %s has no checkpoints' % self.manifest.name)
        rng = rng_stream(self.seed, 'verify-forward')
        picks = rng.choice(weights.shape[0], min(samples, weights.shape[0]),
                           replace=False)
        x = rng.normal(0.0, 1.0, (inputs,) + self.arch.input_shape)
        x = x.astype(np.float32)

        worst = 0.0
        for i in picks:
            arch = self.arch.with_activation(rows[i]['activation'])
            v = WeightVector(weights[i], self.manifest.layout,
                             rows[i]['model_id'], rows[i]['epoch'])
            reference = logits_of(arch, v, x)
            for _ in range(permutations):
                permuted = apply_permutation(
                    v, random_permutations(self.manifest.layout, rng))
                deviation = np.max(np.abs(logits_of(arch, permuted, x)
                                          - reference))
                worst = max(worst, float(deviation))

        self.logger.info('Show:forward_max_deviation=%.3e' % worst)
        self.logger.debug('Exit:verifyForward')
        return {'max_deviation': worst, 'tolerance': tol,
                'checks': int(len(picks) * permutations),
                'passed': worst < tol}

    def verifyBackward(self, epochs=10, ratio=TRAJECTORY_RATIO,
                       acc_tol=ACC_TOL):
        """Train A and its permuted twin B with identical data order.

        Dropout is disabled so both runs see the same computation.

        Returns:
            dict with per-epoch distances, accuracy differences and passed
        """
        self.logger.debug('Entr:verifyBackward')
        train_set, test_set = load_zoo_dataset(self.manifest.dataset)
        base = self.manifest.models[0]['config']
        config = TrainConfig.from_dict(dict(base, epochs=epochs, dropout=0.0,
                                            train_fraction=1.0))
        arch = self.arch.with_activation(config.activation)
        init_a = init_weights(arch, config.init, config.seed)
        perms = non_identity_permutations(
            self.manifest.layout, rng_stream(self.seed, 'verify-backward'))
        init_b = apply_permutation(init_a, perms)

        run_a = train_model(arch, train_set, test_set, config, init=init_a)
        self.logger.info('STATUS UPDATE: backward check is 50% complete.')
        run_b = train_model(arch, train_set, test_set, config, init=init_b)

        rows = trajectory_distances(run_a.checkpoints, run_b.checkpoints,
                                    perms)
        for row, rec_a, rec_b in zip(rows, run_a.records, run_b.records):
            row['acc_diff'] = abs(rec_a.test_acc - rec_b.test_acc)
            self.logger.debug('Show:epoch=%i ratio=%.3e acc_diff=%.4f'
                              % (row['epoch'], row['ratio'], row['acc_diff']))
        passed = len(rows) == epochs and all(
            r['ratio'] < ratio and r['acc_diff'] < acc_tol for r in rows)

        self.logger.info('Show:backward_max_ratio=%.3e'
                         % max([r['ratio'] for r in rows] or [float('nan')]))
        self.logger.debug('Exit:verifyBackward')
        return {'epochs': rows, 'ratio_threshold': ratio,
                'acc_tolerance': acc_tol,
                'permutation': {str(l): p.tolist() for l, p in perms.items()},
                'passed': passed}

    def run(self, samples=50, permutations=20, inputs=100, epochs=10,
            dir_save=None, strict=True):
        """Run both checks; with strict, raise VerificationError on failure."""
        self.logger.debug('Entr:run')
        report = {'zoo': self.manifest.name,
                  'forward': self.verifyForward(samples, permutations, inputs),
                  'backward': self.verifyBackward(epochs)}
        report['passed'] = report['forward']['passed'] and \
            report['backward']['passed']
        if dir_save is not None:
            if not os.path.isdir(dir_save):
                os.makedirs(dir_save)
            with open(os.path.join(dir_save, REPORT_NAME), 'w',
                      encoding='utf-8') as outfile:
                json.dump(report, outfile, indent=2, sort_keys=True)
        self.logger.info('STATUS UPDATE: verification is 100% complete.')
        self.logger.debug('Exit:run')
        if strict and not report['passed']:
            raise VerificationError(
                'permutation equivalence failed: forward max deviation %.3e '
                '(tol %.0e), backward passed=%s'
                % (report['forward']['max_deviation'], FORWARD_TOL,
                   report['backward']['passed']))
        return report
