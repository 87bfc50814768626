#!/usr/bin/env python
"""Module for the self-supervised objectives of hyper-representation training.

    ED     reconstruction only
    Ec     contrastive only (NT-Xent)
    EcD    beta * reconstruction + (1 - beta) * NT-Xent
    Ec+D   beta * reconstruction + (1 - beta) * positive-only contrast
"""
import logging

import numpy as np

from scripts.modules.augment import AugmentConfig
from scripts.modules.autodiff import (as_tensor, concat, getitem,
                                      log_softmax, matmul, mean, swapaxes,
                                      tsum)
from scripts.modules.errors import BatchError, ConfigError, DataError, \
    DimensionError

MODES = ['ED', 'Ec', 'EcD', 'Ec+D']
SELF_MASK = -1e9

logger = logging.getLogger(__name__)


class SSLConfig(object):
    """Objective and optimizer settings of one training run."""

    def __init__(self, mode='EcD', beta=0.5, temperature=0.1, batch_size=500,
                 epochs=2500, lr=1e-4, weight_decay=1e-9, seed=0,
                 augment=None):
        self.mode = mode
        self.beta = float(beta)
        self.temperature = float(temperature)
        self.batch_size = int(batch_size)
        self.epochs = int(epochs)
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)
        self.seed = int(seed)
        self.augment = augment if augment is not None else AugmentConfig()
        self.validate()

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError('unknown mode %s, expected one of %s'
                              % (self.mode, MODES))
        if self.mode in ['EcD', 'Ec+D'] and not 0 < self.beta < 1:
            raise ConfigError('mode %s needs 0 < beta < 1, got %s'
                              % (self.mode, self.beta))
        if not self.temperature > 0:
            raise ConfigError('temperature must be positive')
        if self.mode != 'ED' and not self.augment.any_enabled():
            raise ConfigError('mode %s needs at least one augmentation'
                              % self.mode)
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError('epochs and batch_size must be >= 1')
        if not self.lr > 0:
            raise ConfigError('lr must be positive')

    def contrastive(self):
        return self.mode != 'ED'

    def reconstructs(self):
        return self.mode != 'Ec'

    def as_dict(self):
        return {'mode': self.mode, 'beta': self.beta,
                'temperature': self.temperature,
                'batch_size': self.batch_size, 'epochs': self.epochs,
                'lr': self.lr, 'weight_decay': self.weight_decay,
                'seed': self.seed, 'augment': self.augment.as_dict()}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        augment = AugmentConfig.from_dict(d.pop('augment', {}))
        keys = ['mode', 'beta', 'temperature', 'batch_size', 'epochs', 'lr',
                'weight_decay', 'seed']
        return cls(augment=augment, **{k: v for k, v in d.items() if k in keys})


def mse_loss(v, v_hat):
    """Mean over samples of the per-sample sum of squared errors."""
    v, v_hat = as_tensor(v), as_tensor(v_hat)
    if v.shape != v_hat.shape:
        raise DimensionError('mse of shapes %s and %s' % (v.shape, v_hat.shape))
    diff = v_hat - v
    return mean(tsum(diff * diff, axis=-1))


def ntxent_loss(z_i, z_j, temperature):
    """NT-Xent over 2M unit-norm embeddings.

    Rows r and r + M are the two views of sample r. Each row's softmax runs
    over every other row, the row itself excluded.

    Raises:
        BatchError: if M < 2
    """
    z_i, z_j = as_tensor(z_i), as_tensor(z_j)
    m = z_i.shape[0]
    if m < 2:
        raise BatchError('NT-Xent needs at least 2 samples per batch, got %i'
                         % m)
    if z_j.shape != z_i.shape:
        raise DimensionError('view shapes %s and %s' % (z_i.shape, z_j.shape))
    z = concat([z_i, z_j], axis=0)
    logits = matmul(z, swapaxes(z, 0, 1)) * (1.0 / temperature)
    logits = logits + np.eye(2 * m) * SELF_MASK
    logp = log_softmax(logits)
    rows = np.arange(2 * m)
    return -mean(getitem(logp, (rows, (rows + m) % (2 * m))))


def positive_contrast_loss(z_i, z_j, temperature):
    """mean(-cos(z_i, z_j)) + log T; no negatives."""
    z_i, z_j = as_tensor(z_i), as_tensor(z_j)
    if z_j.shape != z_i.shape:
        raise DimensionError('view shapes %s and %s' % (z_i.shape, z_j.shape))
    return -mean(tsum(z_i * z_j, axis=-1)) + float(np.log(temperature))


def contrastive_term(mode, z_i, z_j, temperature):
    if mode == 'Ec+D':
        return positive_contrast_loss(z_i, z_j, temperature)
    return ntxent_loss(z_i, z_j, temperature)


def combined_loss(mode, beta, mse=None, contrast=None):
    """Mix the loss parts the mode asks for.

    Raises:
        ConfigError: if a part the mode needs is missing
    """
    if mode not in MODES:
        raise ConfigError('unknown mode %s' % mode)
    if mode in ['ED', 'EcD', 'Ec+D'] and mse is None:
        raise ConfigError('mode %s needs a reconstruction term' % mode)
    if mode in ['Ec', 'EcD', 'Ec+D'] and contrast is None:
        raise ConfigError('mode %s needs a contrastive term' % mode)
    if mode == 'ED':
        return mse
    if mode == 'Ec':
        return contrast
    return mse * beta + contrast * (1.0 - beta)


def pooled_r2(weights, reconstructed):
    """1 - sum ||w - w_hat||^2 / sum ||w - w_mean||^2 over a split.

    Raises:
        DataError: on an empty split
    """
    weights = np.asarray(weights, dtype=np.float64)
    reconstructed = np.asarray(reconstructed, dtype=np.float64)
    if weights.shape[0] == 0:
        raise DataError('reconstruction R2 of an empty split')
    if weights.shape != reconstructed.shape:
        raise DimensionError('weights %s vs reconstruction %s'
                             % (weights.shape, reconstructed.shape))
    residual = np.sum((weights - reconstructed) ** 2)
    total = np.sum((weights - weights.mean(axis=0)) ** 2)
    if total == 0:
        logger.warning('reconstruction R2 undefined for a constant split')
        return float('nan')
    return float(1.0 - residual / total)
