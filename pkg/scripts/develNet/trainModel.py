#!/usr/bin/env python
"""Module containing the class that trains hyper-representations of a zoo.

Examples:
    To train an EcD encoder on a generated zoo:
        python -m scripts.hyperZoo train --zoo zoos/ts --out runs/ts-ecd \
            --mode EcD --beta 0.5 --temperature 0.1 --latent 50

"""
import logging
import os

from multiprocessing.pool import ThreadPool

import numpy as np

from scripts.modules.attention import named_parameters
from scripts.modules.augment import augment_once, make_views, \
    sample_permutation_set
from scripts.modules.autodiff import Tensor, getitem
from scripts.modules.errors import BatchError, StateError
from scripts.modules.helperFunctions import rng_stream, setup_logger
from scripts.modules.hyperEncoder import HyperEncoder
from scripts.modules.json2csv import records2csv
from scripts.modules.optimizers import OptimizerState, optimizer_step, \
    zero_grads
from scripts.modules.sslLosses import (combined_loss, contrastive_term,
                                       mse_loss, pooled_r2)

HISTORY_COLUMNS = ['epoch', 'loss', 'loss_mse', 'loss_contrast', 'val_r2',
                   'val_loss', 'temperature']
LAST_CHECKPOINT = 'encoder_last.hzp'
BEST_CHECKPOINT = 'encoder_best.hzp'
FINAL_ENCODER = 'encoder.hzp'
HISTORY_FILE = 'history.csv'
DECODER_KEYS = ['pos_dec', 'dec_blocks', 'dec_ln', 'unembed', 'from_latent',
                'queries', 'dec_layers']
PROJECTION_KEYS = ['proj1', 'proj2']


def reconstruction_r2(encoder, weights):
    """Pooled reconstruction R2 of an [n, N] split under encoder."""
    return pooled_r2(weights, encoder.reconstruct(weights))


class HyperRepTrainer(object):
    """Class for self-supervised training of a HyperEncoder on one zoo.

    Use this class to build augmented batches from the zoo's train split,
    optimize the configured objective with adam, track validation metrics
    every epoch, and keep the best parameters.

    """

    def __init__(
            self, manifest, encoder_config, ssl_config, dir_save=None,
            logger=None, dir_log=None, verbosity=logging.INFO, jobs=1):
        """Load the zoo splits and initialize encoder and optimizer."""
        self.manifest = manifest
        self.ssl = ssl_config
        self.dir_save = dir_save
        if dir_save is not None and not os.path.isdir(dir_save):
            os.makedirs(dir_save)
        self.jobs = max(1, int(jobs))
        self.layout = manifest.layout

        # Set up logger if not given as arg
        if logger is not None:
            self.logger = logger
        else:
            self.logger = setup_logger('hyperRepTrainer', dir_log, verbosity)

        self.encoder = HyperEncoder(encoder_config, self.layout,
                                    seed=ssl_config.seed)
        self.state = OptimizerState('adam', ssl_config.lr,
                                    ssl_config.weight_decay)
        self.perm_set = None
        if ssl_config.augment.permute:
            self.perm_set = sample_permutation_set(
                self.layout, ssl_config.augment.permutation_count,
                ssl_config.seed)

        self.W_train, _ = manifest.samples('train')
        self.W_val, _ = manifest.samples('val')
        if self.W_val.shape[0] == 0:
            self.logger.warning('validation split is empty; selecting on train')
            self.W_val = self.W_train
        self.history = []
        self.best = None  # (epoch, score, parameter arrays)
        self.start_epoch = 1

        self.logger.info('Logging set up for hyperRepTrainer object')
        self.logger.info('Show:mode=%s' % ssl_config.mode)
        self.logger.info('Show:train_samples=%i' % self.W_train.shape[0])
        self.logger.info('Show:encoder_params=%i'
                         % self.encoder.parameter_count())
        self.logger.debug('Exit:__init__')

    def sampleViews(self, weights, sample_ids, epoch, stream='views'):
        """Augmented inputs and reconstruction targets for a batch.

        Contrastive modes return both views stacked, first views then
        second views. Every sample draws from its own (epoch, sample) stream.

        Returns:
            (inputs, targets): float32 ndarrays
        """
        cfg = self.ssl.augment
        contrastive = self.ssl.contrastive()
        if not contrastive and not cfg.any_enabled():
            return weights, weights

        def one(i):
            rng = rng_stream(self.ssl.seed, stream, epoch, int(sample_ids[i]))
            if contrastive:
                return make_views(weights[i], cfg, rng, self.perm_set,
                                  self.layout, with_targets=True)
            return augment_once(weights[i], cfg, rng, self.perm_set,
                                self.layout)

        if self.jobs > 1:
            pool = ThreadPool(self.jobs)
            try:
                drawn = pool.map(one, range(len(sample_ids)))
            finally:
                pool.close()
        else:
            drawn = [one(i) for i in range(len(sample_ids))]

        if contrastive:
            inputs = [d[0][0] for d in drawn] + [d[1][0] for d in drawn]
            targets = [d[0][1] for d in drawn] + [d[1][1] for d in drawn]
        else:
            inputs = [d[0] for d in drawn]
            targets = [d[1] for d in drawn]
        return (np.stack(inputs).astype(np.float32),
                np.stack(targets).astype(np.float32))

    def trainable(self):
        """Encoder parameters the objective reaches, in a fixed order."""
        skip = []
        if not self.ssl.reconstructs():
            skip += DECODER_KEYS
        if not self.ssl.contrastive():
            skip += PROJECTION_KEYS
        return [t for name, t in named_parameters(self.encoder.params)
                if name.split('.')[0] not in skip]

    def lossParts(self, inputs, targets, training, rng=None):
        """Total loss Tensor plus float values of its parts."""
        z = self.encoder.encode(inputs, training, rng)
        mse = contrast = None
        if self.ssl.reconstructs():
            recon = self.encoder.decode(z, training, rng)
            mse = mse_loss(Tensor(targets), recon)
        if self.ssl.contrastive():
            half = inputs.shape[0] // 2
            projected = self.encoder.project(z)
            contrast = contrastive_term(
                self.ssl.mode, getitem(projected, slice(0, half)),
                getitem(projected, slice(half, 2 * half)),
                self.ssl.temperature)
        loss = combined_loss(self.ssl.mode, self.ssl.beta, mse, contrast)
        return (loss, float('nan') if mse is None else mse.item(),
                float('nan') if contrast is None else contrast.item())

    def batches(self, order):
        """Split an index order into batches.

        Contrastive modes fold a trailing single sample into the batch
        before it.

        Raises:
            BatchError: if no batch is usable for the objective
        """
        size = self.ssl.batch_size
        chunks = [order[s:s + size] for s in range(0, len(order), size)]
        if self.ssl.contrastive():
            if len(chunks) > 1 and len(chunks[-1]) < 2:
                chunks = chunks[:-2] + [np.concatenate(chunks[-2:])]
            if not chunks or any(len(c) < 2 for c in chunks):
                raise BatchError('mode %s needs at least 2 samples per batch, '
                                 'got %i samples with batch_size %i'
                                 % (self.ssl.mode, len(order), size))
        elif not chunks:
            raise BatchError('no samples to train on')
        return chunks

    def trainEpoch(self, epoch):
        """One pass over the train split; returns sample-weighted loss parts."""
        self.logger.debug('Entr:trainEpoch')
        n = self.W_train.shape[0]
        order = rng_stream(self.ssl.seed, 'hyper-data', epoch).permutation(n)
        drop_rng = rng_stream(self.ssl.seed, 'hyper-dropout', epoch)
        params = self.trainable()
        sums, seen = np.zeros(3), 0
        for b, idx in enumerate(self.batches(order)):
            inputs, targets = self.sampleViews(self.W_train[idx], idx, epoch)
            loss, mse, contrast = self.lossParts(inputs, targets, True,
                                                 drop_rng)
            if not np.isfinite(loss.item()):
                raise StateError('non-finite loss in epoch %i at batch %i '
                                 '(mse=%s, contrast=%s); last good state kept '
                                 'in %s' % (epoch, b, mse, contrast,
                                            LAST_CHECKPOINT))
            loss.backward()
            optimizer_step(self.state, params)
            zero_grads(params)
            sums += np.array([loss.item(), mse, contrast]) * len(idx)
            seen += len(idx)
        self.logger.debug('Exit:trainEpoch')
        return sums / seen

    def validate(self):
        """Validation reconstruction R2 and total loss in eval mode.

        Views use fixed streams so the loss is comparable across epochs.
        """
        val_r2 = float('nan')
        if self.ssl.reconstructs():
            val_r2 = reconstruction_r2(self.encoder, self.W_val)
        losses = []
        n = self.W_val.shape[0]
        if n < 2 and self.ssl.contrastive():
            return val_r2, float('nan')
        for ids in self.batches(np.arange(n)):
            inputs, targets = self.sampleViews(self.W_val[ids], ids, 0,
                                               stream='val-views')
            losses.append(self.lossParts(inputs, targets, False)[0].item()
                          * len(ids))
        val_loss = float(np.sum(losses) / n) if losses else float('nan')
        return val_r2, val_loss

    def score(self, row):
        if self.ssl.reconstructs():
            return row['val_r2']
        return -row['val_loss']

    def snapshot(self):
        return [t.data.copy() for t in self.encoder.parameters()]

    def restore(self, arrays):
        for t, data in zip(self.encoder.parameters(), arrays):
            t.data = data.copy()

    def saveCheckpoint(self, epoch):
        if self.dir_save is None:
            return
        extra = {'epoch': epoch, 'history': self.history,
                 'best_epoch': self.best[0], 'best_score': self.best[1],
                 'ssl': self.ssl.as_dict()}
        self.encoder.save(os.path.join(self.dir_save, LAST_CHECKPOINT),
                          self.state, extra)
        if self.best[0] == epoch:
            self.encoder.save(os.path.join(self.dir_save, BEST_CHECKPOINT),
                              extra={'epoch': epoch})

    def resume(self):
        """Continue from encoder_last.hzp in dir_save; True if resumed."""
        self.logger.debug('Entr:resume')
        path = os.path.join(self.dir_save or '', LAST_CHECKPOINT)
        if not os.path.isfile(path):
            self.logger.info('no checkpoint at %s, starting fresh' % path)
            return False
        encoder, state, extra = HyperEncoder.load(path)
        best_encoder, _, _ = HyperEncoder.load(
            os.path.join(self.dir_save, BEST_CHECKPOINT))
        self.encoder, self.state = encoder, state
        self.history = extra['history']
        self.best = (extra['best_epoch'], extra['best_score'],
                     [t.data.copy() for t in best_encoder.parameters()])
        self.start_epoch = extra['epoch'] + 1
        self.logger.info('Show:resumed_epoch=%i' % extra['epoch'])
        self.logger.debug('Exit:resume')
        return True

    def run(self, resume=False):
        """Train for ssl.epochs and return (encoder with best params, history)."""
        self.logger.debug('Entr:run')
        if resume:
            self.resume()

        progress = []  # Store progress shown to avoid rounding duplicates
        for epoch in range(self.start_epoch, self.ssl.epochs + 1):
            loss, mse, contrast = self.trainEpoch(epoch)
            val_r2, val_loss = self.validate()
            row = {'epoch': epoch, 'loss': float(loss),
                   'loss_mse': float(mse), 'loss_contrast': float(contrast),
                   'val_r2': val_r2, 'val_loss': val_loss,
                   'temperature': self.ssl.temperature}
            self.history.append(row)

            score = self.score(row)
            if self.best is None or (np.isfinite(score) and
                                     not score <= self.best[1]):
                self.best = (epoch, float(score), self.snapshot())
            self.saveCheckpoint(epoch)

            self.logger.debug('Show:epoch=%i loss=%.5f val_r2=%.4f'
                              % (epoch, loss, val_r2))
            percent = int(100 * epoch / self.ssl.epochs)
            if percent % 10 == 0 and percent not in progress:
                progress.append(percent)
                self.logger.info('STATUS UPDATE: training is %i%% complete.'
                                 % percent)

        if self.best is not None:
            self.restore(self.best[2])
            self.logger.info('Show:best_epoch=%i' % self.best[0])
        if self.dir_save is not None:
            self.encoder.save(os.path.join(self.dir_save, FINAL_ENCODER),
                              extra={'ssl': self.ssl.as_dict(),
                                     'best_epoch': self.best[0],
                                     'zoo': self.manifest.name})
            records2csv(self.history, os.path.join(self.dir_save, HISTORY_FILE),
                        HISTORY_COLUMNS)
        self.logger.debug('Exit:run')
        return self.encoder, self.history
