#!/usr/bin/env python
"""Module for the base models that populate a zoo.

    ArchSpec, build_ffn_tetris(), build_cnn_mnist()
    TrainConfig, EpochRecord, TrainResult
    init_weights(), forward(), evaluate_model(), train_model()
"""
import copy

import numpy as np

from scripts.modules.autodiff import (Tensor, activation, as_tensor, conv2d,
                                      dropout, flatten, matmul, maxpool2d,
                                      softmax_cross_entropy, swapaxes,
                                      ACTIVATIONS)
from scripts.modules.datasets import split_dataset
from scripts.modules.errors import ConfigError, DataError
from scripts.modules.helperFunctions import rng_stream
from scripts.modules.optimizers import (OPTIMIZERS, OptimizerState,
                                        optimizer_step, zero_grads)
from scripts.modules.zooStore import LayerLayout, devectorize, vectorize

INIT_METHODS = ['uniform', 'normal', 'kaiming_uniform', 'kaiming_normal',
                'xavier_uniform', 'xavier_normal']
SMALL_INIT_SCALE = 0.1


class ArchSpec(object):
    """Ordered layer descriptors of one base-model architecture.

    Descriptors are dicts:
        {'kind': 'dense', 'in': int, 'out': int, 'bias': bool}
        {'kind': 'conv', 'c_in': int, 'c_out': int, 'ks': int, 'bias': bool}
        {'kind': 'maxpool', 'ks': int}
        {'kind': 'flatten'}
        {'kind': 'activation', 'act': str}
    Shapes are chained from input_shape at construction.
    """

    def __init__(self, layers, input_shape, name=''):
        self.layers = [dict(l) for l in layers]
        self.input_shape = tuple(input_shape)
        self.name = name
        self.shapes = self._chain()

    def _chain(self):
        shape = self.input_shape
        shapes = []
        for i, layer in enumerate(self.layers):
            kind = layer['kind']
            if kind == 'dense':
                if len(shape) != 1 or shape[0] != layer['in']:
                    raise ConfigError('layer %i dense(%i, %i) after shape %s'
                                      % (i, layer['in'], layer['out'], shape))
                shape = (layer['out'],)
            elif kind == 'conv':
                if len(shape) != 3 or shape[0] != layer['c_in'] \
                        or min(shape[1:]) < layer['ks']:
                    raise ConfigError('layer %i conv(%i, %i, %i) after shape %s'
                                      % (i, layer['c_in'], layer['c_out'],
                                         layer['ks'], shape))
                shape = (layer['c_out'], shape[1] - layer['ks'] + 1,
                         shape[2] - layer['ks'] + 1)
            elif kind == 'maxpool':
                if len(shape) != 3 or min(shape[1:]) < layer['ks']:
                    raise ConfigError('layer %i maxpool(%i) after shape %s'
                                      % (i, layer['ks'], shape))
                shape = (shape[0], shape[1] // layer['ks'],
                         shape[2] // layer['ks'])
            elif kind == 'flatten':
                shape = (int(np.prod(shape)),)
            elif kind == 'activation':
                if layer['act'] not in ACTIVATIONS:
                    raise ConfigError('unknown activation %s' % layer['act'])
            else:
                raise ConfigError('unknown layer kind %s' % kind)
            shapes.append(shape)
        return shapes

    def param_layers(self):
        return [l for l in self.layers if l['kind'] in ['dense', 'conv']]

    def layer_param_counts(self):
        counts = []
        for l in self.param_layers():
            if l['kind'] == 'dense':
                counts.append(l['in'] * l['out'] + (l['out'] if l['bias'] else 0))
            else:
                counts.append(l['c_in'] * l['c_out'] * l['ks'] ** 2
                              + (l['c_out'] if l['bias'] else 0))
        return counts

    def param_count(self):
        return sum(self.layer_param_counts())

    def output_width(self):
        return self.shapes[-1][0]

    def layout(self):
        described = []
        for l in self.param_layers():
            if l['kind'] == 'dense':
                described.append({'kind': 'dense',
                                  'weight_shape': [l['out'], l['in']],
                                  'bias': l['out'] if l['bias'] else 0})
            else:
                described.append({'kind': 'conv',
                                  'weight_shape': [l['c_out'], l['c_in'],
                                                   l['ks'], l['ks']],
                                  'bias': l['c_out'] if l['bias'] else 0})
        return LayerLayout(described)

    def with_activation(self, kind):
        """Copy with every activation layer replaced by kind."""
        layers = copy.deepcopy(self.layers)
        for l in layers:
            if l['kind'] == 'activation':
                l['act'] = kind
        return ArchSpec(layers, self.input_shape, self.name)

    def as_dict(self):
        return {'name': self.name, 'input_shape': list(self.input_shape),
                'layers': self.layers}

    @classmethod
    def from_dict(cls, d):
        return cls(d['layers'], d['input_shape'], d.get('name', ''))


def build_ffn_tetris(act='tanh', bias=False):
    """dense(16, 5) + act + dense(5, 4); N = 100 without biases, 109 with."""
    arch = ArchSpec([
        {'kind': 'flatten'},
        {'kind': 'dense', 'in': 16, 'out': 5, 'bias': bias},
        {'kind': 'activation', 'act': act},
        {'kind': 'dense', 'in': 5, 'out': 4, 'bias': bias},
    ], (1, 4, 4), 'ffn_tetris')
    expected = 109 if bias else 100
    if arch.param_count() != expected:
        raise ConfigError('tetris FFN has %i parameters, expected %i'
                          % (arch.param_count(), expected))
    return arch


def build_cnn_mnist(act='tanh'):
    """Three conv blocks, two dense layers; 2464 parameters.

    28 -> conv5 24 -> pool 12 -> conv5 8 -> pool 4 -> conv2 3, so the last
    block is unpooled and the flatten width is 4 * 3 * 3 = 36.
    """
    arch = ArchSpec([
        {'kind': 'conv', 'c_in': 1, 'c_out': 8, 'ks': 5, 'bias': True},
        {'kind': 'maxpool', 'ks': 2},
        {'kind': 'activation', 'act': act},
        {'kind': 'conv', 'c_in': 8, 'c_out': 6, 'ks': 5, 'bias': True},
        {'kind': 'maxpool', 'ks': 2},
        {'kind': 'activation', 'act': act},
        {'kind': 'conv', 'c_in': 6, 'c_out': 4, 'ks': 2, 'bias': True},
        {'kind': 'activation', 'act': act},
        {'kind': 'flatten'},
        {'kind': 'dense', 'in': 36, 'out': 20, 'bias': True},
        {'kind': 'activation', 'act': act},
        {'kind': 'dense', 'in': 20, 'out': 10, 'bias': True},
    ], (1, 28, 28), 'cnn_mnist')
    if arch.param_count() != 2464:
        raise ConfigError('MNIST CNN has %i parameters, expected 2464'
                          % arch.param_count())
    return arch


def _fans(shape):
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    return shape[1] * receptive, shape[0] * receptive


def init_weights(arch, method, seed):
    """Draw initial weights.

    uniform(-0.1, 0.1) and normal(0, 0.1) draw weights and biases; the
    xavier/kaiming families scale by fan-in (and fan-out) and zero biases.

    Returns:
        WeightVector with epoch 0
    """
    if method not in INIT_METHODS:
        raise ConfigError('unknown init %s, expected one of %s'
                          % (method, INIT_METHODS))
    rng = rng_stream(seed, 'init')
    layout = arch.layout()
    tensors = []
    for layer in layout.layers:
        shape = layer['weight_shape']
        fan_in, fan_out = _fans(shape)
        n_bias = layer['bias']
        b = np.zeros(n_bias) if n_bias else None
        if method == 'uniform':
            w = rng.uniform(-SMALL_INIT_SCALE, SMALL_INIT_SCALE, shape)
            if n_bias:
                b = rng.uniform(-SMALL_INIT_SCALE, SMALL_INIT_SCALE, n_bias)
        elif method == 'normal':
            w = rng.normal(0.0, SMALL_INIT_SCALE, shape)
            if n_bias:
                b = rng.normal(0.0, SMALL_INIT_SCALE, n_bias)
        elif method == 'xavier_uniform':
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-bound, bound, shape)
        elif method == 'xavier_normal':
            w = rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), shape)
        elif method == 'kaiming_uniform':
            bound = np.sqrt(6.0 / fan_in)
            w = rng.uniform(-bound, bound, shape)
        else:
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)
        tensors.append((w, b))
    return vectorize(tensors, layout, epoch=0)


def to_parameters(v, requires_grad=True):
    """WeightVector -> list of (W, b) Tensors for forward()."""
    return [(Tensor(w, requires_grad=requires_grad),
             None if b is None else Tensor(b, requires_grad=requires_grad))
            for w, b in devectorize(v)]


def flat_parameters(params):
    return [t for pair in params for t in pair if t is not None]


def forward(arch, params, x, training=False, p_drop=0.0, rng=None):
    """Logits of a batch.

    Args:
        arch: ArchSpec
        params: list of (W, b) Tensors in parameter-layer order
        x: Tensor or ndarray [n, c, h, w]
        training: bool, enables dropout on dense inputs
        p_drop: float dropout rate
        rng: numpy Generator for dropout masks

    Returns:
        logits: Tensor [n, classes]
    """
    h = as_tensor(x)
    layer_idx = 0
    for layer in arch.layers:
        kind = layer['kind']
        if kind == 'dense':
            w, b = params[layer_idx]
            layer_idx += 1
            h = dropout(h, p_drop, training, rng)
            h = matmul(h, swapaxes(w, 0, 1))
            if b is not None:
                h = h + b
        elif kind == 'conv':
            w, b = params[layer_idx]
            layer_idx += 1
            h = conv2d(h, w, b)
        elif kind == 'maxpool':
            h = maxpool2d(h, layer['ks'])
        elif kind == 'flatten':
            h = flatten(h)
        else:
            h = activation(h, layer['act'])
    return h


def logits_of(arch, v, images):
    """Eval-mode logits of a WeightVector as an ndarray."""
    return forward(arch, to_parameters(v, requires_grad=False), images).data


def per_class_f1(predictions, labels, class_count):
    """One-vs-rest F1 per class; 0/0 counts as 0."""
    scores = []
    for c in range(class_count):
        tp = np.sum((predictions == c) & (labels == c))
        fp = np.sum((predictions == c) & (labels != c))
        fn = np.sum((predictions != c) & (labels == c))
        denom = 2 * tp + fp + fn
        scores.append(float(2 * tp) / denom if denom else 0.0)
    return scores


def evaluate_model(arch, v, dataset, batch_size=1024):
    """Accuracy, per-class F1 and mean cross-entropy of a checkpoint."""
    if len(dataset) == 0:
        raise DataError('cannot evaluate on empty dataset %s' % dataset.name)
    params = to_parameters(v, requires_grad=False)
    predictions, losses = [], []
    for start in range(0, len(dataset), batch_size):
        images = dataset.images[start:start + batch_size]
        labels = dataset.labels[start:start + batch_size]
        logits = forward(arch, params, images)
        predictions.append(logits.data.argmax(axis=1))
        losses.append(softmax_cross_entropy(logits, labels).item()
                      * len(labels))
    predictions = np.concatenate(predictions)
    return {'acc': float(np.mean(predictions == dataset.labels)),
            'per_class_f1': per_class_f1(predictions, dataset.labels,
                                         dataset.class_count),
            'loss': float(np.sum(losses) / len(dataset))}


class TrainConfig(object):
    """Generating factors of one base model."""

    def __init__(self, seed=1, init='uniform', activation='tanh',
                 optimizer='adam', lr=3e-5, l2_reg=0.0, dropout=0.0,
                 train_fraction=1.0, epochs=25, batch_size=32):
        self.seed = int(seed)
        self.init = init
        self.activation = activation
        self.optimizer = optimizer
        self.lr = float(lr)
        self.l2_reg = float(l2_reg)
        self.dropout = float(dropout)
        self.train_fraction = float(train_fraction)
        self.epochs = int(epochs)
        self.batch_size = int(batch_size)
        self.validate()

    def validate(self):
        if self.init not in INIT_METHODS:
            raise ConfigError('unknown init %s' % self.init)
        if self.activation not in ACTIVATIONS:
            raise ConfigError('unknown activation %s' % self.activation)
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError('unknown optimizer %s' % self.optimizer)
        if not self.lr > 0:
            raise ConfigError('lr must be positive, got %s' % self.lr)
        if self.epochs < 1:
            raise ConfigError('epochs must be >= 1, got %i' % self.epochs)
        if not 0 < self.train_fraction <= 1:
            raise ConfigError('train_fraction %s outside (0, 1]'
                              % self.train_fraction)
        if not 0 <= self.dropout < 1:
            raise ConfigError('dropout %s outside [0, 1)' % self.dropout)
        if self.batch_size < 1:
            raise ConfigError('batch_size must be >= 1')

    def as_dict(self):
        return {'seed': self.seed, 'init': self.init,
                'activation': self.activation, 'optimizer': self.optimizer,
                'lr': self.lr, 'l2_reg': self.l2_reg, 'dropout': self.dropout,
                'train_fraction': self.train_fraction, 'epochs': self.epochs,
                'batch_size': self.batch_size}

    @classmethod
    def from_dict(cls, d):
        keys = cls().as_dict().keys()
        return cls(**{k: v for k, v in d.items() if k in keys})


class EpochRecord(object):
    """Metrics of one model after one epoch; ggap is train_acc - test_acc."""

    def __init__(self, epoch, train_acc, test_acc, per_class_f1, train_loss):
        self.epoch = int(epoch)
        self.train_acc = float(train_acc)
        self.test_acc = float(test_acc)
        self.ggap = self.train_acc - self.test_acc
        self.per_class_f1 = [float(f) for f in per_class_f1]
        self.train_loss = float(train_loss)

    def as_dict(self):
        return {'epoch': self.epoch, 'train_acc': self.train_acc,
                'test_acc': self.test_acc, 'ggap': self.ggap,
                'per_class_f1': self.per_class_f1,
                'train_loss': self.train_loss}


class TrainResult(object):
    """Records and checkpoints of one training run; crashed holds a reason."""

    def __init__(self, records, checkpoints, crashed=None):
        self.records = records
        self.checkpoints = checkpoints
        self.crashed = crashed


def train_model(arch, train_set, test_set, config, init=None):
    """Train one base model and checkpoint it after every epoch.

    Minibatches are drawn from a per-epoch shuffle keyed by config.seed, so
    two runs with the same seed see identical data order whatever their
    initial weights.

    Args:
        arch: ArchSpec; its activations are replaced by config.activation
        train_set: ImageDataset, subsampled by config.train_fraction
        test_set: ImageDataset
        config: TrainConfig
        init: optional WeightVector to start from instead of init_weights()

    Returns:
        TrainResult; crashed is set on a non-finite loss or when the final
        train accuracy stays below chance minus 0.05
    """
    arch = arch.with_activation(config.activation)
    layout = arch.layout()
    if train_set.class_count != arch.output_width():
        raise ConfigError('dataset has %i classes, model outputs %i'
                          % (train_set.class_count, arch.output_width()))
    if config.train_fraction < 1:
        train_set = split_dataset(train_set, config.train_fraction,
                                  config.seed)[0]
    train_set.check_coverage()

    v = init if init is not None else init_weights(arch, config.init,
                                                   config.seed)
    params = to_parameters(v)
    flat = flat_parameters(params)
    state = OptimizerState(config.optimizer, config.lr,
                           weight_decay=config.l2_reg)

    records, checkpoints = [], []
    n = len(train_set)
    for epoch in range(1, config.epochs + 1):
        order = rng_stream(config.seed, 'data', epoch).permutation(n)
        drop_rng = rng_stream(config.seed, 'dropout', epoch)
        batch_losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            logits = forward(arch, params, train_set.images[idx],
                             training=True, p_drop=config.dropout,
                             rng=drop_rng)
            loss = softmax_cross_entropy(logits, train_set.labels[idx])
            if not np.isfinite(loss.data):
                return TrainResult(records, checkpoints,
                                   'non-finite loss in epoch %i' % epoch)
            loss.backward()
            optimizer_step(state, flat)
            zero_grads(flat)
            batch_losses.append(loss.item())

        checkpoint = vectorize([(w.data, None if b is None else b.data)
                                for w, b in params], layout, epoch=epoch)
        train_eval = evaluate_model(arch, checkpoint, train_set)
        test_eval = evaluate_model(arch, checkpoint, test_set)
        records.append(EpochRecord(epoch, train_eval['acc'], test_eval['acc'],
                                   test_eval['per_class_f1'],
                                   float(np.mean(batch_losses))))
        checkpoints.append(checkpoint)

    if records[-1].train_acc < 1.0 / train_set.class_count - 0.05:
        return TrainResult(records, checkpoints,
                           'final train accuracy %.3f below chance'
                           % records[-1].train_acc)
    return TrainResult(records, checkpoints)
