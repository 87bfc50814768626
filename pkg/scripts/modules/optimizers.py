#!/usr/bin/env python
"""Module for the two parameter update rules used across the project.

Base models and hyper-representation encoders share one optimizer
implementation:
    OptimizerState
    optimizer_step()
    zero_grads()
"""
import numpy as np

from scripts.modules.errors import ConfigError, StateError

OPTIMIZERS = ['adam', 'sgd']


class OptimizerState(object):
    """Hyper-parameters and moment buffers of one optimizer.

    Moment buffers are keyed by the parameter's position in the list passed
    to optimizer_step(), so the same ordered list must be used every step.
    """

    def __init__(self, kind='adam', lr=1e-3, weight_decay=0.0, beta1=0.9,
                 beta2=0.999, eps=1e-8):
        if kind not in OPTIMIZERS:
            raise ConfigError('unknown optimizer %s, expected one of %s'
                              % (kind, OPTIMIZERS))
        if not lr > 0:
            raise ConfigError('learning rate must be positive, got %s' % lr)
        if weight_decay < 0:
            raise ConfigError('weight decay must be >= 0, got %s'
                              % weight_decay)
        self.kind = kind
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self.first_moment = {}
        self.second_moment = {}

    def as_dict(self):
        return {'kind': self.kind, 'lr': self.lr,
                'weight_decay': self.weight_decay, 'beta1': self.beta1,
                'beta2': self.beta2, 'eps': self.eps,
                'step_count': self.step_count}

    @classmethod
    def from_dict(cls, d):
        state = cls(d['kind'], d['lr'], d.get('weight_decay', 0.0),
                    d.get('beta1', 0.9), d.get('beta2', 0.999),
                    d.get('eps', 1e-8))
        state.step_count = int(d.get('step_count', 0))
        return state

    def buffers(self):
        """Return moment buffers as a flat name -> ndarray dict."""
        out = {}
        for i, m in self.first_moment.items():
            out['adam.m.%i' % i] = m
        for i, v in self.second_moment.items():
            out['adam.v.%i' % i] = v
        return out

    def load_buffers(self, arrays):
        for name, arr in arrays.items():
            _, which, index = name.split('.')
            target = self.first_moment if which == 'm' else self.second_moment
            target[int(index)] = np.array(arr)


def optimizer_step(state, params):
    """Apply one update to every parameter in place.

    Weight decay is folded into the gradient (g + wd * p) for both kinds;
    adam then uses bias-corrected first and second moments.

    Args:
        state: OptimizerState, mutated (step_count and moments)
        params: ordered list of Tensors with grad buffers

    Returns:
        params: the same list, updated
    """
    for i, p in enumerate(params):
        if p.grad is None:
            raise StateError('parameter %i of shape %s has no grad'
                             % (i, p.shape))
    state.step_count += 1
    t = state.step_count

    for i, p in enumerate(params):
        g = p.grad + state.weight_decay * p.data
        if state.kind == 'sgd':
            p.data -= (state.lr * g).astype(p.data.dtype)
            continue

        m = state.first_moment.get(i)
        v = state.second_moment.get(i)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        elif m.shape != p.data.shape:
            raise StateError('moment buffer %i has shape %s, parameter %s'
                             % (i, m.shape, p.shape))
        m = state.beta1 * m + (1 - state.beta1) * g
        v = state.beta2 * v + (1 - state.beta2) * g * g
        state.first_moment[i] = m
        state.second_moment[i] = v
        m_hat = m / (1 - state.beta1 ** t)
        v_hat = v / (1 - state.beta2 ** t)
        p.data -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)) \
            .astype(p.data.dtype)
    return params


def zero_grads(params):
    for p in params:
        p.grad = None
