#!/usr/bin/env python
"""Module for the layers of the weight-space transformer.

Parameters are nested dicts of Tensors so that encoders can be flattened
into named arrays for serialization. Functions:
    init_linear() / linear()
    init_attention_block() / attention_block()
    named_parameters()
"""
import numpy as np

from scripts.modules.autodiff import (Tensor, activation, default_dtype,
                                      dropout, layer_norm, matmul, reshape,
                                      softmax, swapaxes, transpose)
from scripts.modules.errors import ConfigError


def init_linear(rng, d_in, d_out, bias=True):
    """Uniform(+-1/sqrt(d_in)) weights W[out, in], zero bias."""
    bound = 1.0 / np.sqrt(d_in)
    params = {'W': Tensor(rng.uniform(-bound, bound, (d_out, d_in)),
                          requires_grad=True)}
    if bias:
        params['b'] = Tensor(np.zeros(d_out), requires_grad=True)
    return params


def linear(x, params):
    """x @ W^T + b over the last axis."""
    out = matmul(x, swapaxes(params['W'], 0, 1))
    if 'b' in params:
        out = out + params['b']
    return out


def init_layer_norm(d):
    return {'g': Tensor(np.ones(d), requires_grad=True),
            'b': Tensor(np.zeros(d), requires_grad=True)}


def init_attention_block(rng, d, heads, ffn_dim):
    """Parameters for one pre-norm self-attention block.

    Raises:
        ConfigError: if d is not divisible by heads
    """
    if d % heads != 0:
        raise ConfigError('token dim %i not divisible by %i heads' % (d, heads))
    return {
        'ln1': init_layer_norm(d),
        'q': init_linear(rng, d, d),
        'k': init_linear(rng, d, d),
        'v': init_linear(rng, d, d),
        'o': init_linear(rng, d, d),
        'ln2': init_layer_norm(d),
        'ff1': init_linear(rng, d, ffn_dim),
        'ff2': init_linear(rng, ffn_dim, d),
    }


def attention_block(x, params, heads, p_drop=0.0, training=False, rng=None):
    """Pre-norm residual block: x + MHSA(LN(x)), then x + FFN(LN(x)).

    Args:
        x: Tensor [s, d] or [batch, s, d]
        params: dict from init_attention_block()
        heads: int head count, must divide d
        p_drop: float dropout rate on both residual branches
        training: bool
        rng: numpy Generator for dropout

    Returns:
        Tensor with the shape of x
    """
    single = x.ndim == 2
    if single:
        x = reshape(x, (1,) + x.shape)
    batch, s, d = x.shape
    if d % heads != 0:
        raise ConfigError('token dim %i not divisible by %i heads' % (d, heads))
    dh = d // heads

    def split_heads(t):
        return transpose(reshape(t, (batch, s, heads, dh)), (0, 2, 1, 3))

    h = layer_norm(x, params['ln1']['g'], params['ln1']['b'])
    q = split_heads(linear(h, params['q']))
    k = split_heads(linear(h, params['k']))
    v = split_heads(linear(h, params['v']))
    scores = matmul(q, swapaxes(k, -1, -2)) * (1.0 / np.sqrt(dh))
    context = matmul(softmax(scores), v)
    context = reshape(transpose(context, (0, 2, 1, 3)), (batch, s, d))
    x = x + dropout(linear(context, params['o']), p_drop, training, rng)

    h = layer_norm(x, params['ln2']['g'], params['ln2']['b'])
    h = linear(activation(linear(h, params['ff1']), 'gelu'), params['ff2'])
    x = x + dropout(h, p_drop, training, rng)

    if single:
        x = reshape(x, (s, d))
    return x


def named_parameters(tree, prefix=''):
    """Flatten a nested dict/list of Tensors into sorted (name, Tensor) pairs."""
    out = []
    if isinstance(tree, Tensor):
        return [(prefix, tree)]
    if isinstance(tree, dict):
        items = sorted(tree.items())
    else:
        items = [(str(i), t) for i, t in enumerate(tree)]
    for key, sub in items:
        name = '%s.%s' % (prefix, key) if prefix else key
        out.extend(named_parameters(sub, name))
    return out


def cast_parameters(tree):
    """Re-create every Tensor in tree in the current default dtype."""
    for _, t in named_parameters(tree):
        t.data = t.data.astype(default_dtype())
    return tree
