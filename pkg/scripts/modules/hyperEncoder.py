#!/usr/bin/env python
"""Module for hyper-representation encoders.

A HyperEncoder maps flat weight vectors [batch, N] to latent codes
[batch, L] and back. Two architectures are available:

    transformer  tokens -> self-attention blocks -> latent, mirrored decoder
    ffn          dense stack with widths interpolated from N to L

Tokenization is per weight (one scalar per token) or per neuron (one
unit's incoming weights and bias per token, zero-padded to the longest
slice). With a compression token only that token's output feeds the
latent map; otherwise all token outputs are concatenated.
"""

from collections import OrderedDict

import numpy as np

from scripts.modules.attention import (attention_block, init_attention_block,
                                       init_layer_norm, init_linear, linear,
                                       named_parameters)
from scripts.modules.autodiff import (Tensor, activation, concat, dropout,
                                      getitem, l2_normalize, layer_norm,
                                      reshape)
from scripts.modules.errors import ConfigError, LayoutError
from scripts.modules.helperFunctions import rng_stream
from scripts.modules.optimizers import OptimizerState
from scripts.modules.zooStore import LayerLayout, load_params, save_params

TOKENIZATIONS = ['per_weight', 'per_neuron']
ARCHITECTURES = ['transformer', 'ffn']
POSITION_INIT_STD = 0.02


class EncoderConfig(object):
    """Shape and regularization of a HyperEncoder."""

    def __init__(self, tokenization='per_neuron', use_compression_token=True,
                 blocks=2, heads=1, token_dim=128, ffn_dim=512, latent_dim=50,
                 input_dim=None, dropout=0.1, projection_dim=64,
                 architecture='transformer', ffn_layers=3,
                 per_weight_limit=4096):
        self.tokenization = tokenization
        self.use_compression_token = bool(use_compression_token)
        self.blocks = int(blocks)
        self.heads = int(heads)
        self.token_dim = int(token_dim)
        self.ffn_dim = int(ffn_dim)
        self.latent_dim = int(latent_dim)
        self.input_dim = None if input_dim is None else int(input_dim)
        self.dropout = float(dropout)
        self.projection_dim = int(projection_dim)
        self.architecture = architecture
        self.ffn_layers = int(ffn_layers)
        self.per_weight_limit = int(per_weight_limit)
        self.validate()

    def validate(self):
        if self.tokenization not in TOKENIZATIONS:
            raise ConfigError('unknown tokenization %s, expected one of %s'
                              % (self.tokenization, TOKENIZATIONS))
        if self.architecture not in ARCHITECTURES:
            raise ConfigError('unknown encoder architecture %s'
                              % self.architecture)
        if self.heads < 1 or self.token_dim % self.heads != 0:
            raise ConfigError('token_dim %i not divisible by %i heads'
                              % (self.token_dim, self.heads))
        if self.latent_dim < 1:
            raise ConfigError('latent_dim must be >= 1')
        if self.input_dim is not None and not self.latent_dim < self.input_dim:
            raise ConfigError('latent_dim %i must be smaller than N=%i'
                              % (self.latent_dim, self.input_dim))
        if not 0 <= self.dropout < 1:
            raise ConfigError('dropout %s outside [0, 1)' % self.dropout)
        if self.blocks < 1 or self.ffn_layers < 1:
            raise ConfigError('blocks and ffn_layers must be >= 1')

    def compression_ratio(self):
        return float(self.input_dim) / self.latent_dim

    def as_dict(self):
        return {'tokenization': self.tokenization,
                'use_compression_token': self.use_compression_token,
                'blocks': self.blocks, 'heads': self.heads,
                'token_dim': self.token_dim, 'ffn_dim': self.ffn_dim,
                'latent_dim': self.latent_dim, 'input_dim': self.input_dim,
                'dropout': self.dropout,
                'projection_dim': self.projection_dim,
                'architecture': self.architecture,
                'ffn_layers': self.ffn_layers,
                'per_weight_limit': self.per_weight_limit}

    @classmethod
    def from_dict(cls, d):
        keys = cls().as_dict().keys()
        return cls(**{k: v for k, v in d.items() if k in keys})


class HyperRep(object):
    """Latent code z of one checkpoint."""

    def __init__(self, z, model_id=-1, epoch=-1):
        self.z = np.asarray(z, dtype=np.float32)
        if not np.isfinite(self.z).all():
            raise ValueError('hyper-representation has non-finite entries')
        self.model_id = int(model_id)
        self.epoch = int(epoch)


def tokenize_per_weight(data, layout):
    """[batch, N] -> [batch, N, 1] raw tokens, one scalar each."""
    data = np.asarray(data)
    if data.shape[-1] != layout.N:
        raise LayoutError('vectors of length %i for N=%i'
                          % (data.shape[-1], layout.N))
    return data.reshape(-1, layout.N, 1)


def neuron_gather_index(layout):
    """Gather indices [tokens, max_slice] into a vector with a trailing zero.

    Padding positions point at index N, the appended zero.
    """
    slices = [row for s in layout.all_neuron_slices() for row in s]
    width = max(len(row) for row in slices)
    index = np.full((len(slices), width), layout.N, dtype=np.int64)
    for t, row in enumerate(slices):
        index[t, :len(row)] = row
    return index


def tokenize_per_neuron(data, layout, index=None):
    """[batch, N] -> [batch, units, max_slice] zero-padded neuron tokens."""
    data = np.asarray(data)
    if data.shape[-1] != layout.N:
        raise LayoutError('vectors of length %i for N=%i'
                          % (data.shape[-1], layout.N))
    index = neuron_gather_index(layout) if index is None else index
    data = data.reshape(-1, layout.N)
    padded = np.concatenate([data, np.zeros((data.shape[0], 1), data.dtype)],
                            axis=1)
    return padded[:, index]


class HyperEncoder(object):
    """Encoder, decoder and projection head for one LayerLayout.

    Attributes:
        config: EncoderConfig with input_dim set to layout.N
        layout: LayerLayout
        params: nested dict of Tensors
    """

    def __init__(self, config, layout, seed=0):
        if config.input_dim is None:
            config = EncoderConfig.from_dict(dict(config.as_dict(),
                                                  input_dim=layout.N))
        if config.input_dim != layout.N:
            raise LayoutError('encoder built for N=%i, layout has N=%i'
                              % (config.input_dim, layout.N))
        if config.architecture == 'transformer' \
                and config.tokenization == 'per_weight' \
                and layout.N > config.per_weight_limit:
            raise ConfigError('per_weight tokenization of %i weights exceeds '
                              'the limit of %i' % (layout.N,
                                                   config.per_weight_limit))
        self.config = config
        self.layout = layout
        self.seed = int(seed)

        if config.tokenization == 'per_neuron':
            self.gather_index = neuron_gather_index(layout)
            self.seq_len, self.slice_len = self.gather_index.shape
            flat = self.gather_index.reshape(-1)
            scatter = np.empty(layout.N, dtype=np.int64)
            real = flat < layout.N
            scatter[flat[real]] = np.flatnonzero(real)
            self.scatter_index = scatter
        else:
            self.gather_index = None
            self.seq_len, self.slice_len = layout.N, 1
            self.scatter_index = np.arange(layout.N)

        rng = rng_stream(seed, 'encoder-init')
        if config.architecture == 'transformer':
            self.params = self._init_transformer(rng)
        else:
            self.params = self._init_ffn(rng)
        self.params['proj1'] = init_linear(rng, config.latent_dim,
                                           config.token_dim)
        self.params['proj2'] = init_linear(rng, config.token_dim,
                                           config.projection_dim)

    def _init_transformer(self, rng):
        cfg = self.config
        d, s = cfg.token_dim, self.seq_len
        extra = 1 if cfg.use_compression_token else 0

        def position(rows):
            return Tensor(rng.normal(0.0, POSITION_INIT_STD, (rows, d)),
                          requires_grad=True)

        params = {
            'embed': init_linear(rng, self.slice_len, d),
            'pos_enc': position(s + extra),
            'enc_blocks': [init_attention_block(rng, d, cfg.heads, cfg.ffn_dim)
                           for _ in range(cfg.blocks)],
            'enc_ln': init_layer_norm(d),
            'pos_dec': position(s),
            'dec_blocks': [init_attention_block(rng, d, cfg.heads, cfg.ffn_dim)
                           for _ in range(cfg.blocks)],
            'dec_ln': init_layer_norm(d),
            'unembed': init_linear(rng, d, self.slice_len),
        }
        if cfg.use_compression_token:
            params['ctok'] = position(1)
            params['to_latent'] = init_linear(rng, d, cfg.latent_dim)
            params['from_latent'] = init_linear(rng, cfg.latent_dim, d)
            params['queries'] = position(s)
        else:
            params['to_latent'] = init_linear(rng, s * d, cfg.latent_dim)
            params['from_latent'] = init_linear(rng, cfg.latent_dim, s * d)
        return params

    def _init_ffn(self, rng):
        cfg = self.config
        widths = [int(round(w)) for w in
                  np.linspace(self.layout.N, cfg.latent_dim, cfg.ffn_layers + 1)]
        return {
            'enc_layers': [init_linear(rng, widths[i], widths[i + 1])
                           for i in range(cfg.ffn_layers)],
            'dec_layers': [init_linear(rng, widths[i + 1], widths[i])
                           for i in reversed(range(cfg.ffn_layers))],
        }

    def parameters(self):
        return [t for _, t in named_parameters(self.params)]

    def parameter_count(self):
        return int(sum(t.size for t in self.parameters()))

    def tokenize(self, data):
        if self.config.tokenization == 'per_neuron':
            return tokenize_per_neuron(data, self.layout, self.gather_index)
        return tokenize_per_weight(data, self.layout)

    def embed(self, data):
        """Lift raw tokens to token_dim and add position embeddings.

        Returns:
            Tensor [batch, seq (+1 with compression token), token_dim]
        """
        tokens = linear(Tensor(self.tokenize(data)), self.params['embed'])
        if self.config.use_compression_token:
            batch = tokens.shape[0]
            ctok = self.params['ctok'] + Tensor(
                np.zeros((batch, 1, self.config.token_dim)))
            tokens = concat([ctok, tokens], axis=1)
        return tokens + self.params['pos_enc']

    def encode(self, data, training=False, rng=None):
        """[batch, N] -> latent Tensor [batch, L]."""
        cfg = self.config
        if cfg.architecture == 'ffn':
            h = Tensor(np.asarray(data).reshape(-1, self.layout.N))
            layers = self.params['enc_layers']
            for i, layer in enumerate(layers):
                h = linear(dropout(h, cfg.dropout, training, rng), layer)
                if i < len(layers) - 1:
                    h = activation(h, 'relu')
            return h

        h = self.embed(data)
        for block in self.params['enc_blocks']:
            h = attention_block(h, block, cfg.heads, cfg.dropout, training, rng)
        h = layer_norm(h, self.params['enc_ln']['g'], self.params['enc_ln']['b'])
        if cfg.use_compression_token:
            h = getitem(h, (slice(None), 0, slice(None)))
        else:
            h = reshape(h, (h.shape[0], -1))
        return linear(h, self.params['to_latent'])

    def decode(self, z, training=False, rng=None):
        """Latent Tensor [batch, L] -> reconstructed Tensor [batch, N]."""
        cfg = self.config
        if cfg.architecture == 'ffn':
            h = z
            layers = self.params['dec_layers']
            for i, layer in enumerate(layers):
                h = linear(dropout(h, cfg.dropout, training, rng), layer)
                if i < len(layers) - 1:
                    h = activation(h, 'relu')
            return h

        batch = z.shape[0]
        d = cfg.token_dim
        if cfg.use_compression_token:
            h = reshape(linear(z, self.params['from_latent']), (batch, 1, d))
            h = h + self.params['queries']
        else:
            h = reshape(linear(z, self.params['from_latent']),
                        (batch, self.seq_len, d))
        h = h + self.params['pos_dec']
        for block in self.params['dec_blocks']:
            h = attention_block(h, block, cfg.heads, cfg.dropout, training, rng)
        h = layer_norm(h, self.params['dec_ln']['g'], self.params['dec_ln']['b'])
        out = linear(h, self.params['unembed'])
        out = reshape(out, (batch, self.seq_len * self.slice_len))
        return getitem(out, (slice(None), self.scatter_index))

    def project(self, z):
        """Projection head output, L2-normalized per row."""
        h = activation(linear(z, self.params['proj1']), 'relu')
        return l2_normalize(linear(h, self.params['proj2']), axis=-1)

    def forward(self, data, training=False, rng=None):
        z = self.encode(data, training, rng)
        return z, self.decode(z, training, rng)

    def embed_batch(self, weights, batch_size=500):
        """Eval-mode latent codes of an [n, N] matrix as an ndarray."""
        weights = np.asarray(weights)
        if weights.shape[0] == 0:
            return np.zeros((0, self.config.latent_dim), dtype=np.float32)
        return np.concatenate([self.encode(weights[i:i + batch_size]).data
                               for i in range(0, weights.shape[0], batch_size)])

    def reconstruct(self, weights, batch_size=500):
        weights = np.asarray(weights)
        if weights.shape[0] == 0:
            return np.zeros_like(weights)
        return np.concatenate([
            self.decode(self.encode(weights[i:i + batch_size])).data
            for i in range(0, weights.shape[0], batch_size)])

    def represent(self, weight_vectors):
        """List of HyperReps for WeightVectors."""
        z = self.embed_batch(np.stack([v.data for v in weight_vectors]))
        return [HyperRep(row, v.model_id, v.epoch)
                for row, v in zip(z, weight_vectors)]

    def save(self, path, optimizer_state=None, extra=None):
        """Write parameters (and optimizer moments) to an HZP1 file."""
        arrays = OrderedDict((name, t.data)
                             for name, t in named_parameters(self.params))
        header = {'config': self.config.as_dict(),
                  'layout': self.layout.as_dict(), 'seed': self.seed,
                  'extra': extra or {}}
        if optimizer_state is not None:
            header['optimizer'] = optimizer_state.as_dict()
            for name, arr in optimizer_state.buffers().items():
                arrays['opt.' + name] = arr
        return save_params(path, arrays, header)

    @classmethod
    def load(cls, path):
        """Read an encoder written by save().

        Returns:
            (encoder, optimizer_state or None, extra dict)
        """
        header, arrays = load_params(path)
        encoder = cls(EncoderConfig.from_dict(header['config']),
                      LayerLayout.from_dict(header['layout']),
                      header.get('seed', 0))
        for name, t in named_parameters(encoder.params):
            if name not in arrays or arrays[name].shape != t.shape:
                raise LayoutError('%s: parameter %s missing or misshaped'
                                  % (path, name))
            t.data = arrays[name].astype(t.data.dtype)
        state = None
        if 'optimizer' in header:
            state = OptimizerState.from_dict(header['optimizer'])
            state.load_buffers({name[len('opt.'):]: arr
                                for name, arr in arrays.items()
                                if name.startswith('opt.')})
        return encoder, state, header.get('extra', {})
