#!/usr/bin/env python
"""Module for storing model zoos on disk.

A zoo is one manifest.json plus one HZW1 checkpoint per (model, epoch):

    <zoo>/manifest.json
    <zoo>/checkpoints/model_00001/epoch_001.hzw

Checkpoint layout (little-endian unless the flag byte says otherwise):
    4s   magic b'HZW1'
    32s  sha256 digest of the LayerLayout
    I    N, number of float32 values
    i    model id
    i    epoch
    B    1 if the payload is little-endian
    N x float32 payload

Encoder parameters use the HZP1 container: magic, uint32 header length, a
UTF-8 JSON header naming each array and its shape, then the float32 arrays
back to back.
"""
import hashlib
import json
import os
import struct

from collections import OrderedDict

import numpy as np

from scripts.modules.errors import (FormatError, LayoutError, LengthError,
                                    StorageError)

CHECKPOINT_MAGIC = b'HZW1'
CHECKPOINT_HEADER = struct.Struct('<32sIiiB')
PARAMS_MAGIC = b'HZP1'
MANIFEST_NAME = 'manifest.json'
QUANTILES = [0.0, 0.25, 0.5, 0.75, 1.0]
SPLITS = ['train', 'val', 'test']


class LayerLayout(object):
    """Structural metadata of a flattened weight vector.

    Each parameterized layer is a dict with
        kind: 'dense' (weight [out, in]) or 'conv' (kernel [out, in, kh, kw])
        weight_shape: list of ints
        bias: int bias length, 0 for bias-free layers
    Layers appear in forward order; within a layer the weights come first,
    row-major, then the bias. Every layer except the last is permutable.
    """

    def __init__(self, layers):
        if not layers:
            raise LayoutError('layout needs at least one parameterized layer')
        self.layers = []
        offset = 0
        for layer in layers:
            kind = layer['kind']
            shape = tuple(int(s) for s in layer['weight_shape'])
            if kind not in ['dense', 'conv'] \
                    or len(shape) != (2 if kind == 'dense' else 4):
                raise LayoutError('bad layer %s' % layer)
            bias = int(layer.get('bias', 0))
            if bias not in [0, shape[0]]:
                raise LayoutError('bias length %i for %i units'
                                  % (bias, shape[0]))
            weight_size = int(np.prod(shape))
            self.layers.append({'kind': kind, 'weight_shape': shape,
                                'bias': bias, 'offset': offset,
                                'weight_size': weight_size,
                                'extent': weight_size + bias})
            offset += weight_size + bias
        self.N = offset
        for l in range(len(self.layers) - 1):
            self._successor_group(l)

    def as_dict(self):
        return [{'kind': l['kind'], 'weight_shape': list(l['weight_shape']),
                 'bias': l['bias']} for l in self.layers]

    @classmethod
    def from_dict(cls, layers):
        return cls(layers)

    def digest(self):
        """sha256 over the canonical layer description (32 bytes)."""
        text = json.dumps(self.as_dict(), sort_keys=True)
        return hashlib.sha256(text.encode('utf-8')).digest()

    def describe(self):
        return ' -> '.join('%s%s%s' % (l['kind'], list(l['weight_shape']),
                                       '+b' if l['bias'] else '')
                           for l in self.layers)

    def __eq__(self, other):
        return isinstance(other, LayerLayout) and \
            self.as_dict() == other.as_dict()

    def __ne__(self, other):
        return not self == other

    def units(self, l):
        return self.layers[l]['weight_shape'][0]

    def permutable(self):
        """Indices of the hidden layers, whose units may be reordered."""
        return list(range(len(self.layers) - 1))

    def _successor_group(self, l):
        """Input columns of layer l+1 fed by each unit of layer l."""
        units = self.units(l)
        nxt = self.layers[l + 1]
        fan_in = nxt['weight_shape'][1]
        if nxt['kind'] == 'conv':
            if fan_in != units:
                raise LayoutError('layer %i has %i channels, layer %i expects %i'
                                  % (l, units, l + 1, fan_in))
            return 1
        if fan_in % units != 0:
            raise LayoutError('layer %i inputs (%i) not a multiple of %i units'
                              % (l + 1, fan_in, units))
        return fan_in // units

    def neuron_slices(self, l):
        """Flat indices [units, slice_len] of each unit's weights and bias."""
        layer = self.layers[l]
        units = self.units(l)
        per_unit = layer['weight_size'] // units
        idx = layer['offset'] + np.arange(layer['weight_size']).reshape(
            units, per_unit)
        if layer['bias']:
            bias_idx = layer['offset'] + layer['weight_size'] + np.arange(units)
            idx = np.concatenate([idx, bias_idx[:, None]], axis=1)
        return idx

    def all_neuron_slices(self):
        return [self.neuron_slices(l) for l in range(len(self.layers))]

    def successor_slices(self, l):
        """Flat indices [units_l, k] in layer l+1 that move with unit u of l."""
        if l not in self.permutable():
            raise LayoutError('layer %i has no successor' % l)
        group = self._successor_group(l)
        nxt = self.layers[l + 1]
        shape = nxt['weight_shape']
        flat = nxt['offset'] + np.arange(nxt['weight_size']).reshape(shape)
        units = self.units(l)
        if nxt['kind'] == 'conv':
            cols = flat.transpose(1, 0, 2, 3).reshape(units, -1)
        else:
            cols = flat.reshape(shape[0], units, group).transpose(1, 0, 2) \
                .reshape(units, -1)
        return cols

    def max_slice_length(self):
        return max(s.shape[1] for s in self.all_neuron_slices())

    def token_count(self):
        return sum(self.units(l) for l in range(len(self.layers)))


class WeightVector(object):
    """Flattened weights and biases of one checkpoint (read-only)."""

    def __init__(self, data, layout, model_id=-1, epoch=-1):
        data = np.array(data, dtype=np.float32).reshape(-1)
        if data.shape[0] != layout.N:
            raise LayoutError('vector of length %i for layout with N=%i'
                              % (data.shape[0], layout.N))
        data.flags.writeable = False
        self.data = data
        self.layout = layout
        self.model_id = int(model_id)
        self.epoch = int(epoch)

    def __len__(self):
        return self.data.shape[0]

    def replace(self, data):
        """New vector with the same layout and identity."""
        return WeightVector(data, self.layout, self.model_id, self.epoch)


def vectorize(tensors, layout, model_id=-1, epoch=-1):
    """Flatten per-layer (weight, bias) pairs in forward order.

    Args:
        tensors: list of (W, b) ndarrays (b None for bias-free layers)
        layout: LayerLayout

    Returns:
        WeightVector
    """
    if len(tensors) != len(layout.layers):
        raise LayoutError('%i tensor pairs for %i layers'
                          % (len(tensors), len(layout.layers)))
    parts = []
    for l, (layer, (w, b)) in enumerate(zip(layout.layers, tensors)):
        w = np.asarray(w)
        if w.shape != layer['weight_shape']:
            raise LayoutError('layer %i weight shape %s, layout expects %s'
                              % (l, w.shape, layer['weight_shape']))
        parts.append(w.reshape(-1))
        if layer['bias']:
            if b is None or np.shape(b) != (layer['bias'],):
                raise LayoutError('layer %i bias shape %s, layout expects %s'
                                  % (l, None if b is None else np.shape(b),
                                     (layer['bias'],)))
            parts.append(np.asarray(b).reshape(-1))
        elif b is not None:
            raise LayoutError('layer %i is bias-free' % l)
    return WeightVector(np.concatenate(parts), layout, model_id, epoch)


def devectorize(v, layout=None):
    """Inverse of vectorize(); accepts a WeightVector or a flat ndarray."""
    if isinstance(v, WeightVector):
        layout = layout or v.layout
        data = v.data
    else:
        data = np.asarray(v)
    if data.shape[0] != layout.N:
        raise LayoutError('vector of length %i for layout with N=%i'
                          % (data.shape[0], layout.N))
    tensors = []
    for layer in layout.layers:
        start = layer['offset']
        stop = start + layer['weight_size']
        w = data[start:stop].reshape(layer['weight_shape']).copy()
        b = data[stop:stop + layer['bias']].copy() if layer['bias'] else None
        tensors.append((w, b))
    return tensors


def save_checkpoint(v, path):
    header = CHECKPOINT_HEADER.pack(v.layout.digest(), v.layout.N,
                                    v.model_id, v.epoch, 1)
    try:
        with open(path, 'wb') as outfile:
            outfile.write(CHECKPOINT_MAGIC + header)
            outfile.write(v.data.astype('<f4').tobytes())
    except IOError as err:
        raise StorageError('could not write checkpoint %s: %s' % (path, err))
    return path


def load_checkpoint(path, layout):
    """Read an HZW1 file written for layout.

    Raises:
        FormatError: bad magic or layout digest
        LengthError: file shorter than its header promises
    """
    try:
        with open(path, 'rb') as file_in:
            raw = file_in.read()
    except IOError as err:
        raise StorageError('could not read checkpoint %s: %s' % (path, err))
    if len(raw) >= 4 and raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError('%s: bad magic %r' % (path, raw[:4]))
    start = 4 + CHECKPOINT_HEADER.size
    if len(raw) < start:
        raise LengthError('%s: truncated header' % path)
    digest, n, model_id, epoch, little = \
        CHECKPOINT_HEADER.unpack(raw[4:start])
    if digest != layout.digest():
        raise FormatError('%s: layout digest does not match %s'
                          % (path, layout.describe()))
    if len(raw) - start < 4 * n:
        raise LengthError('%s: header promises %i floats, found %i bytes'
                          % (path, n, len(raw) - start))
    dtype = '<f4' if little else '>f4'
    data = np.frombuffer(raw, dtype=dtype, count=n, offset=start)
    return WeightVector(data.astype(np.float32), layout, model_id, epoch)


def _stats(values):
    values = np.asarray(values, dtype=np.float64)
    return [values.mean(), values.var()] + list(np.quantile(values, QUANTILES))


def weight_statistics(v, pool_bias=False):
    """Layer-wise statistics baseline s(W).

    Per layer and separately for weights and biases: mean, variance and the
    0/25/50/75/100% quantiles (linear interpolation). Bias-free layers
    contribute only their weight features; pool_bias=True merges weights
    and biases into one group per layer.

    Returns:
        features: float64 ndarray
    """
    features = []
    for w, b in devectorize(v):
        if pool_bias and b is not None:
            features.extend(_stats(np.concatenate([w.reshape(-1), b])))
            continue
        features.extend(_stats(w))
        if b is not None:
            features.extend(_stats(b))
    return np.array(features)


def weight_statistics_matrix(weights, layout, pool_bias=False):
    return np.stack([weight_statistics(WeightVector(w, layout), pool_bias)
                     for w in weights]) if len(weights) else \
        np.zeros((0, 0))


def save_params(path, arrays, header=None):
    """Write named float32 arrays into an HZP1 container.

    Args:
        path: str
        arrays: OrderedDict name -> ndarray
        header: optional JSON-serializable dict stored alongside
    """
    meta = {'header': header or {},
            'arrays': [[name, list(np.shape(arr))] for name, arr in arrays.items()]}
    blob = json.dumps(meta, sort_keys=True).encode('utf-8')
    try:
        with open(path, 'wb') as outfile:
            outfile.write(PARAMS_MAGIC + struct.pack('<I', len(blob)) + blob)
            for arr in arrays.values():
                outfile.write(np.asarray(arr, dtype='<f4').tobytes())
    except IOError as err:
        raise StorageError('could not write parameters %s: %s' % (path, err))
    return path


def load_params(path):
    """Read an HZP1 container.

    Returns:
        (header, arrays): dict and OrderedDict name -> float32 ndarray
    """
    try:
        with open(path, 'rb') as file_in:
            raw = file_in.read()
    except IOError as err:
        raise StorageError('could not read parameters %s: %s' % (path, err))
    if len(raw) < 8:
        raise LengthError('%s: truncated header' % path)
    if raw[:4] != PARAMS_MAGIC:
        raise FormatError('%s: bad magic %r' % (path, raw[:4]))
    size, = struct.unpack('<I', raw[4:8])
    if len(raw) < 8 + size:
        raise LengthError('%s: truncated JSON header' % path)
    try:
        meta = json.loads(raw[8:8 + size].decode('utf-8'))
    except ValueError as err:
        raise FormatError('%s: unreadable header: %s' % (path, err))

    arrays = OrderedDict()
    offset = 8 + size
    for name, shape in meta['arrays']:
        count = int(np.prod(shape))
        if len(raw) < offset + 4 * count:
            raise LengthError('%s: array %s truncated' % (path, name))
        arrays[name] = np.frombuffer(raw, dtype='<f4', count=count,
                                     offset=offset).reshape(shape) \
            .astype(np.float32)
        offset += 4 * count
    return meta['header'], arrays


def checkpoint_relpath(model_id, epoch):
    return 'checkpoints/model_%05d/epoch_%03d.hzw' % (model_id, epoch)


class ZooManifest(object):
    """A population of trained models and where their checkpoints live.

    Attributes:
        name: str zoo name
        kind: str generator kind
        arch: dict ArchSpec description
        layout: LayerLayout
        dataset: dict dataset summary including its fingerprint
        models: list of dicts {model_id, config, split, records, checkpoints}
        crashed: list of dicts {model_id, config, reason}
        root: directory the manifest was saved to or loaded from
    """

    def __init__(self, name, kind, arch, layout, dataset, models=None,
                 crashed=None, seed=0, root=None):
        self.name = name
        self.kind = kind
        self.arch = arch
        self.layout = layout
        self.dataset = dataset
        self.models = models or []
        self.crashed = crashed or []
        self.seed = seed
        self.root = root
        self._cache = {}

    def as_dict(self):
        return {'name': self.name, 'kind': self.kind, 'seed': self.seed,
                'arch': self.arch, 'layout': self.layout.as_dict(),
                'layout_digest': self.layout.digest().hex(),
                'dataset': self.dataset, 'split_sizes': self.split_sizes(),
                'models': self.models, 'crashed': self.crashed}

    def split_sizes(self):
        return {s: sum(1 for m in self.models if m['split'] == s)
                for s in SPLITS}

    def epochs(self):
        return sorted(set(r['epoch'] for m in self.models
                          for r in m['records']))

    def save(self, root=None):
        root = root or self.root
        path = os.path.join(root, MANIFEST_NAME)
        try:
            with open(path, 'w', encoding='utf-8') as outfile:
                json.dump(self.as_dict(), outfile, indent=2, sort_keys=True)
        except IOError as err:
            raise StorageError('could not write manifest %s: %s' % (path, err))
        self.root = root
        return path

    @classmethod
    def load(cls, root):
        path = os.path.join(root, MANIFEST_NAME)
        try:
            with open(path, 'r', encoding='utf-8') as file_in:
                d = json.load(file_in)
        except (IOError, ValueError) as err:
            raise StorageError('could not read manifest %s: %s' % (path, err))
        return cls(d['name'], d['kind'], d['arch'],
                   LayerLayout.from_dict(d['layout']), d['dataset'],
                   d['models'], d.get('crashed', []), d.get('seed', 0), root)

    def samples(self, split, epochs=None):
        """Load every checkpoint of one split.

        Args:
            split: 'train', 'val', 'test' or 'all'
            epochs: optional iterable restricting the epochs

        Returns:
            (weights, rows): float32 ndarray [n, N] and a list of dicts with
                model_id, epoch, split, the EpochRecord fields and the
                model's TrainConfig fields
        """
        key = (split, None if epochs is None else tuple(sorted(epochs)))
        if key in self._cache:
            return self._cache[key]
        weights, rows = [], []
        for model in self.models:
            if split != 'all' and model['split'] != split:
                continue
            for record, relpath in zip(model['records'], model['checkpoints']):
                if epochs is not None and record['epoch'] not in epochs:
                    continue
                v = load_checkpoint(os.path.join(self.root, relpath),
                                    self.layout)
                weights.append(v.data)
                row = dict(model['config'])
                row.update(record)
                row.update({'model_id': model['model_id'],
                            'split': model['split']})
                rows.append(row)
        weights = np.stack(weights) if weights else \
            np.zeros((0, self.layout.N), dtype=np.float32)
        self._cache[key] = (weights, rows)
        return weights, rows

    def records(self):
        """Flat list of per-epoch rows for CSV export (no checkpoint loads)."""
        rows = []
        for model in self.models:
            for record, relpath in zip(model['records'], model['checkpoints']):
                row = dict(model['config'])
                row.update(record)
                row.update({'model_id': model['model_id'],
                            'split': model['split'], 'checkpoint': relpath})
                rows.append(row)
        return rows
