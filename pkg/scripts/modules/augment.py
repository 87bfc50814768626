#!/usr/bin/env python
"""Module for weight-space augmentations.

Permuting the units of a hidden layer together with the matching input
columns (or input channels) of the next layer yields a network with
identical outputs. Erasing and noise are destructive edits on the flat
vector. Views are built in the order permutation -> erase -> noise.

Every function takes a WeightVector or a flat ndarray and returns the
same kind.
"""
import itertools
import math

import numpy as np

from scripts.modules.errors import ConfigError, SymmetryError
from scripts.modules.helperFunctions import rng_stream
from scripts.modules.zooStore import WeightVector, devectorize


class AugmentConfig(object):
    """Augmentation switches and parameters."""

    def __init__(self, permutation_count=120, erase_prob=0.5, erase_low=0.03,
                 erase_high=0.3, noise_std=0.05, permute=True, erase=True,
                 noise=True):
        self.permutation_count = int(permutation_count)
        self.erase_prob = float(erase_prob)
        self.erase_low = float(erase_low)
        self.erase_high = float(erase_high)
        self.noise_std = float(noise_std)
        self.permute = bool(permute)
        self.erase = bool(erase)
        self.noise = bool(noise)
        self.validate()

    def validate(self):
        if not 0 <= self.erase_prob <= 1:
            raise ConfigError('erase_prob %s outside [0, 1]' % self.erase_prob)
        if not 0 < self.erase_low <= self.erase_high < 1:
            raise ConfigError('erase bounds (%s, %s) must satisfy '
                              '0 < low <= high < 1'
                              % (self.erase_low, self.erase_high))
        if self.noise_std < 0:
            raise ConfigError('noise_std must be >= 0')
        if self.permutation_count < 1:
            raise ConfigError('permutation_count must be >= 1')

    def any_enabled(self):
        return self.permute or self.erase or self.noise

    @classmethod
    def disabled(cls):
        return cls(permute=False, erase=False, noise=False)

    def as_dict(self):
        return {'permutation_count': self.permutation_count,
                'erase_prob': self.erase_prob, 'erase_low': self.erase_low,
                'erase_high': self.erase_high, 'noise_std': self.noise_std,
                'permute': self.permute, 'erase': self.erase,
                'noise': self.noise}

    @classmethod
    def from_dict(cls, d):
        keys = cls().as_dict().keys()
        return cls(**{k: v for k, v in d.items() if k in keys})


class PermutationSet(object):
    """Precomputed unit permutations per permutable layer.

    Attributes:
        layout: LayerLayout
        perms: dict layer index -> int ndarray [count_l, N_l]
    """

    def __init__(self, layout, perms):
        self.layout = layout
        self.perms = perms

    def count(self, l):
        return self.perms[l].shape[0]

    def draw(self, rng):
        """Pick one permutation per layer, uniformly and independently."""
        return {l: self.perms[l][rng.integers(self.count(l))]
                for l in sorted(self.perms)}


def sample_permutation_set(layout, count, seed):
    """Enumerate or sample distinct permutations for every hidden layer.

    Layers with N_l! <= count get the full symmetric group; larger groups
    get count distinct permutations drawn uniformly.
    """
    if count < 1:
        raise ConfigError('permutation count must be >= 1, got %s' % count)
    perms = {}
    for l in layout.permutable():
        units = layout.units(l)
        if count >= math.factorial(units):
            perms[l] = np.array(list(itertools.permutations(range(units))),
                                dtype=np.int64)
            continue
        rng = rng_stream(seed, 'permutations', l)
        seen = set()
        drawn = []
        while len(drawn) < count:
            p = tuple(rng.permutation(units))
            if p not in seen:
                seen.add(p)
                drawn.append(p)
        perms[l] = np.array(drawn, dtype=np.int64)
    return PermutationSet(layout, perms)


def random_permutations(layout, rng):
    """One fresh uniform permutation per hidden layer."""
    return {l: rng.permutation(layout.units(l)) for l in layout.permutable()}


def invert_permutation(p):
    inverse = np.empty_like(p)
    inverse[p] = np.arange(len(p))
    return inverse


def permutation_index_map(layout, perms):
    """Gather indices realizing a per-layer permutation on the flat vector.

    Unit u of layer l takes the weights and bias of unit p[u]; layer l+1
    reorders its input columns (dense) or input channels (conv) alike.

    Returns:
        index_map: int ndarray [N] with permuted = v[index_map]
    """
    tensors = devectorize(np.arange(layout.N), layout)
    permutable = layout.permutable()
    for l, p in perms.items():
        if l not in permutable:
            raise SymmetryError('layer %i is the output layer and keeps its '
                                'unit order' % l)
        p = np.asarray(p)
        units = layout.units(l)
        if sorted(p.tolist()) != list(range(units)):
            raise SymmetryError('layer %i: %s is not a permutation of %i units'
                                % (l, list(p), units))
        w, b = tensors[l]
        tensors[l] = (w[p], None if b is None else b[p])
        w_next, b_next = tensors[l + 1]
        if layout.layers[l + 1]['kind'] == 'conv':
            w_next = w_next[:, p]
        else:
            rows = w_next.shape[0]
            w_next = w_next.reshape(rows, units, -1)[:, p, :].reshape(rows, -1)
        tensors[l + 1] = (w_next, b_next)
    parts = []
    for w, b in tensors:
        parts.append(w.reshape(-1))
        if b is not None:
            parts.append(b)
    return np.concatenate(parts)


def _unwrap(v):
    return v.data if isinstance(v, WeightVector) else np.asarray(v)


def _rewrap(v, data):
    return v.replace(data) if isinstance(v, WeightVector) else data


def apply_permutation(v, perms, layout=None):
    """Return the functionally equivalent permuted network.

    Args:
        v: WeightVector, or flat ndarray together with layout
        perms: dict layer index -> permutation of that layer's units
        layout: LayerLayout when v is an ndarray
    """
    layout = v.layout if isinstance(v, WeightVector) else layout
    return _rewrap(v, _unwrap(v)[..., permutation_index_map(layout, perms)])


def erase(v, cfg, rng):
    """Zero one contiguous run of the flat vector with probability erase_prob.

    The run length is uniform over [ceil(low * N), floor(high * N)].
    """
    if rng.random() >= cfg.erase_prob:
        return v
    data = _unwrap(v)
    n = data.shape[-1]
    low = max(1, int(math.ceil(cfg.erase_low * n - 1e-9)))
    high = max(low, min(n, int(math.floor(cfg.erase_high * n + 1e-9))))
    length = int(rng.integers(low, high + 1))
    start = int(rng.integers(0, n - length + 1))
    out = np.array(data, copy=True)
    out[..., start:start + length] = 0
    return _rewrap(v, out)


def add_noise(v, std, rng):
    """Add i.i.d. zero-mean Gaussian noise."""
    if std < 0:
        raise ConfigError('noise std must be >= 0, got %s' % std)
    if std == 0:
        return v
    data = _unwrap(v)
    noisy = data + rng.normal(0.0, std, data.shape).astype(data.dtype)
    return _rewrap(v, noisy)


def augment_once(v, cfg, rng, perm_set=None, layout=None):
    """One draw of permutation -> erase -> noise.

    Returns:
        (view, permuted): the augmented view and its permutation-only
            version, used as reconstruction target
    """
    layout = v.layout if isinstance(v, WeightVector) else layout
    permuted = v
    if cfg.permute:
        perms = perm_set.draw(rng) if perm_set is not None \
            else random_permutations(layout, rng)
        permuted = apply_permutation(v, perms, layout)
    view = permuted
    if cfg.erase:
        view = erase(view, cfg, rng)
    if cfg.noise:
        view = add_noise(view, cfg.noise_std, rng)
    return view, permuted


def make_views(v, cfg, rng, perm_set=None, layout=None, with_targets=False):
    """Two independent augmented views of one sample.

    Raises:
        ConfigError: if every augmentation is disabled
    """
    if not cfg.any_enabled():
        raise ConfigError('make_views needs at least one augmentation enabled')
    first = augment_once(v, cfg, rng, perm_set, layout)
    second = augment_once(v, cfg, rng, perm_set, layout)
    if with_targets:
        return first, second
    return first[0], second[0]
