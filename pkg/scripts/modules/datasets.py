#!/usr/bin/env python
"""Module for the image datasets base models are trained on.

    generate_tetris()   4x4 grey-scale tetromino classification data
    parse_idx()         MNIST-style IDX image/label file pairs
    split_dataset()     stratified, seeded train/test split
"""
import hashlib
import struct

from collections import OrderedDict

import numpy as np

from scripts.modules.errors import (ConfigError, ConsistencyError, DataError,
                                    FormatError, LengthError, StorageError)
from scripts.modules.helperFunctions import check_array, rng_stream

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

# Cell masks; each shape covers exactly four cells
TETRIS_SHAPES = OrderedDict([
    ('L', np.array([[1, 0], [1, 0], [1, 1]])),
    ('T', np.array([[1, 1, 1], [0, 1, 0]])),
    ('S', np.array([[0, 1, 1], [1, 1, 0]])),
    ('I', np.array([[1, 1, 1, 1]])),
])
TETRIS_SIZE = 4


class ImageDataset(object):
    """Images in [0, 1] with integer class labels.

    Attributes:
        images: float32 ndarray [n, c, h, w]
        labels: int64 ndarray [n]
        class_count: int
        name: str
    """

    def __init__(self, images, labels, class_count, name=''):
        check_array(images, 'images', ndim=4)
        check_array(labels, 'labels', ndim=1)
        if images.shape[0] != labels.shape[0]:
            raise ConsistencyError('%i images but %i labels'
                                   % (images.shape[0], labels.shape[0]))
        if labels.size and (labels.min() < 0 or labels.max() >= class_count):
            raise DataError('labels outside [0, %i)' % class_count)
        self.images = images.astype(np.float32)
        self.labels = labels.astype(np.int64)
        self.class_count = int(class_count)
        self.name = name

    def __len__(self):
        return self.labels.shape[0]

    def subset(self, indices, name=None):
        indices = np.asarray(indices, dtype=np.int64)
        return ImageDataset(self.images[indices], self.labels[indices],
                            self.class_count,
                            self.name if name is None else name)

    def check_coverage(self):
        """Raise DataError unless every class appears at least once."""
        counts = np.bincount(self.labels, minlength=self.class_count)
        if len(self) < self.class_count or (counts == 0).any():
            raise DataError('dataset %s misses classes %s'
                            % (self.name, list(np.flatnonzero(counts == 0))))

    def fingerprint(self):
        digest = hashlib.sha256()
        digest.update(self.images.astype('<f4').tobytes())
        digest.update(self.labels.astype('<i8').tobytes())
        digest.update(struct.pack('<I', self.class_count))
        return digest.hexdigest()

    def as_dict(self):
        return {'name': self.name, 'samples': len(self),
                'class_count': self.class_count,
                'shape': list(self.images.shape[1:]),
                'fingerprint': self.fingerprint()}


def generate_tetris(seed, samples_per_class=200, noise_std=0.0):
    """Generate the tetris dataset.

    Each sample is one tetromino at a uniformly random valid translation in
    a 4x4 grid. Shape cells are 1, background 0, then optional Gaussian
    pixel noise clamped to [0, 1].

    Args:
        seed: int
        samples_per_class: int >= 1
        noise_std: float >= 0

    Returns:
        dataset: ImageDataset with 4 classes and images [n, 1, 4, 4]
    """
    if type(samples_per_class) is not int or samples_per_class < 1:
        raise ConfigError('samples_per_class must be a positive int, got %s'
                          % samples_per_class)
    if noise_std < 0:
        raise ConfigError('noise_std must be >= 0, got %s' % noise_std)

    rng = rng_stream(seed, 'tetris')
    n = samples_per_class * len(TETRIS_SHAPES)
    images = np.zeros((n, 1, TETRIS_SIZE, TETRIS_SIZE), dtype=np.float32)
    labels = np.zeros(n, dtype=np.int64)

    i = 0
    for cls, mask in enumerate(TETRIS_SHAPES.values()):
        h, w = mask.shape
        offsets = [(r, c) for r in range(TETRIS_SIZE - h + 1)
                   for c in range(TETRIS_SIZE - w + 1)]
        picks = rng.integers(len(offsets), size=samples_per_class)
        for pick in picks:
            r, c = offsets[pick]
            images[i, 0, r:r + h, c:c + w] = mask
            labels[i] = cls
            i += 1

    if noise_std > 0:
        noise = rng.normal(0.0, noise_std, images.shape)
        images = np.clip(images + noise, 0.0, 1.0).astype(np.float32)

    order = rng.permutation(n)
    return ImageDataset(images[order], labels[order], len(TETRIS_SHAPES),
                        'tetris')


def _read_idx(path, magic_expected):
    try:
        with open(path, 'rb') as file_in:
            raw = file_in.read()
    except IOError as err:
        raise StorageError('could not read %s: %s' % (path, err))
    if len(raw) < 4:
        raise LengthError('%s: %i bytes, too short for an IDX header'
                          % (path, len(raw)))
    magic, = struct.unpack('>I', raw[:4])
    if magic != magic_expected:
        raise FormatError('%s: magic 0x%08x, expected 0x%08x'
                          % (path, magic, magic_expected))
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise LengthError('%s: truncated dimension fields' % path)
    dims = struct.unpack('>%iI' % ndim, raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise LengthError('%s: header promises %i bytes, found %i'
                          % (path, count, len(raw) - header))
    return np.frombuffer(raw, dtype=np.uint8, count=count,
                         offset=header).reshape(dims)


def parse_idx(image_path, label_path, class_count=None, name='idx'):
    """Parse an IDX image file and its label file.

    Args:
        image_path: str path with magic 0x00000803 (ubyte, [n, h, w])
        label_path: str path with magic 0x00000801 (ubyte, [n])
        class_count: optional int, default max(label) + 1
        name: str

    Returns:
        dataset: ImageDataset with images [n, 1, h, w] scaled to [0, 1]
    """
    images = _read_idx(image_path, IDX_IMAGE_MAGIC)
    labels = _read_idx(label_path, IDX_LABEL_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise ConsistencyError('%s holds %i images, %s holds %i labels'
                               % (image_path, images.shape[0], label_path,
                                  labels.shape[0]))
    if class_count is None:
        class_count = int(labels.max()) + 1 if labels.size else 0
    images = (images.astype(np.float32) / 255.0)[:, None, :, :]
    return ImageDataset(images, labels.astype(np.int64), class_count, name)


def split_dataset(d, train_fraction, seed):
    """Stratified shuffle split.

    Per-class train counts use largest-remainder allocation so the total
    equals round(n * train_fraction).

    Args:
        d: ImageDataset
        train_fraction: float in (0, 1]
        seed: int

    Returns:
        (train, test): ImageDatasets; fraction 1 returns d and an empty set
    """
    if not 0 < train_fraction <= 1:
        raise ConfigError('train_fraction %s outside (0, 1]' % train_fraction)
    if train_fraction == 1:
        return d, d.subset([], name='%s-test' % d.name)

    rng = rng_stream(seed, 'split')
    counts = np.bincount(d.labels, minlength=d.class_count)
    quotas = counts * train_fraction
    take = np.floor(quotas).astype(np.int64)
    remaining = int(round(len(d) * train_fraction)) - int(take.sum())
    by_remainder = np.argsort(-(quotas - take), kind='stable')
    take[by_remainder[:max(remaining, 0)]] += 1

    train_idx, test_idx = [], []
    for cls in range(d.class_count):
        members = rng.permutation(np.flatnonzero(d.labels == cls))
        train_idx.extend(members[:take[cls]])
        test_idx.extend(members[take[cls]:])
    return (d.subset(np.sort(train_idx), name='%s-train' % d.name),
            d.subset(np.sort(test_idx), name='%s-test' % d.name))
