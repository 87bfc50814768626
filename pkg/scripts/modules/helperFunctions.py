#!/usr/bin/env python
"""Module for shared code between the zoo, training and probing pipelines.

This module holds functions that are used in every pipeline:
    setup_logger()
    load_config()
    write_config()
    rng_stream()
    check_array()
"""
import datetime
import json
import logging
import os
import sys
import zlib

import numpy as np

from scripts.modules.errors import ConfigError

LOG_FORMAT = '%(asctime)s %(levelname)s %(message)s'


def setup_logger(name, dir_log=None, verbosity=logging.INFO):
    """Create logger with stream handler and optional file handler.

    The file handler is named after the current time and always logs at
    DEBUG; the stream handler logs at the given verbosity.

    Args:
        name: logger name, usually the driver class name
        dir_log: optional str directory for timestamped log files
        verbosity: int logging level of the stdout handler

    Returns:
        logger: configured logging.Logger
    """
    logger = logging.getLogger(name)
    if logger.handlers:  # Already configured in this process
        return logger

    formatter = logging.Formatter(LOG_FORMAT)
    sh = logging.StreamHandler(sys.stdout)
    sh.setFormatter(formatter)
    sh.setLevel(verbosity)
    logger.addHandler(sh)

    if dir_log:
        if not os.path.isdir(dir_log):
            os.makedirs(dir_log)
        d = datetime.datetime.now()
        filename = ('%s/%i-%i-%i-%i-%i.log'
                    % (dir_log, d.year, d.month, d.day, d.hour, d.minute))
        fh = logging.FileHandler(filename)
        fh.setFormatter(formatter)
        fh.setLevel(logging.DEBUG)
        logger.addHandler(fh)

    logger.setLevel(logging.DEBUG)
    logger.propagate = False
    return logger


def load_config(config_file, section=None):
    """Load JSON config file and return globals merged with one section.

    Keys starting with an underscore are comments and are dropped. Section
    values override global values of the same name.

    Args:
        config_file: str path to UTF-8 JSON file
        section: optional str name of command section

    Returns:
        config: dict of resolved values
    """
    try:
        with open(config_file, 'r', encoding='utf-8') as file_in:
            raw = json.load(file_in)
    except (IOError, ValueError) as err:
        raise ConfigError('could not read config %s: %s' % (config_file, err))
    if type(raw) is not dict:
        raise ConfigError('config %s is not a JSON object' % config_file)

    config = {k: v for k, v in raw.items()
              if not k.startswith('_') and type(v) is not dict}
    if section is not None:
        config.update({k: v for k, v in raw.get(section, {}).items()
                       if not k.startswith('_')})
    return config


def write_config(config, out_dir, filename='config.json'):
    """Write resolved config as sorted, indented JSON into out_dir."""
    path = os.path.join(out_dir, filename)
    with open(path, 'w', encoding='utf-8') as outfile:
        json.dump(config, outfile, indent=4, sort_keys=True, default=str)
    return path


def _key_to_int(key):
    if type(key) in [int, np.int64, np.int32]:
        return int(key) & 0xFFFFFFFF
    return zlib.crc32(str(key).encode('utf-8'))


def rng_stream(seed, *keys):
    """Return an independent counter-based generator for (seed, keys).

    Streams with different keys never share state, so any stochastic step
    can be reproduced from its key alone, regardless of execution order.

    Args:
        seed: int base seed
        keys: ints or strings naming the stream, e.g. ('epoch', 3, 'batch', 7)

    Returns:
        rng: numpy Generator backed by Philox
    """
    entropy = [int(seed) & 0xFFFFFFFF] + [_key_to_int(k) for k in keys]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def check_array(arr, name, ndim=None):
    """Raise TypeError unless arr is an ndarray with ndim dimensions."""
    if type(arr) is not np.ndarray:
        raise TypeError('received %s arg of type %s' % (name, type(arr)))
    if ndim is not None and arr.ndim != ndim:
        raise ValueError('%s ndarray has %i dims, expected %i'
                         % (name, arr.ndim, ndim))
    return arr
