from __future__ import annotations

import functools
import hashlib
import logging
import os
import time

import numpy as np

debug = False
log = logging.getLogger(__name__)

SEED_ENV = 'LIGHTMOVE_SEED'


class DimensionError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class ParseError(ValueError):
    def __init__(self, line_no, message):
        super().__init__('line {}: {}'.format(line_no, message))
        self.line_no = line_no


class CheckpointError(ValueError):
    pass


class ConfigError(ValueError):
    pass


def setup_logging(verbose=False):
    global debug
    debug = verbose
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format='%(asctime)s %(levelname)s %(name)s: %(message)s',
    )


def default_seed():
    value = os.environ.get(SEED_ENV)
    if value is None:
        return 0
    try:
        return int(value)
    except ValueError:
        raise ConfigError('{} must be an integer, got {!r}'.format(SEED_ENV, value))


def timeit(method):
    @functools.wraps(method)
    def timed(*args, **kw):
        ts = time.perf_counter()
        result = method(*args, **kw)
        te = time.perf_counter()
        log.debug('*** timer:%r  %2.2f ms', method.__name__, (te - ts) * 1000)
        return result
    return timed


def shape_str(shape):
    return '×'.join(str(s) for s in shape) or 'scalar'


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 20), b''):
            h.update(chunk)
    return h.hexdigest()


def sha256_arrays(arrays):
    """Hash of an ordered sequence of (name, array) pairs, dtype and shape included."""
    h = hashlib.sha256()
    for name, a in arrays:
        a = np.ascontiguousarray(a)
        h.update(name.encode('utf-8'))
        h.update(str(a.dtype).encode('ascii'))
        h.update(repr(a.shape).encode('ascii'))
        h.update(a.tobytes())
    return h.hexdigest()
