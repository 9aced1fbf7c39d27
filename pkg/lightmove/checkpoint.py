"""Binary checkpoint files.

Layout::

    b'LMCKPT\\n'
    uint64 little-endian header length
    JSON header: format_version, model_config, meta, tensors[name, shape, offset],
                 payload_bytes, payload_sha256
    payload: little-endian float64 values, tensors back to back

The payload hash is checked on every read, so flipped bytes are reported
instead of silently loading different weights.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .lib import CheckpointError
from .model import ModelConfig, decays, param_shapes

MAGIC = b'LMCKPT\n'
FORMAT_VERSION = 1
_LE_F8 = np.dtype('<f8')


@dataclass
class Checkpoint:
    params: dict
    epoch: int = 0
    valid_mrr: float = 0.0
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)
    adam_t: int = 0
    meta: dict = field(default_factory=dict)

    def to_store(self, config):
        store = nx.ParamStore(config.np_dtype)
        for name, _ in param_shapes(config):
            if name not in self.params:
                raise CheckpointError('checkpoint lacks tensor {!r}'.format(name))
            store.add(name, self.params[name], decay=decays(name))
        return store


def _tensor_table(ckpt):
    for prefix, group in (('param', ckpt.params), ('adam_m', ckpt.adam_m), ('adam_v', ckpt.adam_v)):
        for name, values in group.items():
            yield '{}/{}'.format(prefix, name), np.asarray(values)


def write_checkpoint(path, ckpt, config):
    directory = []
    chunks = []
    offset = 0
    for name, values in _tensor_table(ckpt):
        raw = np.ascontiguousarray(values, dtype=_LE_F8).tobytes()
        directory.append({'name': name, 'shape': list(values.shape), 'offset': offset})
        chunks.append(raw)
        offset += len(raw)
    payload = b''.join(chunks)
    meta = dict(ckpt.meta)
    meta.update(epoch=ckpt.epoch, valid_mrr=ckpt.valid_mrr, adam_t=ckpt.adam_t)
    header = {
        'format_version': FORMAT_VERSION,
        'model_config': config.to_dict(),
        'meta': meta,
        'tensors': directory,
        'payload_bytes': len(payload),
        'payload_sha256': hashlib.sha256(payload).hexdigest(),
    }
    head = json.dumps(header, sort_keys=True).encode('utf-8')
    with open(path, 'wb') as f:
        f.write(MAGIC)
        f.write(struct.pack('<Q', len(head)))
        f.write(head)
        f.write(payload)


def read_checkpoint(path):
    """Returns (Checkpoint, ModelConfig)."""
    with open(path, 'rb') as f:
        blob = f.read()
    if not blob.startswith(MAGIC):
        raise CheckpointError('{}: not a LightMove checkpoint'.format(path))
    pos = len(MAGIC)
    try:
        (head_len,) = struct.unpack_from('<Q', blob, pos)
        pos += 8
        header = json.loads(blob[pos:pos + head_len].decode('utf-8'))
    except (struct.error, UnicodeDecodeError, ValueError) as e:
        raise CheckpointError('{}: unreadable header ({})'.format(path, e))
    if header.get('format_version') != FORMAT_VERSION:
        raise CheckpointError('{}: unsupported format version {}'.format(
            path, header.get('format_version')))
    payload = blob[pos + head_len:]
    if len(payload) != header['payload_bytes'] or \
            hashlib.sha256(payload).hexdigest() != header['payload_sha256']:
        raise CheckpointError('{}: payload hash mismatch, file is corrupted'.format(path))

    config = ModelConfig.from_dict(header['model_config'])
    groups = {'param': {}, 'adam_m': {}, 'adam_v': {}}
    for entry in header['tensors']:
        prefix, name = entry['name'].split('/', 1)
        shape = tuple(entry['shape'])
        count = int(np.prod(shape, dtype=np.int64))
        values = np.frombuffer(payload, dtype=_LE_F8, count=count, offset=entry['offset'])
        groups[prefix][name] = values.reshape(shape).astype(np.float64)

    expected = dict(param_shapes(config))
    for name, shape in expected.items():
        got = groups['param'].get(name)
        if got is None or got.shape != shape:
            raise CheckpointError('{}: tensor {!r} missing or misshapen for the stored config'.format(
                path, name))

    meta = dict(header['meta'])
    ckpt = Checkpoint(params=groups['param'], epoch=meta.pop('epoch', 0),
                      valid_mrr=meta.pop('valid_mrr', 0.0), adam_m=groups['adam_m'],
                      adam_v=groups['adam_v'], adam_t=meta.pop('adam_t', 0), meta=meta)
    return ckpt, config


def load_params(path):
    ckpt, config = read_checkpoint(path)
    return ckpt.to_store(config), config, ckpt
