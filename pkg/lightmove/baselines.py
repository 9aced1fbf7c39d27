"""Reference predictors scored next to LightMove.

frequency and markov1 are count models over each user's training check-ins;
plain_gru is the recurrent model kind trained with the regular loop.
"""
from __future__ import annotations

import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace

import numpy as np

from .data import UNKNOWN
from .lib import ConfigError
from .model import count_params, forward
from .train import fit

log = logging.getLogger(__name__)

KINDS = ('frequency', 'markov1', 'plain_gru')
SMOOTHING = 1e-6


@dataclass
class BaselineData:
    """What the baselines learn from. `sequences`: user index -> training location indices."""
    sequences: dict
    num_locations: int
    horizon: int = 1
    train_examples: list = field(default_factory=list)
    valid_examples: list = field(default_factory=list)
    model_config: object = None
    train_config: object = None


def training_sequences(split_sessions, vocab):
    out = {}
    for user_id, sessions in split_sessions.items():
        u = vocab.user(user_id)
        if u == UNKNOWN:
            continue
        seq = [vocab.location(c.location_id) for s in sessions for c in s.checkins]
        out[u] = [x for x in seq if x != UNKNOWN]
    return out


class FrequencyBaseline(object):
    name = 'frequency'
    num_params = 0

    def __init__(self, sequences, num_locations, horizon=1, eps=SMOOTHING):
        self.num_locations = num_locations
        self.horizon = horizon
        self.eps = eps
        self.counts = {}
        pooled = np.zeros(num_locations)
        for u, seq in sequences.items():
            c = np.bincount(np.asarray(seq, dtype=np.int64), minlength=num_locations).astype(np.float64)
            self.counts[u] = c
            pooled += c
        self.pooled = pooled

    def distribution(self, user):
        c = self.counts.get(user, self.pooled)
        c = c + self.eps
        return c / c.sum()

    def predict(self, batch):
        return np.tile(self.distribution(batch.user), (self.horizon, 1))


class Markov1Baseline(object):
    """First-order transitions per user; states never left in training back off
    to the user's frequency distribution."""
    name = 'markov1'
    num_params = 0

    def __init__(self, sequences, num_locations, horizon=1, eps=SMOOTHING):
        self.num_locations = num_locations
        self.horizon = horizon
        self.frequency = FrequencyBaseline(sequences, num_locations, horizon, eps)
        self.transitions = {}
        for u, seq in sequences.items():
            table = defaultdict(Counter)
            for a, b in zip(seq, seq[1:]):
                table[a][b] += 1
            self.transitions[u] = table

    def counts(self, user):
        out = np.zeros((self.num_locations, self.num_locations))
        for a, row in self.transitions.get(user, {}).items():
            for b, n in row.items():
                out[a, b] = n
        return out

    def row(self, user, state):
        row = self.transitions.get(user, {}).get(state)
        if not row:
            return self.frequency.distribution(user)
        out = np.zeros(self.num_locations)
        for b, n in row.items():
            out[b] = n
        return out / out.sum()

    def transition_matrix(self, user):
        return np.stack([self.row(user, s) for s in range(self.num_locations)])

    def predict(self, batch):
        last = batch.short[-1][0]
        p = np.zeros(self.num_locations)
        p[last] = 1.0
        rows = []
        for _ in range(self.horizon):
            nxt = np.zeros(self.num_locations)
            for s in np.flatnonzero(p):
                nxt += p[s] * self.row(batch.user, s)
            p = nxt
            rows.append(p)
        return np.stack(rows)


class GRUBaseline(object):
    name = 'plain_gru'

    def __init__(self, params, config):
        self.params = params
        self.config = config
        self.num_params = count_params(config)

    def predict(self, batch):
        return forward(batch, self.params, self.config, training=False).data


def fit_baseline(kind, data):
    if kind == 'frequency':
        return FrequencyBaseline(data.sequences, data.num_locations, data.horizon)
    if kind == 'markov1':
        return Markov1Baseline(data.sequences, data.num_locations, data.horizon)
    if kind == 'plain_gru':
        if data.model_config is None or data.train_config is None:
            raise ConfigError('plain_gru needs model and training configs')
        config = replace(data.model_config, model_kind='plain_gru', fine_tune=False)
        ckpt = fit(data.train_examples, data.valid_examples, config, data.train_config)
        return GRUBaseline(ckpt.to_store(config), config)
    raise ConfigError('unsupported baseline {!r}; choose from {}'.format(kind, KINDS))


def baseline_predict(kind, data, batch):
    return fit_baseline(kind, data).predict(batch)
