"""Per-user training loop: cross-entropy + L2, Adam with epoch-wise lr decay,
validation after every epoch, best-checkpoint retention."""
from __future__ import annotations

import io
import logging
from dataclasses import asdict, dataclass

import numpy as np
from tqdm import tqdm

from . import lib
from . import numerics as nx
from .checkpoint import Checkpoint
from .data import UNKNOWN
from .evaluate import compute_metrics, evaluate_examples, model_predictor
from .lib import ConfigError, DimensionError
from .model import forward, init_params, variant_code

log = logging.getLogger(__name__)

METRICS = ('mrr', 'hits1')
LOG_COLUMNS = ('epoch', 'lr', 'train_loss', 'valid_hits1', 'valid_mrr')


@dataclass
class TrainConfig:
    lr: float = 0.01
    decay: float = 0.9
    min_lr: float = 0.0005
    l2: float = 1e-5
    epochs: int = 100
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    metric: str = 'mrr'
    converge_tol: float = 1e-5
    converge_epochs: int = 3
    threads: int = 1

    def validate(self):
        if not 0.0 < self.decay <= 1.0:
            raise ConfigError('lr decay must be in (0, 1], got {}'.format(self.decay))
        if not 0.0 < self.min_lr <= self.lr:
            raise ConfigError('need 0 < min_lr <= lr, got {} and {}'.format(self.min_lr, self.lr))
        if self.l2 < 0 or self.epochs < 1:
            raise ConfigError('need l2 >= 0 and at least one epoch')
        if self.metric not in METRICS:
            raise ConfigError('checkpoint metric must be one of {}'.format(METRICS))
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def lr_schedule(config, epochs=None):
    """Learning rate used in each epoch: λ, λα, λα², ... floored at min_lr."""
    lrs = []
    lr = config.lr
    for _ in range(epochs or config.epochs):
        lrs.append(lr)
        lr = max(lr * config.decay, config.min_lr)
    return lrs


# objective

def l2_penalty(params):
    total = None
    for t in params.decayed():
        sq = nx.square_sum(t)
        total = sq if total is None else nx.add(total, sq)
    return total


def loss(P, targets, params=None, l2=0.0, logits=False):
    """Mean -log P[row, target] over known targets plus l2·Σ‖w‖² over decayed weights.

    With `logits=True`, P holds pre-softmax scores and -log P comes from a
    logsumexp log-softmax, which stays finite where probabilities underflow.
    """
    rows = [k for k, t in enumerate(targets) if t != UNKNOWN]
    if not rows:
        raise ValueError('every target is unknown; nothing to score')
    if max(rows) >= P.shape[0]:
        raise DimensionError('{} targets for a {}-row prediction'.format(len(targets), P.shape[0]))
    cols = [targets[k] for k in rows]
    if logits:
        picked = nx.take(nx.row_log_softmax(P), rows, cols)
    else:
        picked = nx.log(nx.take(P, rows, cols))
    data = nx.scale(nx.mean(picked), -1.0)
    if l2 and params is not None:
        reg = l2_penalty(params)
        if reg is not None:
            data = nx.add(data, nx.scale(reg, l2))
    return data


class Adam(object):
    """Adam with bias correction; moments keyed by parameter name."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, params, grads, lr):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p.data)
            if g.shape != p.shape:
                raise DimensionError('gradient for {} has shape {}, parameter {}'.format(
                    name, lib.shape_str(g.shape), lib.shape_str(p.shape)))
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= (lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)

    def state(self):
        return ({k: a.copy() for k, a in self.m.items()},
                {k: a.copy() for k, a in self.v.items()}, self.t)

    def load(self, m, v, t):
        self.m = {k: np.array(a) for k, a in m.items()}
        self.v = {k: np.array(a) for k, a in v.items()}
        self.t = t


def adam_step(params, grads, optimizer, lr):
    optimizer.step(params, grads, lr)
    return params, optimizer


# loop

def _scorable(examples):
    return [ex for ex in examples if any(t != UNKNOWN for t in ex.targets)]


def train_epoch(examples, params, optimizer, model_config, train_config, lr, shuffle_rng, dropout_rng):
    """One Adam step per example in a shuffled order; returns the mean loss."""
    if not examples:
        raise ValueError('train_epoch needs at least one example')
    order = shuffle_rng.permutation(len(examples))
    total = 0.0
    for i in tqdm(order, desc='examples', leave=False, disable=not lib.debug):
        ex = examples[i]
        with nx.Tape() as tape:
            Z = forward(ex.batch, params, model_config, training=True, rng=dropout_rng,
                        logits=True)
            L = loss(Z, ex.targets, params, train_config.l2, logits=True)
        grads = nx.backward(L, tape)
        adam_step(params, params.gradients(grads), optimizer, lr)
        total += L.item()
    return total / len(examples)


def validate(examples, params, model_config, threads=1):
    """{'hits1', 'mrr'} on `examples` with dropout off; parameters are read only."""
    ranks, _ = evaluate_examples(model_predictor(params, model_config), examples, threads)
    m = compute_metrics(ranks)
    return {'hits1': m['hits_at'][1], 'mrr': m['mrr']}


def converged(losses, tol=1e-5, epochs=3):
    if len(losses) < epochs + 1:
        return False
    recent = losses[-(epochs + 1):]
    for prev, cur in zip(recent, recent[1:]):
        if abs(cur - prev) / max(abs(prev), 1e-12) >= tol:
            return False
    return True


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    valid_hits1: float
    valid_mrr: float

    def tsv(self):
        return '{}\t{!r}\t{!r}\t{!r}\t{!r}\n'.format(
            self.epoch, self.lr, self.train_loss, self.valid_hits1, self.valid_mrr)


def write_training_log(path, history):
    with io.open(path, 'w', encoding='utf-8', newline='\n') as f:
        f.write('\t'.join(LOG_COLUMNS) + '\n')
        for rec in history:
            f.write(rec.tsv())


def read_training_log(path):
    with io.open(path, 'r', encoding='utf-8') as f:
        lines = f.read().splitlines()
    out = []
    for line in lines[1:]:
        e, lr, tl, h1, mrr = line.split('\t')
        out.append(EpochRecord(int(e), float(lr), float(tl), float(h1), float(mrr)))
    return out


@lib.timeit
def fit(train_examples, valid_examples, model_config, train_config, params=None, history=None):
    """Train and return the Checkpoint with the best validation metric.

    `history`, if given, receives one EpochRecord per epoch run.
    """
    model_config.validate()
    train_config.validate()
    train_examples = _scorable(train_examples)
    valid_examples = _scorable(valid_examples)
    if not train_examples or not valid_examples:
        raise ValueError('fit needs training and validation examples, got {} and {}'.format(
            len(train_examples), len(valid_examples)))
    if params is None:
        params = init_params(model_config, seed=train_config.seed)
    shuffle_ss, dropout_ss = np.random.SeedSequence(train_config.seed).spawn(2)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    dropout_rng = np.random.default_rng(dropout_ss)
    optimizer = Adam(train_config.beta1, train_config.beta2, train_config.eps)
    log.info('training %s: %d params, %d train / %d valid examples',
             variant_code(model_config), params.num_scalars(), len(train_examples),
             len(valid_examples))

    best = None
    best_score = -np.inf
    losses = []
    if history is None:
        history = []
    for epoch, lr in enumerate(lr_schedule(train_config), 1):
        train_loss = train_epoch(train_examples, params, optimizer, model_config, train_config,
                                 lr, shuffle_rng, dropout_rng)
        scores = validate(valid_examples, params, model_config, train_config.threads)
        history.append(EpochRecord(epoch, lr, train_loss, scores['hits1'], scores['mrr']))
        log.info('epoch %d lr=%.6g loss=%.6f valid hits@1=%.4f mrr=%.4f',
                 epoch, lr, train_loss, scores['hits1'], scores['mrr'])
        if scores[train_config.metric] > best_score:
            best_score = scores[train_config.metric]
            m, v, t = optimizer.state()
            best = Checkpoint(params=params.snapshot(), epoch=epoch, valid_mrr=scores['mrr'],
                              adam_m=m, adam_v=v, adam_t=t,
                              meta={'valid_hits1': scores['hits1'],
                                    'variant': variant_code(model_config),
                                    'train_config': train_config.to_dict()})
        losses.append(train_loss)
        if converged(losses, train_config.converge_tol, train_config.converge_epochs):
            log.info('loss converged after %d epochs', epoch)
            break
    return best
