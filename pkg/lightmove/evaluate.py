"""Ranking metrics, evaluation reports and the model-vs-baseline table."""
from __future__ import annotations

import io
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import UNKNOWN
from .model import forward

log = logging.getLogger(__name__)

HITS_K = (1, 5, 10)


def rank_of_target(row, target):
    """1-based rank of `target` in a probability row; ties go to the smaller index.

    Returns None for the unknown-location sentinel.
    """
    if target is None or target == UNKNOWN:
        return None
    row = np.asarray(row)
    if not 0 <= target < row.shape[0]:
        raise IndexError('target {} outside {} locations'.format(target, row.shape[0]))
    p = row[target]
    return 1 + int(np.count_nonzero(row > p)) + int(np.count_nonzero(row[:target] == p))


def ranks_of(P, targets):
    """Step-aligned ranks: row k of P is scored against targets[k]."""
    P = np.asarray(P)
    return [rank_of_target(P[k], t) for k, t in enumerate(targets)]


def compute_metrics(ranks, ks=HITS_K):
    """Pooled Hits@k and MRR over every ranked (example, step) target."""
    r = np.asarray([x for x in ranks if x is not None], dtype=np.float64)
    if r.size == 0:
        raise ValueError('no ranked targets to compute metrics over')
    return {
        'hits_at': {k: float(np.mean(r <= k)) for k in ks},
        'mrr': float(np.mean(1.0 / r)),
        'num_targets': int(r.size),
    }


@dataclass
class EvalReport:
    name: str
    hits_at: dict
    mrr: float
    num_params: int = 0
    inference_seconds: float = 0.0
    num_examples: int = 0
    num_targets: int = 0
    num_excluded: int = 0
    threads: int = 1
    extra: dict = field(default_factory=dict)

    def check(self):
        h = [self.hits_at[k] for k in sorted(self.hits_at)]
        if any(a > b for a, b in zip(h, h[1:])):
            raise ValueError('{}: Hits@k not monotone in k: {}'.format(self.name, self.hits_at))
        if not h[0] <= self.mrr <= 1.0:
            raise ValueError('{}: MRR {} outside [Hits@1, 1]'.format(self.name, self.mrr))
        return self

    def to_dict(self):
        d = asdict(self)
        d['hits_at'] = {str(k): v for k, v in sorted(self.hits_at.items())}
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d['hits_at'] = {int(k): v for k, v in d['hits_at'].items()}
        return cls(**d)

    def tsv_lines(self):
        yield 'name\t{}\n'.format(self.name)
        for k in sorted(self.hits_at):
            yield 'hits@{}\t{!r}\n'.format(k, self.hits_at[k])
        yield 'mrr\t{!r}\n'.format(self.mrr)
        for key in ('num_params', 'num_examples', 'num_targets', 'num_excluded', 'threads'):
            yield '{}\t{}\n'.format(key, getattr(self, key))
        yield 'inference_seconds\t{:.6f}\n'.format(self.inference_seconds)

    def write_tsv(self, path):
        with io.open(path, 'w', encoding='utf-8', newline='\n') as f:
            f.writelines(self.tsv_lines())

    def write_json(self, path):
        with io.open(path, 'w', encoding='utf-8') as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)


def model_predictor(params, config):
    """Inference callable for `evaluate_examples`: dropout off, no tape."""
    return lambda batch: forward(batch, params, config, training=False).data


def evaluate_examples(predict, examples, threads=1):
    """Returns (ranks, num_excluded); rank order follows `examples`."""
    def score(ex):
        return ranks_of(predict(ex.batch), ex.targets)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            per_example = list(pool.map(score, examples))
    else:
        per_example = [score(ex) for ex in examples]
    ranks = [r for rs in per_example for r in rs]
    excluded = sum(1 for r in ranks if r is None)
    return ranks, excluded


def timed_evaluate(predict, examples, name='lightmove', num_params=0, threads=1):
    if not examples:
        raise ValueError('{}: no examples to evaluate'.format(name))
    start = time.perf_counter()
    ranks, excluded = evaluate_examples(predict, examples, threads)
    seconds = time.perf_counter() - start
    if excluded:
        log.info('%s: %d targets with unknown locations excluded', name, excluded)
    m = compute_metrics(ranks)
    report = EvalReport(name=name, hits_at=m['hits_at'], mrr=m['mrr'], num_params=num_params,
                        inference_seconds=seconds, num_examples=len(examples),
                        num_targets=m['num_targets'], num_excluded=excluded, threads=threads)
    log.info('%s: hits@1=%.4f hits@5=%.4f hits@10=%.4f mrr=%.4f (%.2fs, %d threads)',
             name, report.hits_at[1], report.hits_at[5], report.hits_at[10], report.mrr,
             seconds, threads)
    return report.check()


def comparison_table(reports):
    """Fixed-width table, one row per report, in the given order."""
    header = '{:<16} {:>10} {:>8} {:>8} {:>8} {:>8} {:>10}'.format(
        'model', '#params', 'hits@1', 'hits@5', 'hits@10', 'mrr', 'seconds')
    lines = [header, '-' * len(header)]
    for r in reports:
        lines.append('{:<16} {:>10} {:>8.4f} {:>8.4f} {:>8.4f} {:>8.4f} {:>10.3f}'.format(
            r.name, r.num_params, r.hits_at[1], r.hits_at[5], r.hits_at[10], r.mrr,
            r.inference_seconds))
    return '\n'.join(lines) + '\n'
