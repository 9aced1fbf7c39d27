"""Fixed-step Euler / RK4 integration built from recorded tensor ops."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx
from .lib import ConfigError, NumericError

METHODS = ('euler', 'rk4')


@dataclass
class SolveSpec:
    method: str = 'euler'
    step_size: float = 0.25
    t_start: float = 0.0
    t_end: float = 1.0

    def validate(self):
        if self.method not in METHODS:
            raise ConfigError('solver method must be one of {}, got {!r}'.format(
                METHODS, self.method))
        if not 0.0 < self.step_size <= 1.0:
            raise ConfigError('step size must be in (0, 1], got {}'.format(self.step_size))
        if self.t_end < self.t_start:
            raise ConfigError('segment [{}, {}] runs backwards'.format(self.t_start, self.t_end))
        return self

    def over(self, t_start, t_end):
        return SolveSpec(self.method, self.step_size, t_start, t_end)

    def steps(self):
        """(t, s) for every step; the last step is shortened to land on t_end."""
        span = self.t_end - self.t_start
        if span <= 0.0:
            return []
        n = max(1, int(math.ceil(span / self.step_size - 1e-9)))
        out = []
        for k in range(n):
            t = self.t_start + k * self.step_size
            s = self.step_size if k < n - 1 else self.t_end - t
            out.append((t, s))
        return out

    def to_dict(self):
        return asdict(self)


def _check_finite(dh, t, stage):
    if not np.all(np.isfinite(dh.data)):
        raise NumericError('non-finite dynamics output at t={:.6g} ({})'.format(t, stage))
    return dh


def euler_step(h, t, s, f, params):
    if s <= 0:
        raise ValueError('step size must be positive, got {}'.format(s))
    k1 = _check_finite(f(h, t, params), t, 'euler')
    return nx.add(h, nx.scale(k1, s))


def rk4_step(h, t, s, f, params):
    if s <= 0:
        raise ValueError('step size must be positive, got {}'.format(s))
    f1 = _check_finite(f(h, t, params), t, 'rk4 stage 1')
    f2 = _check_finite(f(nx.add(h, nx.scale(f1, s / 2)), t + s / 2, params), t, 'rk4 stage 2')
    f3 = _check_finite(f(nx.add(h, nx.scale(f2, s / 2)), t + s / 2, params), t, 'rk4 stage 3')
    f4 = _check_finite(f(nx.add(h, nx.scale(f3, s)), t + s, params), t, 'rk4 stage 4')
    incr = nx.add(nx.add(f1, nx.scale(f2, 2.0)), nx.add(nx.scale(f3, 2.0), f4))
    return nx.add(h, nx.scale(incr, s / 6.0))


STEPPERS = {'euler': euler_step, 'rk4': rk4_step}


def integrate(h0, spec, f, params, return_path=False):
    """Integrate dh/dt = f(h, t, params) over [spec.t_start, spec.t_end].

    With `return_path` the states after every step are returned too,
    starting with h0.
    """
    spec.validate()
    step = STEPPERS[spec.method]
    h = h0
    path = [h0]
    for t, s in spec.steps():
        h = step(h, t, s, f, params)
        if return_path:
            path.append(h)
    if return_path:
        return h, path
    return h
