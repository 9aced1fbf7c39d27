"""LightMove network.

Rows of every state matrix are independent hidden vectors h_i. Weight
matrices are stored out×in, so W·h for a row batch H is ``linear(H, W)``.

Pipeline: encode_short -> encode_long -> build_init -> evolve -> classify.
"""
from __future__ import annotations

import logging
import re
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import numerics as nx
from .lib import ConfigError, DimensionError
from .odeint import SolveSpec, integrate

log = logging.getLogger(__name__)

JUMP_KINDS = ('gru', 'fc')
RESIZE_KINDS = ('slice_last_M', 'fc')
ROW_ORDERS = ('long_first', 'short_first')
JUMP_PLACEMENTS = ('boundaries', 'interior_plus_final')
JUMP_WIRINGS = ('pre_segment', 'self')
MODEL_KINDS = ('lightmove', 'plain_gru')
DTYPES = {'float64': np.float64, 'float32': np.float32}

GATES = ('r', 'z', 'm')
CELL_GATES = ('r', 'z', 'n')

VARIANT_RE = re.compile(r'^([GL])(\d+)([ER])(F?)$')
VARIANT_HELP = "G|L (GRU/FC jumps) + jump count + E|R (Euler/RK4) + optional F (fine-tune), e.g. G2E, L2EF, G0R"


@dataclass
class ModelConfig:
    num_locations: int
    num_users: int
    num_time_slots: int = 24
    d_loc: int = 24
    d_time: int = 8
    d_taxi: int = 8
    session_len: int = 9
    horizon: int = 1
    jumps: int = 2
    jump_kind: str = 'gru'
    solver: SolveSpec = field(default_factory=SolveSpec)
    fine_tune: bool = False
    dropout: float = 0.3
    resize_kind: str = 'slice_last_M'
    resize_window: int = 0
    row_order: str = 'long_first'
    jump_placement: str = 'boundaries'
    jump_wiring: str = 'pre_segment'
    model_kind: str = 'lightmove'
    history_window: int = 36
    init_scale: float = 0.1
    dtype: str = 'float64'

    @property
    def d(self):
        return self.d_loc + self.d_time

    @property
    def window(self):
        return self.resize_window or self.session_len

    @property
    def np_dtype(self):
        return DTYPES[self.dtype]

    def validate(self):
        def choice(name, value, options):
            if value not in options:
                raise ConfigError('{} must be one of {}, got {!r}'.format(name, options, value))

        if self.num_locations < 1 or self.num_users < 1 or self.num_time_slots < 1:
            raise ConfigError('vocabulary sizes must be positive')
        if min(self.d_loc, self.d_time, self.d_taxi) < 1:
            raise ConfigError('embedding sizes must be positive')
        if not 1 <= self.horizon <= self.session_len:
            raise ConfigError('horizon M={} must satisfy 1 <= M <= K={}'.format(
                self.horizon, self.session_len))
        if self.jumps < 0:
            raise ConfigError('number of jumps must be >= 0')
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError('dropout must be in [0, 1)')
        if self.resize_kind == 'fc' and self.window < 1:
            raise ConfigError('resize window must be positive')
        choice('jump_kind', self.jump_kind, JUMP_KINDS)
        choice('resize_kind', self.resize_kind, RESIZE_KINDS)
        choice('row_order', self.row_order, ROW_ORDERS)
        choice('jump_placement', self.jump_placement, JUMP_PLACEMENTS)
        choice('jump_wiring', self.jump_wiring, JUMP_WIRINGS)
        choice('model_kind', self.model_kind, MODEL_KINDS)
        choice('dtype', self.dtype, tuple(DTYPES))
        self.solver.validate()
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d['solver'] = SolveSpec(**d.get('solver', {}))
        return cls(**d)


def parse_variant(code):
    """'G2EF' -> dict(jump_kind='gru', jumps=2, method='euler', fine_tune=True)."""
    m = VARIANT_RE.match(code.strip().upper()) if code else None
    if m is None:
        raise ConfigError('unknown variant code {!r}; expected {}'.format(code, VARIANT_HELP))
    kind, jumps, solver, ft = m.groups()
    return {
        'jump_kind': 'gru' if kind == 'G' else 'fc',
        'jumps': int(jumps),
        'method': 'euler' if solver == 'E' else 'rk4',
        'fine_tune': ft == 'F',
    }


def apply_variant(config, code):
    v = parse_variant(code)
    return replace(config, jump_kind=v['jump_kind'], jumps=v['jumps'],
                   fine_tune=v['fine_tune'], solver=replace(config.solver, method=v['method']))


def variant_code(config):
    return '{}{}{}{}'.format('G' if config.jump_kind == 'gru' else 'L', config.jumps,
                             'E' if config.solver.method == 'euler' else 'R',
                             'F' if config.fine_tune else '')


@dataclass
class HistoryBatch:
    """One user's input: short-term S, long-term L as (location, time slot) pairs."""
    short: list
    long: list
    user: int

    def validate(self, config=None):
        if not self.short:
            raise ValueError('short-term session S must be nonempty')
        if config is not None:
            for loc, slot in list(self.short) + list(self.long):
                if not 0 <= loc < config.num_locations:
                    raise IndexError('location index {} out of range'.format(loc))
                if not 0 <= slot < config.num_time_slots:
                    raise IndexError('time slot {} out of range'.format(slot))
            if not 0 <= self.user < config.num_users:
                raise IndexError('user index {} out of range'.format(self.user))
        return self


# parameters

def segments(config):
    """(t_start, t_end, apply_jump) for the unit interval."""
    J = config.jumps
    if config.jump_placement == 'interior_plus_final':
        n = J + 1
        return [(k / n, (k + 1) / n, True) for k in range(n)]
    if J == 0:
        return [(0.0, 1.0, False)]
    return [(k / J, (k + 1) / J, True) for k in range(J)]


def has_jump_cell(config):
    return config.model_kind == 'lightmove' and any(j for _, _, j in segments(config))


def _gru_cell_shapes(prefix, d_in, d):
    shapes = []
    for g in CELL_GATES:
        shapes += [('{}.W_{}'.format(prefix, g), (d, d_in)),
                   ('{}.U_{}'.format(prefix, g), (d, d)),
                   ('{}.b_{}'.format(prefix, g), (d,))]
    return shapes


def param_shapes(config):
    """Ordered (name, shape) list; the order fixes the random draws at init."""
    d = config.d
    X = config.num_locations
    shapes = [
        ('emb.loc', (X, config.d_loc)),
        ('emb.time', (config.num_time_slots, config.d_time)),
        ('emb.user', (config.num_users, config.d_taxi)),
    ]
    if config.model_kind == 'plain_gru':
        shapes += _gru_cell_shapes('rnn', d, d)
    else:
        for g in GATES:
            shapes += [('ode.W_{}'.format(g), (d, d)),
                       ('ode.U_{}'.format(g), (d, d)),
                       ('ode.b_{}'.format(g), (d,))]
        if has_jump_cell(config):
            if config.jump_kind == 'gru':
                shapes += _gru_cell_shapes('jump', d, d)
            else:
                shapes += [('jump.A', (d, d)), ('jump.a', (d,))]
    shapes += [('out.W', (X, d + config.d_taxi)), ('out.b', (X,))]
    if config.resize_kind == 'fc':
        shapes += [('resize.W', (config.horizon, config.window)),
                   ('resize.b', (config.horizon,))]
    if config.model_kind == 'lightmove' and config.fine_tune:
        shapes += [('gen.W_w', (d * d, d * d + d)), ('gen.W_b', (d * d,)),
                   ('gen.U_w', (d * d, d * d + d)), ('gen.U_b', (d * d,)),
                   ('gen.b_w', (d, 2 * d)), ('gen.b_b', (d,))]
    return shapes


def _is_bias(name):
    leaf = name.split('.', 1)[1]
    if leaf == 'b_w':
        return False
    return leaf in ('a', 'b') or leaf.startswith('b_') or leaf.endswith('_b')


def decays(name):
    """Whether the L2 penalty applies: weights yes, embeddings and biases no."""
    return not (name.startswith('emb.') or _is_bias(name))


def _identity_generator(shape):
    out_dim, in_dim = shape
    w = np.zeros(shape)
    w[:, :out_dim] = np.eye(out_dim)
    return w


def init_params(config, seed=0):
    """Uniform(-init_scale, init_scale) weights and embeddings, zero biases.

    The generator maps start as [I | 0] so the adaptive z-gate equals the
    fixed one at step 0.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    params = nx.ParamStore(config.np_dtype)
    a = config.init_scale
    for name, shape in param_shapes(config):
        decay = decays(name)
        if name in ('gen.W_w', 'gen.U_w', 'gen.b_w'):
            values = _identity_generator(shape)
        elif _is_bias(name):
            values = np.zeros(shape)
        else:
            values = rng.uniform(-a, a, size=shape)
        params.add(name, values, decay=decay)
    return params


def count_params(config):
    """Closed-form scalar count, matching `init_params` tensor by tensor."""
    d = config.d
    X = config.num_locations
    gru_cell = 3 * (2 * d * d + d)
    n = X * config.d_loc + config.num_time_slots * config.d_time + config.num_users * config.d_taxi
    if config.model_kind == 'plain_gru':
        n += gru_cell
    else:
        n += 3 * (2 * d * d + d)
        if has_jump_cell(config):
            n += gru_cell if config.jump_kind == 'gru' else d * d + d
        if config.fine_tune:
            n += 2 * ((d * d + d) * d * d + d * d) + (2 * d * d + d)
    n += (d + config.d_taxi) * X + X
    if config.resize_kind == 'fc':
        n += config.horizon * config.window + config.horizon
    return n


# encoders

def lookup(pairs, params, config, training=False, rng=None):
    """E = lookup(locations) ⊕ lookup(time slots), with dropout γ."""
    locs = [p[0] for p in pairs]
    slots = [p[1] for p in pairs]
    E = nx.concat(nx.embedding(params['emb.loc'], locs),
                  nx.embedding(params['emb.time'], slots), axis='cols')
    return nx.dropout(E, config.dropout, training, rng)


def attention(E):
    return nx.row_softmax(nx.matmul(E, nx.transpose(E)))


def encode_short(S, params, config, training=False, rng=None, return_attention=False):
    if not S:
        raise ValueError('short-term session S must be nonempty')
    E = lookup(S, params, config, training, rng)
    A = attention(E)
    H = nx.matmul(A, E)
    if return_attention:
        return H, A
    return H


def encode_long(L, params, config, training=False, rng=None):
    return lookup(L, params, config, training, rng)


def build_init(H_S, H_L, row_order='short_first'):
    if H_S.shape[1] != H_L.shape[1]:
        raise DimensionError('H_S width {} != H_L width {}'.format(H_S.shape[1], H_L.shape[1]))
    if row_order == 'short_first':
        return nx.concat(H_S, H_L, axis='rows')
    return nx.concat(H_L, H_S, axis='rows')


# NODE layer

def ode_theta(params):
    return {'{}_{}'.format(k, g): params['ode.{}_{}'.format(k, g)]
            for g in GATES for k in ('W', 'U', 'b')}


def _gate(h, W, U, b):
    return nx.add_row(nx.add(nx.linear(h, W), nx.linear(h, U)), b)


def gru_ode_func(h, t, theta):
    """dh/dt = (1 - z) ⊙ (m - h) with GRU-style gates r, z, m.

    `theta` maps W_g/U_g/b_g to tensors; when it carries 'z_adaptive'
    (per-row W'_z, U'_z, b'_z) the z-gate uses those instead.
    """
    r = nx.sigmoid(_gate(h, theta['W_r'], theta['U_r'], theta['b_r']))
    if 'z_adaptive' in theta:
        W_z, U_z, b_z = theta['z_adaptive']
        z = nx.sigmoid(nx.add(nx.add(nx.batched_matvec(W_z, h), nx.batched_matvec(U_z, h)), b_z))
    else:
        z = nx.sigmoid(_gate(h, theta['W_z'], theta['U_z'], theta['b_z']))
    m = nx.tanh(nx.add_row(nx.add(nx.linear(h, theta['W_m']),
                                  nx.linear(nx.hadamard(r, h), theta['U_m'])), theta['b_m']))
    return nx.hadamard(nx.add_const(nx.scale(z, -1.0), 1.0), nx.sub(m, h))


def generate_adaptive(theta, h0, params, config):
    """W'_z, U'_z (rows of vec'd d×d matrices) and b'_z for every row of h0."""
    if not config.fine_tune or 'gen.W_w' not in params:
        raise ConfigError('adaptive parameter generation needs fine_tune enabled')
    n, d = h0.shape
    vec_W = nx.tile_rows(nx.reshape(theta['W_z'], (d * d,)), n)
    vec_U = nx.tile_rows(nx.reshape(theta['U_z'], (d * d,)), n)
    b = nx.tile_rows(theta['b_z'], n)
    W_z = nx.linear(nx.concat(vec_W, h0, axis='cols'), params['gen.W_w'], params['gen.W_b'])
    U_z = nx.linear(nx.concat(vec_U, h0, axis='cols'), params['gen.U_w'], params['gen.U_b'])
    b_z = nx.linear(nx.concat(b, h0, axis='cols'), params['gen.b_w'], params['gen.b_b'])
    return W_z, U_z, b_z


def gru_cell(x, h, params, prefix='jump'):
    p = lambda name: params['{}.{}'.format(prefix, name)]
    r = nx.sigmoid(nx.add_row(nx.add(nx.linear(x, p('W_r')), nx.linear(h, p('U_r'))), p('b_r')))
    z = nx.sigmoid(nx.add_row(nx.add(nx.linear(x, p('W_z')), nx.linear(h, p('U_z'))), p('b_z')))
    n = nx.tanh(nx.add_row(nx.add(nx.linear(x, p('W_n')),
                                  nx.linear(nx.hadamard(r, h), p('U_n'))), p('b_n')))
    one_minus_z = nx.add_const(nx.scale(z, -1.0), 1.0)
    return nx.add(nx.hadamard(one_minus_z, n), nx.hadamard(z, h))


def jump(j, h_prev, params, config):
    if config.jump_kind == 'fc':
        return nx.tanh(nx.linear(j, params['jump.A'], params['jump.a']))
    hidden = h_prev if config.jump_wiring == 'pre_segment' else j
    return gru_cell(j, hidden, params)


def evolve(H_init, params, config):
    if H_init.shape[0] < 1:
        raise DimensionError('evolve needs at least one row')
    theta = ode_theta(params)
    if config.fine_tune:
        theta['z_adaptive'] = generate_adaptive(theta, H_init, params, config)
    f = lambda h, t, p: gru_ode_func(h, t, theta)

    h = H_init
    for t0, t1, apply_jump in segments(config):
        j = integrate(h, config.solver.over(t0, t1), f, params)
        h = jump(j, h, params, config) if apply_jump else j
    return h


# classifier

def rows_used(n, config):
    """Number of trailing rows of H the resize operator reads."""
    if config.resize_kind == 'slice_last_M':
        return config.horizon
    return min(n, config.window)


def classify(H, user, params, config, logits=False):
    """M×|X| prediction rows; `logits=True` returns them before the softmax."""
    n = H.shape[0]
    M = config.horizon
    if config.resize_kind == 'slice_last_M' and n < M:
        raise DimensionError('need at least M={} rows to slice, got {}'.format(M, n))
    e_c = nx.embedding(params['emb.user'], [user])
    X = nx.concat(H, nx.tile_rows(e_c, n), axis='cols')
    if config.resize_kind == 'slice_last_M':
        H_last = nx.slice_rows(X, n - M)
    else:
        W = config.window
        tail = nx.slice_rows(X, max(0, n - W))
        if tail.shape[0] < W:
            pad = nx.constant(np.zeros((W - tail.shape[0], X.shape[1]), dtype=X.dtype))
            tail = nx.concat(pad, tail, axis='rows')
        ones = nx.constant(np.ones((1, X.shape[1]), dtype=X.dtype))
        bias = nx.matmul(nx.reshape(params['resize.b'], (M, 1)), ones)
        H_last = nx.add(nx.matmul(params['resize.W'], tail), bias)
    Z = nx.linear(H_last, params['out.W'], params['out.b'])
    return Z if logits else nx.row_softmax(Z)


def _plain_gru_states(batch, params, config, training, rng):
    seq = (list(batch.long) + list(batch.short))[-config.history_window:]
    E = lookup(seq, params, config, training, rng)
    need = rows_used(len(seq), config)
    if len(seq) < need:
        raise DimensionError('need at least {} history entries, got {}'.format(need, len(seq)))
    h = nx.constant(np.zeros((1, config.d), dtype=config.np_dtype))
    H = None
    for t in range(len(seq)):
        h = gru_cell(nx.slice_rows(E, t, t + 1), h, params, prefix='rnn')
        if t >= len(seq) - need:
            H = h if H is None else nx.concat(H, h, axis='rows')
    return H


def forward(batch, params, config, training=False, rng=None, logits=False):
    """Prediction matrix P (M×|X|) for one HistoryBatch, or its logits."""
    batch.validate(config)
    if training and rng is None:
        rng = np.random.default_rng(0)
    if config.model_kind == 'plain_gru':
        H = _plain_gru_states(batch, params, config, training, rng)
        return classify(H, batch.user, params, config, logits)

    H_S = encode_short(batch.short, params, config, training, rng)
    H_L = encode_long(batch.long, params, config, training, rng)
    H_init = build_init(H_S, H_L, config.row_order)
    n = H_init.shape[0]
    if config.resize_kind == 'slice_last_M' and n < config.horizon:
        raise DimensionError('need at least M={} rows to slice, got {}'.format(config.horizon, n))
    # only rows read by the resize are evolved
    used = rows_used(n, config)
    if used < n:
        H_init = nx.slice_rows(H_init, n - used)
    H = evolve(H_init, params, config)
    return classify(H, batch.user, params, config, logits)
