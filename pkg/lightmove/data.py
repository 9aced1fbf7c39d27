"""Check-in logs, sessions, chronological splits and training examples.

Log format: one check-in per line, ``user_id<TAB>unix_seconds<TAB>location_id``.
"""
from __future__ import annotations

import io
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .lib import ConfigError, ParseError
from .model import HistoryBatch

log = logging.getLogger(__name__)

UNKNOWN = -1
SEGMENT_MODES = ('fixed_count', 'gap_threshold', 'duration')
SPLIT_NAMES = ('train', 'valid', 'test')
HISTORY_RATIO = 0.7


@dataclass(frozen=True)
class CheckIn:
    user_id: str
    timestamp: int
    location_id: str


@dataclass
class Session:
    checkins: list
    index: int = 0

    def __len__(self):
        return len(self.checkins)

    def start(self):
        return self.checkins[0].timestamp


@dataclass
class Trajectory:
    user_id: str
    sessions: list = field(default_factory=list)

    def checkins(self):
        return [c for s in self.sessions for c in s.checkins]


@dataclass
class SplitSpec:
    ratios: tuple = (0.70, 0.15, 0.15)
    mode: str = 'fixed_count'
    session_len: int = 9
    gap_seconds: int = 10 * 3600
    window_seconds: int = 45 * 60

    def validate(self):
        if len(self.ratios) != 3 or abs(sum(self.ratios) - 1.0) > 1e-9 or min(self.ratios) < 0:
            raise ConfigError('split ratios must be three nonnegative numbers summing to 1')
        if self.mode not in SEGMENT_MODES:
            raise ConfigError('segmentation mode must be one of {}'.format(SEGMENT_MODES))
        if self.session_len < 1 or self.gap_seconds < 0 or self.window_seconds < 1:
            raise ConfigError('invalid segmentation parameters')
        return self

    def to_dict(self):
        d = asdict(self)
        d['ratios'] = list(self.ratios)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d['ratios'] = tuple(d['ratios'])
        return cls(**d)


class Vocabulary(object):
    """User and location ids to dense indices, in first-appearance order."""

    def __init__(self, users=(), locations=()):
        self.users = {}
        self.locations = {}
        for u in users:
            self.add_user(u)
        for loc in locations:
            self.add_location(loc)

    def add_user(self, user_id):
        return self.users.setdefault(user_id, len(self.users))

    def add_location(self, location_id):
        return self.locations.setdefault(location_id, len(self.locations))

    def add(self, checkin):
        self.add_user(checkin.user_id)
        self.add_location(checkin.location_id)

    def location(self, location_id):
        return self.locations.get(location_id, UNKNOWN)

    def user(self, user_id):
        return self.users.get(user_id, UNKNOWN)

    def location_ids(self):
        return list(self.locations)

    def user_ids(self):
        return list(self.users)

    def to_dict(self):
        return {'users': self.user_ids(), 'locations': self.location_ids()}

    @classmethod
    def from_dict(cls, d):
        return cls(d['users'], d['locations'])


# parsing

def parse_logs(lines):
    """Parse TAB separated check-ins. Returns (records, vocabulary)."""
    records = []
    vocab = Vocabulary()
    for line_no, line in enumerate(lines, 1):
        line = line.rstrip('\n').rstrip('\r')
        if not line.strip():
            raise ParseError(line_no, 'blank line')
        fields = line.split('\t')
        if len(fields) != 3:
            raise ParseError(line_no, 'expected 3 tab-separated fields, got {}'.format(len(fields)))
        user_id, ts, location_id = fields
        try:
            timestamp = int(ts)
        except ValueError:
            raise ParseError(line_no, 'timestamp {!r} is not an integer'.format(ts))
        if timestamp < 0:
            raise ParseError(line_no, 'negative timestamp {}'.format(timestamp))
        if not user_id or not location_id:
            raise ParseError(line_no, 'empty user or location id')
        rec = CheckIn(user_id, timestamp, location_id)
        vocab.add(rec)
        records.append(rec)
    return records, vocab


def serialize_logs(records):
    for r in records:
        yield '{}\t{}\t{}\n'.format(r.user_id, r.timestamp, r.location_id)


def read_logs(path):
    with io.open(path, 'r', encoding='utf-8', newline='\n') as f:
        return parse_logs(f)


def write_logs(path, records):
    with io.open(path, 'w', encoding='utf-8', newline='\n') as f:
        f.writelines(serialize_logs(records))


def group_by_user(records):
    users = {}
    for r in records:
        users.setdefault(r.user_id, []).append(r)
    return users


# sessions and splits

def segment_sessions(checkins, spec):
    if not checkins:
        return Trajectory(user_id=None)
    ordered = sorted(checkins, key=lambda c: c.timestamp)
    runs = []
    if spec.mode == 'fixed_count':
        K = spec.session_len
        runs = [ordered[i:i + K] for i in range(0, len(ordered), K)]
    elif spec.mode == 'gap_threshold':
        runs = [[ordered[0]]]
        for prev, cur in zip(ordered, ordered[1:]):
            if cur.timestamp - prev.timestamp > spec.gap_seconds:
                runs.append([])
            runs[-1].append(cur)
    else:
        buckets = {}
        for c in ordered:
            buckets.setdefault(c.timestamp // spec.window_seconds, []).append(c)
        runs = [buckets[k] for k in sorted(buckets)]
    sessions = [Session(run, i) for i, run in enumerate(runs)]
    return Trajectory(ordered[0].user_id, sessions)


def split_points(n, ratios=(0.70, 0.15, 0.15)):
    a = int(math.floor(n * ratios[0] + 1e-9))
    b = int(math.floor(n * (ratios[0] + ratios[1]) + 1e-9))
    return a, b


def chronological_split(trajectory, ratios=(0.70, 0.15, 0.15)):
    """(train, valid, test) session lists, or None when the user has < 3 sessions."""
    n = len(trajectory.sessions)
    if n < 3:
        log.warning('dropping user %s: %d sessions, need at least 3', trajectory.user_id, n)
        return None
    a, b = split_points(n, ratios)
    s = trajectory.sessions
    return s[:a], s[a:b], s[b:]


def time_slot(timestamp, num_slots=24):
    return int((timestamp % 86400) * num_slots // 86400)


# examples

@dataclass
class Example:
    batch: HistoryBatch
    targets: list
    user_id: str = ''


def _pairs(checkins, vocab, num_slots):
    out = []
    for c in checkins:
        loc = vocab.location(c.location_id)
        if loc != UNKNOWN:
            out.append((loc, time_slot(c.timestamp, num_slots)))
    return out


def _example_at(sessions, boundary, M, vocab, num_slots, K, user_id):
    S_ci = sessions[boundary - 1].checkins
    L_ci = [c for s in sessions[:boundary - 1] for c in s.checkins]
    Y_ci = [c for s in sessions[boundary:] for c in s.checkins]
    if len(Y_ci) < M:
        log.warning('skipping example for %s: %d targets, need %d', user_id, len(Y_ci), M)
        return None
    if K and len(S_ci) > K:
        L_ci, S_ci = L_ci + S_ci[:-K], S_ci[-K:]
    S = _pairs(S_ci, vocab, num_slots)
    if not S:
        log.warning('skipping example for %s: recent session has only unknown locations', user_id)
        return None
    user = vocab.user(user_id)
    if user == UNKNOWN:
        log.warning('skipping example for %s: user absent from training data', user_id)
        return None
    targets = [vocab.location(c.location_id) for c in Y_ci[:M]]
    return Example(HistoryBatch(S, _pairs(L_ci, vocab, num_slots), user), targets, user_id)


def history_boundary(n):
    return min(n - 1, max(1, int(math.floor(n * HISTORY_RATIO + 1e-9))))


def make_example(sessions, M, vocab, num_slots=24, K=None, user_id=None):
    """First 70% of the split's sessions form X (S = its last session, L the rest),
    the first M check-ins after them are the targets. None when skipped."""
    if user_id is None and sessions:
        user_id = sessions[0].checkins[0].user_id
    if len(sessions) < 2:
        log.warning('skipping example for %s: %d sessions in split, need 2', user_id, len(sessions))
        return None
    return _example_at(sessions, history_boundary(len(sessions)), M, vocab, num_slots, K, user_id)


def latest_history(sessions, vocab, num_slots=24, K=None):
    """HistoryBatch over all of a user's sessions: S = the newest one."""
    if not sessions:
        raise ValueError('no sessions to build a history from')
    user_id = sessions[0].checkins[0].user_id
    S_ci = sessions[-1].checkins
    L_ci = [c for s in sessions[:-1] for c in s.checkins]
    if K and len(S_ci) > K:
        L_ci, S_ci = L_ci + S_ci[:-K], S_ci[-K:]
    S = _pairs(S_ci, vocab, num_slots)
    if not S:
        raise ValueError('latest session of {} has only unknown locations'.format(user_id))
    return HistoryBatch(S, _pairs(L_ci, vocab, num_slots), vocab.user(user_id))


def build_examples(split_sessions, M, vocab, num_slots=24, K=None, sliding=False):
    """Examples for every user of one split; `sliding` emits one per session boundary."""
    examples = []
    for user_id, sessions in split_sessions.items():
        if not sliding:
            ex = make_example(sessions, M, vocab, num_slots, K, user_id)
            if ex is not None:
                examples.append(ex)
            continue
        for boundary in range(1, len(sessions)):
            ex = _example_at(sessions, boundary, M, vocab, num_slots, K, user_id)
            if ex is not None:
                examples.append(ex)
    return examples


# synthetic fleet

def _neighbors(cell, W, H):
    r, c = divmod(cell, W)
    out = []
    for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        rr, cc = r + dr, c + dc
        if 0 <= rr < H and 0 <= cc < W:
            out.append(rr * W + cc)
    return out


def _loop_cells(r0, c0, h, w, W):
    """Border of the h x w block with top-left cell (r0, c0), clockwise."""
    top = [(r0, c) for c in range(c0, c0 + w)]
    right = [(r, c0 + w - 1) for r in range(r0 + 1, r0 + h)]
    bottom = [(r0 + h - 1, c) for c in range(c0 + w - 2, c0 - 1, -1)]
    left = [(r, c0) for r in range(r0 + h - 2, r0, -1)]
    return [r * W + c for r, c in top + right + bottom + left]


def _make_line(rng, home, W, H, route_len):
    """Self-avoiding walk out from `home`, then back along the same cells."""
    path = [home]
    while len(path) < route_len:
        options = [n for n in _neighbors(path[-1], W, H) if n not in path]
        if not options:
            break
        path.append(int(rng.choice(options)))
    if len(path) == 1:
        path.append(_neighbors(home, W, H)[0])
    return path + path[-2:0:-1]


def _make_route(rng, home, W, H, route_len):
    """Closed loop starting at `home` around the border of a grid rectangle.

    No cell repeats within a loop, so every cell has a single successor. The
    loop length is the rectangle perimeter closest to `route_len`; direction
    and ties are drawn from `rng`. Grids one cell wide go out and back instead.
    """
    r, c = divmod(home, W)
    loops = []
    for h in range(2, H + 1):
        for w in range(2, W + 1):
            for r0 in range(max(0, r - h + 1), min(r, H - h) + 1):
                for c0 in range(max(0, c - w + 1), min(c, W - w) + 1):
                    cells = _loop_cells(r0, c0, h, w, W)
                    if home in cells:
                        loops.append(cells)
    if not loops:
        return _make_line(rng, home, W, H, route_len)
    best = min(abs(len(cells) - route_len) for cells in loops)
    loops = [cells for cells in loops if abs(len(cells) - route_len) == best]
    cells = loops[int(rng.integers(len(loops)))]
    if rng.random() < 0.5:
        cells = cells[::-1]
    i = cells.index(home)
    return cells[i:] + cells[:i]


def synth_generate(grid=(4, 4), cabs=5, routes_per_cab=1, noise=0.0, steps=2000,
                   interval=300, seed=0, route_len=12, start=1600000000, counters=None):
    """Fleet of cabs cycling fixed routes over grid cells (cell id = location id).

    With probability `noise` a log reports a random neighbor of the intended
    cell instead. `counters`, if given, receives generator bookkeeping.
    """
    W, H = grid
    if W < 1 or H < 1 or W * H < 2:
        raise ConfigError('grid {}x{} needs at least 2 cells'.format(W, H))
    if not 0.0 <= noise < 1.0:
        raise ConfigError('noise must be in [0, 1), got {}'.format(noise))
    if cabs < 1 or steps < 0 or interval < 1 or routes_per_cab < 1 or route_len < 2:
        raise ConfigError('invalid fleet parameters')

    rng = np.random.default_rng(seed)
    records = []
    deviations = 0
    periods = {}
    for c in range(cabs):
        cab = 'cab{:03d}'.format(c)
        home = int(rng.integers(W * H))
        cycle = []
        for _ in range(routes_per_cab):
            cycle += _make_route(rng, home, W, H, route_len)
        periods[cab] = len(cycle)
        for k in range(steps):
            intended = cycle[k % len(cycle)]
            loc = intended
            if noise > 0.0 and rng.random() < noise:
                loc = int(rng.choice(_neighbors(intended, W, H)))
                deviations += 1
            records.append(CheckIn(cab, start + k * interval, str(loc)))

    if counters is not None:
        counters.update(
            logs=len(records),
            users=cabs,
            locations=len({r.location_id for r in records}),
            deviations=deviations,
            periods=periods,
        )
    return records


def dataset_stats(trajectories):
    trajectories = list(trajectories)
    sessions = [s for t in trajectories for s in t.sessions]
    logs = sum(len(s) for s in sessions)
    locations = {c.location_id for s in sessions for c in s.checkins}
    users = {t.user_id for t in trajectories if t.sessions}
    return {
        'num_users': len(users),
        'num_locations': len(locations),
        'num_logs': logs,
        'num_sessions': len(sessions),
        'avg_session_len': logs / len(sessions) if sessions else 0.0,
    }


# bundles

@dataclass
class Bundle:
    vocab: Vocabulary
    spec: SplitSpec
    splits: dict
    stats: dict = field(default_factory=dict)

    def split(self, name):
        return self.splits[name]

    def examples(self, name, M, num_slots=24, K=None, sliding=False):
        return build_examples(self.splits[name], M, self.vocab, num_slots, K, sliding)


def prepare(records, spec):
    """Segment, split and index a log. Returns a Bundle."""
    spec.validate()
    splits = {name: {} for name in SPLIT_NAMES}
    trajectories = []
    for user_id, checkins in group_by_user(records).items():
        traj = segment_sessions(checkins, spec)
        parts = chronological_split(traj, spec.ratios)
        if parts is None:
            continue
        trajectories.append(traj)
        for name, part in zip(SPLIT_NAMES, parts):
            splits[name][user_id] = part

    vocab = Vocabulary()
    for user_id, sessions in splits['train'].items():
        vocab.add_user(user_id)
        for s in sessions:
            for c in s.checkins:
                vocab.add_location(c.location_id)
    return Bundle(vocab, spec, splits, dataset_stats(trajectories))


def write_bundle(directory, bundle, extra=None):
    os.makedirs(directory, exist_ok=True)
    for name in SPLIT_NAMES:
        records = [c for sessions in bundle.splits[name].values()
                   for s in sessions for c in s.checkins]
        write_logs(os.path.join(directory, name + '.tsv'), records)
    manifest = {
        'vocabulary': bundle.vocab.to_dict(),
        'split_spec': bundle.spec.to_dict(),
        'stats': bundle.stats,
    }
    if extra:
        manifest.update(extra)
    with io.open(os.path.join(directory, 'bundle.json'), 'w', encoding='utf-8') as f:
        json.dump(manifest, f, indent=2, sort_keys=True)


def read_bundle(directory):
    with io.open(os.path.join(directory, 'bundle.json'), 'r', encoding='utf-8') as f:
        manifest = json.load(f)
    spec = SplitSpec.from_dict(manifest['split_spec'])
    vocab = Vocabulary.from_dict(manifest['vocabulary'])
    splits = {}
    for name in SPLIT_NAMES:
        records, _ = read_logs(os.path.join(directory, name + '.tsv'))
        splits[name] = {u: segment_sessions(ci, spec).sessions
                        for u, ci in group_by_user(records).items()}
    return Bundle(vocab, spec, splits, manifest.get('stats', {}))
