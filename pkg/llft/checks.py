"""This module contains the checkers: pure functions from a trace to
Verdicts, and the sweep that runs and checks every cell of a fault grid.

Operations of a group are the 'v:', 'd:' and 'u:' ops of view, deliver and
apply records, each tagged with the primary view (pvn) it happened in and
the precedence of the primary that defined that view (prec). A process
between resets is one incarnation.

The surviving branch of a group is found by walking back from the primary
view of highest precedence: the view before v is the one the primary of v
was in when it took over.

"""
import logging
from collections import OrderedDict
from dataclasses import dataclass, field

from llft.config import DEFAULT_CELL, get_grid, load_scenario
from llft.simnet import BudgetExceeded, run

logger = logging.getLogger(__name__)

OP_KINDS = ('view', 'deliver', 'apply')

PROPERTIES = ('T1', 'T2', 'T3', 'T4', 'T5', 'T6',
              'L1', 'L2', 'L3', 'L4', 'L5',
              'GC-safe', 'replay-eq', 'clock-mono', 'reliable-delivery',
              'backup-obedience', 'head-only')

# most records kept in a counterexample
EXCERPT = 8


@dataclass
class Verdict(object):
    prop: str
    ok: bool
    detail: str = ''
    excerpt: list = field(default_factory=list)


def _pass(prop):
    return Verdict(prop, True)


def _fail(prop, detail, records=()):
    return Verdict(prop, False, detail, list(records)[:EXCERPT])


def is_prefix(a, b):
    return b[:len(a)] == a


def is_suffix(a, b):
    return not a or b[-len(a):] == a


def is_infix(a, b):
    "a is a consecutive subsequence of b."
    n = len(a)
    return any(b[i:i + n] == a for i in range(len(b) - n + 1))


def comparable(a, b):
    return is_prefix(a, b) or is_prefix(b, a)


# ---- reading a trace ---------------------------------------------------------

class Incarnation(object):

    """A process between two resets."""

    def __init__(self, p, n):
        self.p = p
        self.n = n
        self.records = []
        self.ended = None  # 'reset', 'crash' or None

    @property
    def label(self):
        return '%s#%d' % (self.p, self.n)

    def ops(self, g, pvn=None, prec=None):
        return [r['op'] for r in self.records
                if r['k'] in OP_KINDS and r.get('g') == g and
                (pvn is None or r['pvn'] == pvn) and
                (prec is None or r['prec'] == prec)]

    def op_records(self, g, pvn, prec):
        return [r for r in self.records
                if r['k'] in OP_KINDS and r.get('g') == g and
                r['pvn'] == pvn and r['prec'] == prec]

    def views(self, g, chain):
        "Chain views this incarnation has operations in."
        return sorted(set(r['pvn'] for r in self.records
                          if r['k'] in OP_KINDS and r.get('g') == g and
                          chain.get(r['pvn']) == r['prec']))

    def __repr__(self):
        return self.label


def incarnations(trace):
    """Split the records of each process at its resets."""
    current = OrderedDict()
    out = []
    for r in trace:
        p = r['p']
        if p == 'sim':
            continue
        inc = current.get(p)
        if inc is None:
            inc = current[p] = Incarnation(p, 0)
            out.append(inc)
        inc.records.append(r)
        if r['k'] in ('reset', 'crash'):
            inc.ended = r['k']
            if r['k'] == 'reset':
                current[p] = Incarnation(p, inc.n + 1)
                out.append(current[p])
    return [i for i in out if i.records]


class Branch(object):

    """The surviving branch of one group: chain[pvn] is the precedence of
    the view that survived, owner[pvn] the incarnation that was its
    primary."""

    def __init__(self, g, incs):
        self.g = g
        self.incs = [i for i in incs
                     if any(r.get('g') == g for r in i.records)]
        self.primaries = OrderedDict()
        for inc in self.incs:
            for r in inc.records:
                if (r['k'] == 'view' and r.get('g') == g and
                        r['role'] == 'primary'):
                    self.primaries.setdefault((r['pvn'], r['prec']),
                                              []).append((inc, r))
        self.chain = {}
        self.owner = {}
        self.broken = None
        if self.primaries:
            self._walk()

    def _walk(self):
        pvn, prec = max(self.primaries, key=lambda k: (k[1], k[0]))
        self.top = pvn
        self.chain[pvn] = prec
        self.owner[pvn] = self.primaries[(pvn, prec)][0][0]
        for v in range(pvn - 1, 0, -1):
            before = [r['prec'] for r in self.owner[v + 1].records
                      if r['k'] in OP_KINDS and r.get('g') == self.g and
                      r['pvn'] == v]
            if before:
                prec = before[-1]
            else:
                precs = [k[1] for k in self.primaries if k[0] == v]
                if not precs:
                    self.broken = v
                    return
                prec = max(precs)
            if (v, prec) not in self.primaries:
                self.broken = v
                return
            self.chain[v] = prec
            self.owner[v] = self.primaries[(v, prec)][0][0]

    def full(self, v):
        "Operations of the primary of view v in v."
        return self.owner[v].ops(self.g, v, self.chain[v])

    def surviving(self, v):
        "Operations of view v carried into v + 1, or None for the last."
        if v + 1 not in self.owner:
            return None
        return self.owner[v + 1].ops(self.g, v, self.chain[v])

    def history(self, upto):
        "The branch's operations through view upto."
        out = []
        for v in sorted(self.chain):
            if v < upto:
                out += self.surviving(v) or []
            elif v == upto:
                out += self.full(v)
        return out

    def members(self, v):
        return [i for i in self.incs if i.ops(self.g, v, self.chain[v])]

    def moved_on(self, inc, v):
        return (v + 1 in self.chain and
                bool(inc.ops(self.g, v + 1, self.chain[v + 1])))

    def is_starter(self, inc, v):
        ops = inc.ops(self.g, v, self.chain[v])
        return bool(ops) and ops[0] == 'v:%d' % v


def groups(trace):
    return sorted(set(r['g'] for r in trace if 'g' in r))


def branches(trace):
    incs = incarnations(trace)
    return [Branch(g, incs) for g in groups(trace)]


# ---- the checkers --------------------------------------------------------

def check_unique_primary(trace, bs):
    """T1: primaries of one group and view other than the surviving one did
    not live on."""
    for b in bs:
        for v in sorted(set(k[0] for k in b.primaries)):
            holders = [(inc, r) for (pvn, _), rs in b.primaries.items()
                       if pvn == v for inc, r in rs]
            if len(holders) < 2:
                continue
            for inc, r in holders:
                if b.chain.get(v) == r['prec'] or inc.ended:
                    continue
                return _fail('T1', "group %d view %d has primaries %s"
                             % (b.g, v, ', '.join(sorted(
                                 i.label for i, _ in holders))),
                             [rec for _, rec in holders])
    return _pass('T1')


def check_starters_agree(trace, bs):
    "T2: sequences of members that started a view are prefix comparable."
    for b in bs:
        for v in sorted(b.chain):
            starters = [i for i in b.members(v) if b.is_starter(i, v)]
            for x in starters:
                for y in starters:
                    a = x.ops(b.g, v, b.chain[v])
                    c = y.ops(b.g, v, b.chain[v])
                    if not comparable(a, c):
                        return _fail(
                            'T2', "group %d view %d: %s and %s diverge"
                            % (b.g, v, x.label, y.label),
                            _diverging(x, y, b.g, v, b.chain[v]))
    return _pass('T2')


def _diverging(x, y, g, v, prec):
    xs, ys = x.op_records(g, v, prec), y.op_records(g, v, prec)
    for i, (a, c) in enumerate(zip(xs, ys)):
        if a['op'] != c['op']:
            return [xs[i], ys[i]]
    return xs[-1:] + ys[-1:]


def check_consecutive(trace, bs):
    """T3: every incarnation runs through consecutive views of the branch
    and its operations are a stretch of the branch's history."""
    for b in bs:
        for inc in b.incs:
            views = inc.views(b.g, b.chain)
            if not views:
                continue
            if views != list(range(views[0], views[-1] + 1)):
                return _fail('T3', "%s skipped a view of group %d: %s"
                             % (inc.label, b.g, views))
            mine = sum([inc.ops(b.g, v, b.chain[v]) for v in views], [])
            if not is_infix(mine, b.history(views[-1])):
                return _fail('T3', "%s is not a stretch of group %d's "
                             "history" % (inc.label, b.g),
                             inc.op_records(b.g, views[-1],
                                            b.chain[views[-1]])[-EXCERPT:])
    return _pass('T3')


def check_updates(trace, bs):
    """T4: a semi-passive update is applied at most once per incarnation
    and in the branch's order."""
    for b in bs:
        for inc in b.incs:
            seen = {}
            for r in inc.records:
                if r['k'] == 'apply' and r.get('g') == b.g:
                    if r['op'] in seen:
                        return _fail('T4', "%s applied %s twice"
                                     % (inc.label, r['op']),
                                     [seen[r['op']], r])
                    seen[r['op']] = r
            views = inc.views(b.g, b.chain)
            if not seen or not views:
                continue
            mine = [op for v in views for op in inc.ops(b.g, v, b.chain[v])
                    if op.startswith('u:')]
            history = [op for op in b.history(views[-1])
                       if op.startswith('u:')]
            if not is_infix(mine, history):
                return _fail('T4', "%s applied updates out of group %d's "
                             "order" % (inc.label, b.g),
                             list(seen.values())[-EXCERPT:])
    return _pass('T4')


def check_answered(trace, bs):
    """T5: the run went quiet with every request of a live client
    answered."""
    ends = trace.of('end')
    if not ends:
        return _fail('T5', "the trace has no end record")
    incs = incarnations(trace)
    crashed = set(i.p for i in incs if i.ended == 'crash')
    answered = set((r['p'], r['rid']) for r in trace.of('reply'))
    missing = [r for r in trace.of('request')
               if r['p'] not in crashed and (r['p'], r['rid']) not in answered]
    if missing:
        return _fail('T5', "%d requests unanswered" % len(missing), missing)
    if not ends[-1]['quiescent']:
        return _fail('T5', "the run ended %s, not quiescent"
                     % ends[-1]['reason'], ends)
    return _pass('T5')


def check_views_progress(trace, bs):
    "T6: the surviving views of every group are 1, 2, ... without a hole."
    for b in bs:
        if not b.primaries:
            return _fail('T6', "group %d never had a primary" % b.g)
        if b.broken is not None:
            return _fail('T6', "group %d: no surviving view %d below %d"
                         % (b.g, b.broken, b.top),
                         [r for _, r in b.primaries.get(
                             (b.top, b.chain[b.top]), [])])
    return _pass('T6')


def check_views(trace, bs):
    """L1 to L5, the relation of each member's sequence in a view to its
    primary's and to what the next primary carried on."""
    failures = OrderedDict()
    for b in bs:
        for v in sorted(b.chain):
            full, surv = b.full(v), b.surviving(v)
            movers = []
            for inc in b.members(v):
                seq = inc.ops(b.g, v, b.chain[v])
                where = "%s in group %d view %d" % (inc.label, b.g, v)
                window = inc.op_records(b.g, v, b.chain[v])[-EXCERPT:]
                if not is_infix(seq, full):
                    failures.setdefault('L1', (where, window))
                if b.moved_on(inc, v):
                    movers.append(seq)
                    if b.is_starter(inc, v):
                        if seq != surv:
                            failures.setdefault('L4', (where, window))
                    elif not is_suffix(seq, surv):
                        failures.setdefault('L2', (where, window))
                elif b.is_starter(inc, v) and not is_prefix(seq, full):
                    failures.setdefault('L3', (where, window))
            for x in movers:
                for y in movers:
                    if not (is_suffix(x, y) or is_suffix(y, x)):
                        failures.setdefault('L5', ("group %d view %d"
                                                   % (b.g, v), []))
    out = []
    for prop in ('L1', 'L2', 'L3', 'L4', 'L5'):
        if prop in failures:
            where, window = failures[prop]
            out.append(_fail(prop, where, window))
        else:
            out.append(_pass(prop))
    return out


def check_gc(trace, bs):
    "GC-safe: nothing was collected before every member had it."
    bad = trace.of('gc-violation')
    if bad:
        return _fail('GC-safe', "%d premature collections" % len(bad), bad)
    return _pass('GC-safe')


def check_digests(trace, bs):
    "replay-eq: every replica has the same state at each synchrony point."
    points = OrderedDict()
    for r in trace.of('digest'):
        points.setdefault(r['point'], []).append(r)
    for point, rs in points.items():
        if len(set(r['value'] for r in rs)) > 1:
            return _fail('replay-eq', "states differ at %s" % point, rs)
    return _pass('replay-eq')


def check_clocks(trace, bs):
    "clock-mono: the clock an incarnation sees never goes back."
    for inc in incarnations(trace):
        last = None
        for r in inc.records:
            if r['k'] != 'clock':
                continue
            if last is not None and r['value'] < last['value']:
                return _fail('clock-mono', "%s clock went from %d to %d"
                             % (inc.label, last['value'], r['value']),
                             [last, r])
            last = r
    return _pass('clock-mono')


def check_reliable(trace, bs):
    """reliable-delivery: within one view of a connection, an incarnation
    delivers every message once and in msn order."""
    for inc in incarnations(trace):
        last = {}
        for r in inc.records:
            if r['k'] != 'deliver':
                continue
            key = (r['conn'], r['view'])
            prev = last.get(key)
            if prev is not None and r['msn'] != prev['msn'] + 1:
                return _fail('reliable-delivery', "%s on %s view %d "
                             "delivered %d after %d"
                             % (inc.label, r['conn'], r['view'], r['msn'],
                                prev['msn']), [prev, r])
            last[key] = r
    return _pass('reliable-delivery')


def check_obedience(trace, bs):
    """backup-obedience: a numbered entry of a primary is delivered as the
    same message everywhere."""
    ops = {}
    for r in trace.of('deliver'):
        key = (r['g'], r['seq'], r['epvn'], r['prec'])
        first = ops.setdefault(key, r)
        if first['op'] != r['op']:
            return _fail('backup-obedience', "group %d entry %d is %s at %s "
                         "and %s at %s" % (r['g'], r['seq'], first['op'],
                                           first['p'], r['op'], r['p']),
                         [first, r])
    return _pass('backup-obedience')


def check_head_only(trace, bs):
    """head-only: a replica consumes recorded operations in the order the
    primaries numbered them."""
    ordered = sorted((r for r in trace.of('order') if 'task' in r),
                     key=lambda r: (r['g'], r['epvn'], r['seq']))
    position = {}
    for i, r in enumerate(ordered):
        position[(r['g'], r['task'], r['op'], r['n'])] = (i, r)
    for inc in incarnations(trace):
        if inc.ended == 'reset':
            continue
        last = None
        for r in inc.records:
            if r['k'] != 'consume':
                continue
            at = position.get((r['g'], r['task'], r['op'], r['n']))
            if at is None:
                return _fail('head-only', "%s consumed %s %s #%d that was "
                             "never ordered" % (inc.label, r['task'],
                                                r['op'], r['n']), [r])
            if last is not None and at[0] <= last[0]:
                return _fail('head-only', "%s consumed out of order"
                             % inc.label, [last[1], at[1], r])
            last = at
    return _pass('head-only')


CHECKERS = (check_unique_primary, check_starters_agree, check_consecutive,
            check_updates, check_answered, check_views_progress,
            check_views, check_gc, check_digests, check_clocks,
            check_reliable, check_obedience, check_head_only)


def check(trace):
    """Every Verdict of trace, in PROPERTIES order."""
    bs = branches(trace)
    verdicts = []
    for checker in CHECKERS:
        res = checker(trace, bs)
        verdicts.extend(res if isinstance(res, list) else [res])
    order = dict((p, i) for i, p in enumerate(PROPERTIES))
    return sorted(verdicts, key=lambda v: order[v.prop])


def passed(verdicts):
    return all(v.ok for v in verdicts)


# ---- statistics and the sweep ----------------------------------------------

def failovers(trace):
    return len([r for r in trace.of('commit') if r['kind'] == 'primary'])


def view_changes(trace):
    """Simulated durations, in µs, from a proposal to the proposer serving
    as primary."""
    out = []
    for inc in incarnations(trace):
        started = None
        for r in inc.records:
            if r['k'] == 'propose' and r['kind'] == 'primary':
                started = r['t']
            elif (r['k'] == 'view' and r['role'] == 'primary' and
                  started is not None):
                out.append(r['t'] - started)
                started = None
    return out


def _summary(durations):
    if not durations:
        return dict(count=0, mean=None, max=None)
    return dict(count=len(durations),
                mean=sum(durations) / float(len(durations)),
                max=max(durations))


def sweep(config, path, seeds, loss=None, progress=None):
    """Run and check every (cell, seed) of the scenario's grid.

    A run that exceeds its budget fails that cell only. progress, when
    given, is called with (cell, seed, verdicts, reason) after each run.
    Returns the report as a dict.

    """
    cells = get_grid(config, loss) or [DEFAULT_CELL]
    seeds = list(seeds)
    report = OrderedDict([('scenario', path), ('seeds', seeds[:1] + seeds[-1:]),
                          ('cells', OrderedDict())])
    durations = []
    lossy = nacked = 0
    for cell in (cells if seeds else []):
        stats = OrderedDict([('runs', 0), ('passed', 0), ('budget', 0),
                             ('failovers', 0), ('nacks', 0),
                             ('failures', [])])
        for seed in seeds:
            sc = load_scenario(config, path, cell, seed)
            try:
                trace = run(sc)
                reason = trace.of('end')[-1]['reason']
            except BudgetExceeded as e:
                logger.warning("%s", e)
                trace, reason = e.trace, 'budget'
                stats['budget'] += 1
            verdicts = check(trace)
            stats['runs'] += 1
            if passed(verdicts) and reason != 'budget':
                stats['passed'] += 1
            else:
                stats['failures'].append(OrderedDict([
                    ('seed', seed), ('reason', reason),
                    ('props', [v.prop for v in verdicts if not v.ok])]))
            stats['failovers'] += failovers(trace)
            durations += view_changes(trace)
            nack = bool(trace.of('nack'))
            stats['nacks'] += nack
            if sc.loss > 0:
                lossy += 1
                nacked += nack
            if progress is not None:
                progress(cell, seed, verdicts, reason)
        report['cells'][cell] = stats
    runs = sum(c['runs'] for c in report['cells'].values())
    ok = sum(c['passed'] for c in report['cells'].values())
    report['runs'] = runs
    report['passed'] = ok
    report['pass_rate'] = ok / float(runs) if runs else None
    report['failovers'] = sum(c['failovers']
                              for c in report['cells'].values())
    report['view_change_us'] = _summary(durations)
    report['lossy_runs_with_nack'] = (nacked / float(lossy) if lossy
                                      else None)
    return report
