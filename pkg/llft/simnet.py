"""This module contains the simulated world: processes, an unreliable
unordered multicast network between them, faults, and the omniscient
ledger the garbage collection check is judged against.

Everything runs on one simpy Environment in integer microseconds. Each
delivery and each timer wake-up is a simpy process, and a run is a
sequence of env.step() calls counted against the scenario's budget.

"""
import hashlib
import logging
import random
from collections import OrderedDict

import simpy

from llft.apps import ClientApp
from llft.replica import (CLIENT, CRASHED, PROPOSING, RECOVERING,
                          SERVING_BACKUP, SERVING_PRIMARY, Replica)
from llft.trace import Trace
from llft.wire import BirthId, identity, peek_header

logger = logging.getLogger(__name__)

# statuses of a committed member of its group
COMMITTED = (SERVING_PRIMARY, SERVING_BACKUP, PROPOSING, RECOVERING)

# how often, in simulated µs, quiescence is looked for
QUIET_CHECK = 1000

# most clock skew of a process, in µs either way
MAX_SKEW = 2000


class BudgetExceeded(RuntimeError):

    """Raised when a run does not finish within its event budget. The
    partial trace is in .trace."""

    def __init__(self, message, trace):
        super(BudgetExceeded, self).__init__(message)
        self.trace = trace


class LedgerEntry(object):

    "Ground truth about one application message."

    def __init__(self, first, members):
        self.first = first
        # (process, pid) committed in the destination group at first send
        self.members = members
        self.receivers = set()


class SimNet(object):

    """One run of a scenario.

    Processes are named GROUP.INDEX. Server groups are bootstrapped into a
    committed membership with replica 0 as primary, processes started by a
    join fault go through the whole join protocol.

    """

    def __init__(self, scenario, trace=None):
        self.sc = scenario
        self.env = simpy.Environment()
        self.trace = Trace() if trace is None else trace
        self.trace.listeners.append(self._audit)
        self.rng = random.Random('net/%s' % scenario.seed)
        self.loss = scenario.loss
        self.procs = OrderedDict()
        self.registered = {}
        self.group_of = {}
        self.armed = {}
        self.generation = {}
        self.sides = None
        self.attempts = {}
        self.ledger = {}
        self.hosts = 0
        self.events = 0
        self.pending_faults = 0
        self.done_at = None
        self.stop_at = scenario.until

    @property
    def now(self):
        return int(self.env.now)

    # ---- processes ---------------------------------------------------------

    def _replica(self, g, index):
        name = '%s.%d' % (g.name, index)
        self.hosts += 1
        skew = random.Random('skew/%s/%s' % (self.sc.seed, name)).randint(
            -MAX_SKEW, MAX_SKEW)
        client = target = None
        if g.kind == CLIENT:
            server = self.sc.group(g.target)
            client = ClientApp(g.requests, g.request_gap, workload=server.app,
                               keys=g.keys, start=g.start)
            target = server.group_id
        engine = Replica(name, g.group_id, self.hosts, self.sc.timers,
                         kind=g.kind, app=g.app, mode=g.mode,
                         seed=self.sc.seed, skew=skew, trace=self.trace,
                         client=client, target=target)
        self.procs[name] = engine
        self.group_of[name] = g.group_id
        self.registered.setdefault(g.group_id, []).append(name)
        return engine

    def _bootstrap(self):
        for g in self.sc.groups:
            engines = [self._replica(g, i) for i in range(g.replicas)]
            births = [BirthId(e.host_id, 1, 0) for e in engines]
            for e in engines:
                self._run(e.name, e.start(0, births))
        for f in self.sc.faults:
            self.pending_faults += 1
            self.env.process(self._fault(f))

    def _alive(self, name):
        return self.procs[name].status != CRASHED

    def _connected(self, a, b):
        if self.sides is None:
            return True
        last = max(self.sides.values())
        return self.sides.get(a, last) == self.sides.get(b, last)

    # ---- events --------------------------------------------------------

    def _run(self, name, outs):
        for out in outs:
            self._multicast(name, out.group, out.data, out.delay)
        self._arm(name)

    def _arm(self, name):
        engine = self.procs[name]
        at = engine.next_deadline()
        if at is not None:
            at = max(at, self.now)
        if at == self.armed.get(name):
            return
        self.armed[name] = at
        gen = self.generation[name] = self.generation.get(name, 0) + 1
        if at is not None:
            self.env.process(self._wake(name, gen, at))

    def _wake(self, name, gen, at):
        yield self.env.timeout(at - self.now)
        if self.generation.get(name) != gen or not self._alive(name):
            return
        self.armed[name] = None
        self._run(name, self.procs[name].on_timer(self.now))

    def _multicast(self, src, group, data, delay=0):
        header = peek_header(data)
        ident = identity(header)
        if ident is not None and ident not in self.ledger:
            self.ledger[ident] = LedgerEntry(self.now, self._members(group))
        key = ident or hashlib.sha1(data).hexdigest()
        lo, hi = self.sc.latency
        for dst in self.registered.get(group, ()):
            if dst == src or not self._alive(dst):
                continue
            if not self._connected(src, dst):
                continue
            n = self.attempts[(key, dst)] = self.attempts.get((key, dst), 0) + 1
            if n < self.sc.eventual_k and self.rng.random() < self.loss:
                continue
            latency = delay + self.rng.randint(lo, hi)
            if self.sc.reorder and self.rng.random() < self.sc.reorder:
                latency += self.rng.randint(lo, hi) * 4
            self.env.process(self._deliver(src, dst, data, latency, ident))
            if self.sc.duplicate and self.rng.random() < self.sc.duplicate:
                self.env.process(self._deliver(
                    src, dst, data, delay + self.rng.randint(lo, hi), ident))

    def _deliver(self, src, dst, data, latency, ident):
        yield self.env.timeout(latency)
        if not self._alive(dst) or not self._connected(src, dst):
            return
        if ident is not None:
            self.ledger[ident].receivers.add(dst)
            self.trace.emit(self.now, dst, 'recv', ident=list(ident),
                            src=src)
        self._run(dst, self.procs[dst].on_message(self.now, data))

    # ---- faults ----------------------------------------------------------

    def _fault(self, f):
        yield self.env.timeout(max(f.at - self.now, 0))
        if f.kind == 'crash':
            name = '%s.%d' % f.target
            logger.info("%dus: crash %s", self.now, name)
            self.procs[name].crash(self.now)
            self.generation[name] = self.generation.get(name, 0) + 1
            self.trace.emit(self.now, name, 'crash')
        elif f.kind == 'join':
            g = self.sc.group(f.target[0])
            engine = self._replica(g, f.target[1])
            logger.info("%dus: %s joins group %d", self.now, engine.name,
                        g.group_id)
            self._run(engine.name, engine.start(self.now))
        elif f.kind == 'loss':
            logger.info("%dus: loss rate %s", self.now, f.loss)
            self.loss = f.loss
        else:
            self.sides = dict(('%s.%d' % m, i)
                              for i, side in enumerate(f.sides)
                              for m in side)
            self.trace.emit(self.now, 'sim', 'partition', sides=[
                ['%s.%d' % m for m in side] for side in f.sides])
            if f.heal is not None:
                yield self.env.timeout(max(f.heal - self.now, 0))
                self.sides = None
                self.trace.emit(self.now, 'sim', 'heal')
        self.pending_faults -= 1

    # ---- the ledger ------------------------------------------------------

    def _members(self, group):
        return frozenset((n, self.procs[n].birth.pid)
                         for n in self.registered.get(group, ())
                         if self.procs[n].status in COMMITTED)

    def _audit(self, record):
        "A sent message may only be collected once every member has it."
        if record['k'] != 'gc' or record.get('list') != 'sent':
            return
        entry = self.ledger.get(tuple(record['ident']))
        if entry is None:
            return
        missing = sorted(n for n, pid in entry.members
                         if n not in entry.receivers and
                         self.procs[n].birth.pid == pid and
                         self.procs[n].status in COMMITTED)
        if missing:
            self.trace.emit(record['t'], record['p'], 'gc-violation',
                            ident=record['ident'], missing=missing)

    # ---- running ---------------------------------------------------------

    def _clients_done(self):
        return all(e.app.done or e.status == CRASHED
                   for e in self.procs.values() if e.kind == CLIENT)

    def _quiet(self):
        return (self.pending_faults == 0 and
                all(e.is_quiet() for e in self.procs.values()))

    def run(self):
        """Run until quiescence, drain_ms after the clients finished, or
        until. Returns the trace."""
        self._bootstrap()
        env = self.env
        quiescent = False
        next_check = 0
        while True:
            if env.peek() > self.stop_at:
                break
            env.step()
            self.events += 1
            if self.events > self.sc.budget:
                self.trace.emit(self.now, 'sim', 'end', reason='budget',
                                events=self.events, quiescent=False)
                raise BudgetExceeded("%s seed %d: no quiescence within %d "
                                     "events" % (self.sc.name, self.sc.seed,
                                                 self.sc.budget), self.trace)
            if self.done_at is None and self._clients_done():
                self.done_at = self.now
                self.stop_at = min(self.sc.until, self.now + self.sc.drain)
            if self.done_at is not None and self.now >= next_check:
                next_check = self.now + QUIET_CHECK
                if self._quiet():
                    quiescent = True
                    break
        self._finish(quiescent)
        return self.trace

    def _finish(self, quiescent):
        now = self.now
        if quiescent:
            for name, e in self.procs.items():
                if e.kind != CLIENT and e.status in (SERVING_PRIMARY,
                                                     SERVING_BACKUP):
                    self.trace.emit(now, name, 'digest', g=e.group_id,
                                    point='end:%d' % e.group_id,
                                    value=e.app.digest())
        reason = ('quiescent' if quiescent else
                  'drained' if self.done_at is not None else 'until')
        logger.info("%s seed %d: %s at %dus after %d events", self.sc.name,
                    self.sc.seed, reason, now, self.events)
        self.trace.emit(now, 'sim', 'end', reason=reason, events=self.events,
                        quiescent=quiescent)


def run(scenario, trace=None):
    "Simulate scenario, returning its trace."
    return SimNet(scenario, trace).run()
