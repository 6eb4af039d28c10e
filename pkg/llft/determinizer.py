"""This module contains the record and replay of non-deterministic
operations as (T, O, N, D) tuples: task T performed operation O for the
N-th time with outcome D.

The primary executes each intercepted call for real and records the
outcome. A backup suspends the calling task until the tuple for exactly
that (T, O, N) heads the queue of O, then imposes the recorded outcome.

Application tasks are generators that yield the calls below and are
resumed with the outcome D (a dict).

"""
import logging
from collections import deque
from dataclasses import dataclass, field

from llft.buffers import BACKUP, PRIMARY
from llft.wire import MessageType, MsgOrder, OrderType, TupleOrder

logger = logging.getLogger(__name__)

EBUSY, EAGAIN, EWOULDBLOCK = 'EBUSY', 'EAGAIN', 'EWOULDBLOCK'


@dataclass(frozen=True)
class Lock(object):
    mutex: str


@dataclass(frozen=True)
class Unlock(object):
    mutex: str


@dataclass(frozen=True)
class TryLock(object):
    mutex: str


@dataclass(frozen=True)
class ReadClock(object):
    pass


@dataclass(frozen=True)
class SocketRead(object):
    fd: int


@dataclass(frozen=True)
class SocketWrite(object):
    fd: int
    data: str = ''


@dataclass(frozen=True)
class SelectPoll(object):
    fds: tuple
    timeout_ms: int


def operation_id(call):
    "The O of a call: mutex id, time source or socket handle."
    if isinstance(call, (Lock, Unlock, TryLock)):
        return 'mutex:%s' % call.mutex
    if isinstance(call, ReadClock):
        return 'clock'
    if isinstance(call, (SocketRead, SocketWrite)):
        return 'sock:%d' % call.fd
    if isinstance(call, SelectPoll):
        return 'poll:%s' % ','.join(str(fd) for fd in call.fds)
    raise TypeError("not an intercepted call: %r" % (call,))


def order_type(op):
    return {'mutex': OrderType.MutexOrder, 'clock': OrderType.TimeOrder,
            'sock': OrderType.SocketOrder,
            'poll': OrderType.SocketOrder}[op.split(':', 1)[0]]


# ---- recording -----------------------------------------------------------

class Counts(dict):

    "Per (T, O) execution counts, shared by recording and replay."

    def next(self, task, op):
        return self.get((task, op), 0) + 1

    def bump(self, task, op):
        n = self[(task, op)] = self.next(task, op)
        return n


def record_at_primary(counts, task, op, execute):
    """Run the underlying operation and capture its outcome as a tuple.

    execute returns the metadata dict. An OSError it raises is captured
    into D as an error code rather than propagated.

    """
    try:
        meta = dict(execute())
    except OSError as e:
        meta = {'ok': False, 'errno': e.strerror or str(e)}
    return meta, TupleOrder(task, op, counts.bump(task, op), meta)


def record_socket_outcome(counts, task, fd, kind, outcome, attempts=1):
    """The tuple for a socket read, write or selectPoll outcome.

    outcome is a message identifier on success, an error code string on
    failure, or for selectPoll an (events, mask, remaining ms) triple.

    """
    if kind == 'selectPoll':
        events, mask, remaining = outcome
        meta = {'ok': True, 'events': events, 'mask': mask,
                'remaining': remaining}
        op = 'poll:%s' % fd if isinstance(fd, int) else \
            'poll:%s' % ','.join(str(f) for f in fd)
    else:
        op = 'sock:%d' % fd
        if outcome in (EAGAIN, EWOULDBLOCK):
            meta = {'ok': False, 'errno': outcome}
        else:
            meta = {'ok': True, 'msg': outcome}
        if kind == 'write':
            meta['attempt'] = attempts
    return TupleOrder(task, op, counts.bump(task, op), meta)


def as_msg_order(tup, primary_view_num, order_seq_num):
    """A socket write outcome rendered as a MsgOrder, opaque carrying the
    number of times the write has been attempted."""
    fd = int(tup.op.split(':', 1)[1])
    return MsgOrder(primary_view_num, MessageType.Request, 0, fd,
                    tup.meta.get('attempt', 1), 0, tup.count, order_seq_num)


# ---- replay --------------------------------------------------------------

@dataclass
class ReplayQueues(object):
    queues: dict = field(default_factory=dict)
    blocked: dict = field(default_factory=dict)

    def pending(self):
        return sum(len(q) for q in self.queues.values())

    def head(self, op):
        q = self.queues.get(op)
        return q[0] if q else None

    def tails(self):
        return [t for q in self.queues.values() for t in q]


def ingest_at_backup(rq, tup):
    """Queue a tuple behind earlier ones for the same operation.

    Returns the task to wake, if the new head is a task suspended on it.

    """
    q = rq.queues.setdefault(tup.op, deque())
    q.append(tup)
    head = q[0]
    if head.task in rq.blocked.get(tup.op, ()):
        return head.task
    return None


def replay_at_backup(rq, counts, task, op):
    """The recorded outcome for task's next call of op, or None to suspend.

    A task resumes in queue order, never in the order it was suspended.

    """
    n = counts.next(task, op)
    head = rq.head(op)
    if head is None or head.task != task or head.count != n:
        rq.blocked.setdefault(op, set()).add(task)
        return None
    rq.queues[op].popleft()
    if not rq.queues[op]:
        del rq.queues[op]
    rq.blocked.get(op, set()).discard(task)
    counts.bump(task, op)
    return head.meta


# ---- virtual group clock -------------------------------------------------

@dataclass
class VirtualGroupClock(object):
    offset: int = 0
    last_issued: int = 0


def read_virtual_clock(vgc, role, local_physical, replayed=None):
    """A clock value that is the same at every replica and never goes back.

    Example
    -------
    >>> vgc = VirtualGroupClock()
    >>> read_virtual_clock(vgc, BACKUP, 100, replayed=95), vgc.offset
    (95, -5)
    >>> read_virtual_clock(vgc, PRIMARY, 110)
    105

    """
    if role == PRIMARY:
        value = max(local_physical + vgc.offset, vgc.last_issued)
    else:
        value = replayed
        vgc.offset = value - local_physical
    vgc.last_issued = max(vgc.last_issued, value)
    return value


# ---- local I/O environment -------------------------------------------------

class LocalIO(object):

    """Non-blocking local devices whose outcomes depend on the process.

    Reads miss with EAGAIN, writes fail with EWOULDBLOCK and polls report a
    random readiness and remaining timeout, all drawn from the process's own
    random stream so that replicas disagree unless the outcomes are ordered.

    """

    def __init__(self, rng, miss=0.4, fail=0.3, ready=0.6):
        self.rng = rng
        self.miss, self.fail, self.ready = miss, fail, ready
        self.serial = 0
        self.attempts = {}

    def _ident(self, fd):
        self.serial += 1
        return '%d:%d' % (fd, self.serial)

    def read(self, fd):
        if self.rng.random() < self.miss:
            return {'ok': False, 'errno': EAGAIN}
        return {'ok': True, 'msg': self._ident(fd)}

    def write(self, task, fd):
        key = (task, fd)
        attempt = self.attempts.get(key, 0) + 1
        if self.rng.random() < self.fail:
            self.attempts[key] = attempt
            return {'ok': False, 'errno': EWOULDBLOCK, 'attempt': attempt}
        self.attempts.pop(key, None)
        return {'ok': True, 'msg': self._ident(fd), 'attempt': attempt}

    def poll(self, fds, timeout_ms):
        ready = [fd for fd in fds if self.rng.random() < self.ready]
        remaining = self.rng.randint(0, timeout_ms) if ready else 0
        return {'ok': True, 'events': len(ready), 'mask': 1 if ready else 0,
                'remaining': remaining}


# ---- tasks ---------------------------------------------------------------

class Task(object):

    def __init__(self, task_id, gen):
        self.id = task_id
        self.gen = gen
        self.call = None
        self.started = False
        self.done = False
        self.result = None


class Determinizer(object):

    """Runs application tasks cooperatively and sanitizes their calls.

    The primary picks the next task to step from its own random stream, the
    non-determinism this class exists to remove. Backups step tasks in task
    id order and let the replay queues decide who proceeds.

    """

    def __init__(self, rng, physical_clock, io):
        self.rng = rng
        self.physical_clock = physical_clock
        self.io = io
        self.counts = Counts()
        self.replay = ReplayQueues()
        self.vgc = VirtualGroupClock()
        self.tasks = {}
        self.mutexes = {}
        self.recorded = []
        self.consumed = []
        self.finished = []

    def spawn(self, task_id, gen):
        self.tasks[task_id] = Task(task_id, gen)

    def busy(self):
        return bool(self.tasks)

    def ingest(self, tup):
        ingest_at_backup(self.replay, tup)

    def run_round(self, role):
        """Step every task at most once. Returns whether any task moved."""
        ids = list(self.tasks)
        if role == PRIMARY:
            self.rng.shuffle(ids)
        else:
            ids.sort()
        progressed = False
        for task_id in ids:
            task = self.tasks.get(task_id)
            if task is not None and self._step(task, role):
                progressed = True
        return progressed

    def run_until_blocked(self, role):
        while self.run_round(role):
            pass

    def _step(self, task, role):
        if not task.started:
            task.started = True
            return self._advance(task, None)
        meta = self._resolve(task, role)
        if meta is None:
            return False
        return self._advance(task, meta)

    def _advance(self, task, meta):
        try:
            task.call = task.gen.send(meta) if task.started and meta is not None \
                else next(task.gen)
        except StopIteration as stop:
            task.done = True
            task.result = stop.value
            del self.tasks[task.id]
            self.finished.append(task)
        return True

    def _resolve(self, task, role):
        call = task.call
        op = operation_id(call)
        head = self.replay.head(op)
        if role != PRIMARY or head is not None:
            # backups, and a new primary still holding ordered tuples
            meta = replay_at_backup(self.replay, self.counts, task.id, op)
            if meta is None:
                return None
            self._impose(task, call, meta)
            self.consumed.append(TupleOrder(task.id, op,
                                            self.counts[(task.id, op)], meta))
            return meta
        if (isinstance(call, Lock) and
                self.mutexes.get(call.mutex) is not None):
            # the claim blocks, nothing happened that needs ordering
            return None
        if isinstance(call, (SocketRead, SocketWrite, SelectPoll)):
            tup = self._socket(task, call)
        else:
            _, tup = record_at_primary(self.counts, task.id, op,
                                       lambda: self._live(task, call))
        self.recorded.append(tup)
        return tup.meta

    def _impose(self, task, call, meta):
        if isinstance(call, (Lock, TryLock)) and meta.get('ok'):
            self.mutexes[call.mutex] = task.id
        elif isinstance(call, Unlock):
            self.mutexes.pop(call.mutex, None)
        elif isinstance(call, ReadClock):
            read_virtual_clock(self.vgc, BACKUP, self.physical_clock(),
                               replayed=meta['value'])

    def _live(self, task, call):
        if isinstance(call, TryLock):
            if self.mutexes.get(call.mutex) is not None:
                return {'ok': False, 'errno': EBUSY}
            self.mutexes[call.mutex] = task.id
        elif isinstance(call, Lock):
            self.mutexes[call.mutex] = task.id
        elif isinstance(call, Unlock):
            self.mutexes.pop(call.mutex, None)
        else:
            return {'ok': True,
                    'value': read_virtual_clock(self.vgc, PRIMARY,
                                                self.physical_clock())}
        return {'ok': True}

    def _socket(self, task, call):
        if isinstance(call, SelectPoll):
            d = self.io.poll(call.fds, call.timeout_ms)
            return record_socket_outcome(
                self.counts, task.id, call.fds, 'selectPoll',
                (d['events'], d['mask'], d['remaining']))
        if isinstance(call, SocketRead):
            d = self.io.read(call.fd)
            return record_socket_outcome(self.counts, task.id, call.fd,
                                         'read', d.get('msg', d.get('errno')))
        d = self.io.write(task.id, call.fd)
        return record_socket_outcome(self.counts, task.id, call.fd, 'write',
                                     d.get('msg', d.get('errno')),
                                     d['attempt'])

    def take_recorded(self):
        out, self.recorded = self.recorded, []
        return out

    def take_consumed(self):
        out, self.consumed = self.consumed, []
        return out

    def take_finished(self):
        out, self.finished = self.finished, []
        return out

    def snapshot(self):
        "What a State message carries of the determinizer."
        return {'offset': self.vgc.offset,
                'last_issued': self.vgc.last_issued,
                'counts': [[t, o, n] for (t, o), n in sorted(self.counts.items())],
                'tails': [[t.task, t.op, t.count, t.meta]
                          for t in self.replay.tails()]}

    def restore(self, snap):
        self.vgc = VirtualGroupClock(snap['offset'], snap['last_issued'])
        self.counts = Counts(((t, o), n) for t, o, n in snap['counts'])
        self.replay = ReplayQueues()
        for task, op, count, meta in snap['tails']:
            ingest_at_backup(self.replay, TupleOrder(task, op, count, meta))
