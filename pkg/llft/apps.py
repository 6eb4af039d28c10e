"""This module contains the applications a replica runs: a key-value counter
service, a multi-task application exercising every intercepted call, and
the client workload that drives them.

A server application is handed each delivered request as a task: handle
returns a generator that yields determinizer calls, is resumed with each
call's outcome and returns the reply bytes.

"""
import json

from llft.determinizer import (Lock, ReadClock, SelectPoll, SocketRead,
                               SocketWrite, TryLock, Unlock)
from llft.trace import digest
from llft.wire import canonical_json


class Application(object):

    """The handle a replica holds on its application.

    State is a JSON-able dict. Tasks note the keys they write in
    self.touched so that semi-passive replication can ship their values.

    """

    name = None

    def __init__(self):
        self.state = {}
        self.touched = {}

    def handle(self, task_id, payload):
        raise NotImplementedError("%s has no request handler" % self.name)

    def _write(self, task_id, key, value):
        self.state[key] = value
        self.touched.setdefault(task_id, set()).add(key)

    def checkpoint(self):
        return canonical_json(self.state).encode('utf-8')

    def restore(self, data):
        self.state = json.loads(data.decode('utf-8'))
        self.touched = {}

    def delta(self, task_id):
        "The values, at completion, of the keys task_id wrote."
        keys = sorted(self.touched.pop(task_id, ()))
        return canonical_json(dict((k, self.state[k])
                                   for k in keys)).encode('utf-8')

    def apply_update(self, data):
        self.state.update(json.loads(data.decode('utf-8')))

    def digest(self):
        return digest(self.state)


def _words(payload):
    words = payload.decode('utf-8').split()
    return words[0], words[1:]


class KVApp(Application):

    """Counters: "incr k n" and "get k". The whole read-modify-write holds
    the kv mutex, so concurrent requests on one key are ordered by it.

    Example
    -------
    >>> reply of b"r1 incr k0 2" on a fresh store
    b"r1 k0=2"

    """

    name = 'kv'

    def handle(self, task_id, payload):
        rid, args = _words(payload)
        yield Lock('kv')
        if args and args[0] == 'incr':
            key, n = args[1], int(args[2]) if len(args) > 2 else 1
            value = self.state.get(key, 0) + n
            self._write(task_id, key, value)
        elif args and args[0] == 'get':
            key = args[1]
            value = self.state.get(key, 0)
        else:
            key, value = '?', 0
        yield Unlock('kv')
        return ('%s %s=%d' % (rid, key, value)).encode('utf-8')


class TasksApp(Application):

    """Each request contends for the pool mutex with trylock, stamps the
    virtual group clock, writes to a local non-blocking socket until it
    succeeds and polls before reading.

    Order dependent state is only written under the mutex, the rest are
    counters.

    """

    name = 'tasks'
    TRIES = 3
    WRITES = 5

    def _bump(self, task_id, key, n=1):
        self._write(task_id, key, self.state.get(key, 0) + n)

    def handle(self, task_id, payload):
        rid, _ = _words(payload)
        for attempt in range(self.TRIES):
            got = yield TryLock('pool')
            if got['ok']:
                break
            self._bump(task_id, 'busy')
        else:
            yield Lock('pool')
        clock = yield ReadClock()
        self._write(task_id, 'clock', clock['value'])
        self._write(task_id, 'order', self.state.get('order', []) + [rid])
        yield Unlock('pool')

        fd = 3 + int(rid.lstrip('r') or 0) % 2
        for attempt in range(1, self.WRITES + 1):
            wrote = yield SocketWrite(fd, rid)
            if wrote['ok']:
                break
            self._bump(task_id, 'retries')
        polled = yield SelectPoll((fd, fd + 2), 5)
        read = 'none'
        if polled['events']:
            got = yield SocketRead(fd)
            if got['ok']:
                self._bump(task_id, 'bytes', len(got['msg']))
                read = got['msg']
            else:
                self._bump(task_id, 'misses')
        self._bump(task_id, 'done')
        return ('%s clock=%d writes=%d read=%s'
                % (rid, clock['value'], attempt, read)).encode('utf-8')


APPS = {'kv': KVApp, 'tasks': TasksApp}


def make_app(name):
    return APPS[name]()


class ClientApp(Application):

    """Issues its requests open loop, one every gap µs from start, and
    records each reply by request id."""

    name = 'client'

    def __init__(self, requests, gap, workload='kv', keys=1, start=0):
        super(ClientApp, self).__init__()
        self.requests = requests
        self.gap = gap
        self.workload = workload
        self.keys = keys
        self.start = start
        self.issued = 0
        self.replies = {}

    def payload(self, i):
        if self.workload == 'tasks':
            return ('r%d work' % i).encode('utf-8')
        return ('r%d incr k%d 1' % (i, i % self.keys)).encode('utf-8')

    def next_request_at(self):
        if self.issued >= self.requests:
            return None
        return self.start + self.issued * self.gap

    def issue(self):
        self.issued += 1
        return self.payload(self.issued)

    def on_reply(self, payload):
        rid, _ = _words(payload)
        first = rid not in self.replies
        self.replies[rid] = payload.decode('utf-8')
        self.state = dict(self.replies)
        return rid, first

    @property
    def done(self):
        return len(self.replies) >= self.requests
