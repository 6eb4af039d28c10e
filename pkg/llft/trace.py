"""This module contains the trace: the line-delimited JSON record stream
written by the replicas and the simulator and read by the checkers.

Each record is an object with the simulated time "t" (µs), the process "p"
and the kind "k", plus kind specific fields.

"""
import hashlib
import json

from llft.wire import canonical_json

KINDS = frozenset([
    # messaging
    'send', 'recv', 'deliver', 'drop', 'nack', 'ack', 'gc', 'gc-violation',
    # membership
    'propose', 'commit', 'reset', 'view', 'join',
    # determinizer and application
    'order', 'consume', 'apply', 'reply', 'request', 'clock', 'digest',
    # faults
    'crash', 'partition', 'heal',
    'end'])


class UnparseableTrace(ValueError):

    """Raised on a line that is not a record, or time running backwards for
    one process."""


def digest(state):
    "Stable content hash of application state."
    return hashlib.sha256(canonical_json(state).encode('utf-8')).hexdigest()


class Trace(object):

    """An ordered list of records with listeners called on every emit."""

    def __init__(self, records=None):
        self.records = list(records or [])
        self.listeners = []

    def emit(self, t, p, k, **fields):
        record = dict(fields, t=t, p=p, k=k)
        self.records.append(record)
        for listener in self.listeners:
            listener(record)
        return record

    def __iter__(self):
        return iter(self.records)

    def __len__(self):
        return len(self.records)

    def of(self, *kinds):
        return [r for r in self.records if r['k'] in kinds]

    def processes(self):
        seen = []
        for r in self.records:
            if r['p'] not in seen:
                seen.append(r['p'])
        return seen

    def dumps(self):
        return ''.join(canonical_json(r) + '\n' for r in self.records)

    def hash(self):
        return hashlib.sha256(self.dumps().encode('utf-8')).hexdigest()


def loads(text):
    """Parse a trace, validating that time never goes back per process.

    Example
    -------
    >>> loads('{"t":5,"p":"a","k":"end"}\\n{"t":3,"p":"a","k":"end"}')
    UnparseableTrace: line 2: time 3 < 5 for process a

    """
    records = []
    last = {}
    for i, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            r = json.loads(line)
        except ValueError as e:
            raise UnparseableTrace("line %d: %s" % (i, e))
        if not isinstance(r, dict) or not all(f in r for f in 'tpk'):
            raise UnparseableTrace("line %d: not a trace record" % i)
        t = r['t']
        if (isinstance(t, bool) or not isinstance(t, (int, float)) or
                not isinstance(r['p'], str) or not isinstance(r['k'], str)):
            raise UnparseableTrace("line %d: bad t, p or k field" % i)
        if r['k'] not in KINDS:
            raise UnparseableTrace("line %d: unknown kind %r" % (i, r['k']))
        if r['t'] < last.get(r['p'], r['t']):
            raise UnparseableTrace("line %d: time %s < %s for process %s"
                                   % (i, r['t'], last[r['p']], r['p']))
        last[r['p']] = r['t']
        records.append(r)
    return Trace(records)


def load(path):
    with open(path) as f:
        return loads(f.read())


def dump(trace, path):
    with open(path, 'w') as f:
        f.write(trace.dumps())
