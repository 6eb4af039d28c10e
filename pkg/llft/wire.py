"""This module contains the message types, the message header, the ordering
records and their canonical byte encoding.

The most useful are encode, decode and merge_msg_orders.

Wire layout (all integers little-endian):

    u32 header length | header | u32 entry count | (u32 length | entry)* |
    u32 payload length | payload

See README.md for the offsets within the header and within each entry.

"""
import json
import struct
from collections import namedtuple
from dataclasses import dataclass, field, replace
from enum import IntEnum


class MalformedMessage(ValueError):

    """Raised on truncated, unknown or invariant-violating input."""


class MessageType(IntEnum):
    Request = 1
    Reply = 2
    FirstAck = 3
    SecondAck = 4
    Nack = 5
    Heartbeat = 6
    KeepAlive = 7
    ProposePrimary = 8
    NewPrimaryView = 9
    ProposeBackup = 10
    AcceptBackup = 11
    RemoveBackup = 12
    State = 13
    MembershipAck = 14


APPLICATION_TYPES = frozenset([MessageType.Request, MessageType.Reply])
MEMBERSHIP_TYPES = frozenset([
    MessageType.ProposePrimary, MessageType.ProposeBackup,
    MessageType.AcceptBackup, MessageType.RemoveBackup, MessageType.State,
    MessageType.MembershipAck, MessageType.Heartbeat])


class Role(IntEnum):
    client = 0
    server = 1


def opposite(role):
    return Role.server if role == Role.client else Role.client


class OrderType(IntEnum):
    MsgOrder = 1
    MutexOrder = 2
    TimeOrder = 3
    SocketOrder = 4
    ViewChangeOrder = 5
    UpdateOrder = 6


TUPLE_ORDER_TYPES = frozenset([
    OrderType.MutexOrder, OrderType.TimeOrder, OrderType.SocketOrder])


class ConnKey(namedtuple('ConnKey', 'local remote seq role')):

    """A connection as seen from one endpoint.

    Both directions of a client/server pair share one key at each end, the
    incoming header (src, dst, seq, role) maps to (dst, src, seq,
    opposite(role)).

    """
    __slots__ = ()

    @property
    def sock_fd(self):
        "Logical socket handle, the same at every replica of the group."
        return (self.seq * 2 + int(self.role)) & 0x7fff

    def label(self):
        return "%d>%d#%d%s" % (self.local, self.remote, self.seq,
                               'c' if self.role == Role.client else 's')


@dataclass(frozen=True)
class BirthId(object):
    host_id: int
    pid: int
    ts: int


@dataclass(frozen=True)
class Member(object):
    birth: BirthId
    precedence: int
    rank: int


HEADER_FORMAT = '<BIIIBIIIIIQQ'
HEADER_LENGTH = struct.calcsize(HEADER_FORMAT)


@dataclass(frozen=True)
class MessageHeader(object):
    message_type: MessageType
    source_group_id: int
    dest_group_id: int
    conn_seq_num: int
    role: Role
    primary_view_num: int
    precedence: int
    msg_seq_num: int = 0
    ack_view_num: int = 0
    ack: int = 0
    back: int = 0
    timestamp: int = 0

    def __post_init__(self):
        if (self.msg_seq_num > 0) != (self.message_type in APPLICATION_TYPES):
            raise ValueError("msgSeqNum must be non-zero iff the message is a "
                             "Request or Reply (%s, %d)"
                             % (MessageType(self.message_type).name,
                                self.msg_seq_num))
        if self.primary_view_num < 1 or self.precedence < 1:
            raise ValueError("primaryViewNum and precedence start at 1")

    @property
    def receiver_key(self):
        return ConnKey(self.dest_group_id, self.source_group_id,
                       self.conn_seq_num, opposite(self.role))

    @property
    def is_application(self):
        return self.message_type in APPLICATION_TYPES


@dataclass(frozen=True)
class MsgOrder(object):
    primary_view_num: int
    msg_type: MessageType
    conn_seq_num: int
    sock_fd: int
    opaque: int
    remote_grp_id: int
    msg_seq_num: int
    order_seq_num: int
    timestamp: int = 0

    @property
    def last_msg_seq_num(self):
        return self.msg_seq_num + self.opaque

    def covers(self):
        return range(self.msg_seq_num, self.last_msg_seq_num + 1)


@dataclass(frozen=True)
class TupleOrder(object):
    "The (T, O, N, D) tuple, D is a JSON object."
    task: str
    op: str
    count: int
    meta: dict = field(default_factory=dict)


@dataclass(frozen=True)
class ViewChangeOrder(object):
    primary_view_num: int
    precedence: int
    members: tuple
    # ((ConnKey, remote recvUpToMsn under the old view), ...)
    resume: tuple = ()


@dataclass(frozen=True)
class UpdateOrder(object):
    task: str
    conn: ConnKey
    request_msn: int
    request_view: int
    delta: bytes
    reply: bytes


@dataclass(frozen=True)
class OrderEntry(object):
    order_type: OrderType
    order_seq_num: int
    group_id: int
    primary_view_num: int
    body: object

    @property
    def key(self):
        return (self.group_id, self.primary_view_num, self.order_seq_num)


@dataclass(frozen=True)
class Message(object):
    header: MessageHeader
    orders: tuple = ()
    payload: bytes = b''

    @property
    def type(self):
        return self.header.message_type


# ---- primitive codecs --------------------------------------------------

class _Reader(object):

    def __init__(self, data):
        self.data = bytes(data)
        self.pos = 0

    def take(self, fmt):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise MalformedMessage("truncated: need %d bytes at offset %d, "
                                   "have %d" % (size, self.pos,
                                                len(self.data) - self.pos))
        values = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return values

    def take1(self, fmt):
        return self.take(fmt)[0]

    def blob(self):
        n = self.take1('<I')
        if self.pos + n > len(self.data):
            raise MalformedMessage("truncated: section of %d bytes at offset "
                                   "%d" % (n, self.pos))
        b = self.data[self.pos:self.pos + n]
        self.pos += n
        return b

    def text(self):
        try:
            return self.blob().decode('utf-8')
        except UnicodeDecodeError as e:
            raise MalformedMessage(str(e))

    def finish(self):
        if self.pos != len(self.data):
            raise MalformedMessage("%d trailing bytes"
                                   % (len(self.data) - self.pos))


def _blob(b):
    return struct.pack('<I', len(b)) + bytes(b)


def _text(s):
    return _blob(s.encode('utf-8'))


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(',', ':'))


def _enum(cls, value):
    try:
        return cls(value)
    except ValueError:
        raise MalformedMessage("unknown %s tag %d" % (cls.__name__, value))


def _pack_birth(b):
    return struct.pack('<IIQ', b.host_id, b.pid, b.ts)


def _read_birth(r):
    return BirthId(*r.take('<IIQ'))


def pack_members(members):
    out = [struct.pack('<I', len(members))]
    for m in members:
        out.append(_pack_birth(m.birth))
        out.append(struct.pack('<II', m.precedence, m.rank))
    return b''.join(out)


def read_members(r):
    n = r.take1('<I')
    members = []
    for _ in range(n):
        birth = _read_birth(r)
        precedence, rank = r.take('<II')
        members.append(Member(birth, precedence, rank))
    return tuple(members)


def _pack_key(k):
    return struct.pack('<IIIB', k.local, k.remote, k.seq, int(k.role))


def _read_key(r):
    local, remote, seq, role = r.take('<IIIB')
    return ConnKey(local, remote, seq, _enum(Role, role))


# ---- order entries -----------------------------------------------------

MSG_ORDER_FORMAT = '<IBIhHIIIQ'
# opaque is a u16 run length - 1
MAX_OPAQUE = 0xffff


def _pack_body(order_type, body):
    if order_type == OrderType.MsgOrder:
        return struct.pack(MSG_ORDER_FORMAT, body.primary_view_num,
                           int(body.msg_type), body.conn_seq_num,
                           body.sock_fd, body.opaque, body.remote_grp_id,
                           body.msg_seq_num, body.order_seq_num,
                           body.timestamp)
    elif order_type in TUPLE_ORDER_TYPES:
        return (_text(body.task) + _text(body.op) +
                struct.pack('<I', body.count) +
                _text(canonical_json(body.meta)))
    elif order_type == OrderType.ViewChangeOrder:
        out = [struct.pack('<II', body.primary_view_num, body.precedence),
               pack_members(body.members),
               struct.pack('<I', len(body.resume))]
        for key, recv_up_to in body.resume:
            out.append(_pack_key(key) + struct.pack('<I', recv_up_to))
        return b''.join(out)
    else:  # UpdateOrder
        return (_text(body.task) + _pack_key(body.conn) +
                struct.pack('<II', body.request_msn, body.request_view) +
                _blob(body.delta) + _blob(body.reply))


def _read_body(order_type, r):
    if order_type == OrderType.MsgOrder:
        values = list(r.take(MSG_ORDER_FORMAT))
        values[1] = _enum(MessageType, values[1])
        return MsgOrder(*values)
    elif order_type in TUPLE_ORDER_TYPES:
        task, op = r.text(), r.text()
        count = r.take1('<I')
        try:
            meta = json.loads(r.text())
        except ValueError as e:
            raise MalformedMessage("bad tuple metadata: %s" % e)
        if not isinstance(meta, dict):
            raise MalformedMessage("tuple metadata must be an object")
        return TupleOrder(task, op, count, meta)
    elif order_type == OrderType.ViewChangeOrder:
        pvn, precedence = r.take('<II')
        members = read_members(r)
        resume = []
        for _ in range(r.take1('<I')):
            key = _read_key(r)
            resume.append((key, r.take1('<I')))
        return ViewChangeOrder(pvn, precedence, members, tuple(resume))
    else:
        task = r.text()
        conn = _read_key(r)
        msn, view = r.take('<II')
        return UpdateOrder(task, conn, msn, view, r.blob(), r.blob())


def encode_entry(entry):
    return (struct.pack('<BIII', int(entry.order_type), entry.order_seq_num,
                        entry.group_id, entry.primary_view_num) +
            _pack_body(entry.order_type, entry.body))


def decode_entry(data):
    r = _Reader(data)
    order_type, seq, group_id, pvn = r.take('<BIII')
    order_type = _enum(OrderType, order_type)
    body = _read_body(order_type, r)
    r.finish()
    return OrderEntry(order_type, seq, group_id, pvn, body)


# ---- messages ----------------------------------------------------------

def encode(msg):
    """Canonical, self-delimiting encoding of a message.

    Example
    -------
    >>> h = MessageHeader(MessageType.Heartbeat, 1, 1, 0, Role.server, 1, 1)
    >>> len(encode(Message(h)))
    4 + HEADER_LENGTH + 4 + 4

    """
    h = msg.header
    header = struct.pack(HEADER_FORMAT, int(h.message_type),
                         h.source_group_id, h.dest_group_id, h.conn_seq_num,
                         int(h.role), h.primary_view_num, h.precedence,
                         h.msg_seq_num, h.ack_view_num, h.ack, h.back,
                         h.timestamp)
    entries = [_blob(encode_entry(e)) for e in msg.orders]
    return b''.join([_blob(header), struct.pack('<I', len(entries))] +
                    entries + [_blob(msg.payload)])


def decode(data):
    """Inverse of encode, raises MalformedMessage on anything else."""
    r = _Reader(data)
    hr = _Reader(r.blob())
    values = list(hr.take(HEADER_FORMAT))
    hr.finish()
    values[0] = _enum(MessageType, values[0])
    values[4] = _enum(Role, values[4])
    try:
        header = MessageHeader(*values)
    except ValueError as e:
        raise MalformedMessage(str(e))
    orders = tuple(decode_entry(r.blob()) for _ in range(r.take1('<I')))
    payload = r.blob()
    r.finish()
    return Message(header, orders, payload)


def _mergeable(a, b):
    if (a.conn_seq_num, a.remote_grp_id, a.msg_type, a.sock_fd,
            a.primary_view_num) != (b.conn_seq_num, b.remote_grp_id,
                                    b.msg_type, b.sock_fd,
                                    b.primary_view_num):
        return False
    if b.msg_seq_num != a.last_msg_seq_num + 1:
        return False
    if a.opaque + b.opaque + 1 > MAX_OPAQUE:
        return False
    if a.timestamp or b.timestamp:
        return b.timestamp == a.timestamp + a.opaque + 1
    return True


def merge_msg_orders(entries):
    """Collapse runs of consecutively sent/delivered messages on the same
    connection into one entry whose opaque is the run length - 1.

    Example
    -------
    >>> merge_msg_orders([o(5), o(6), o(7)])
    [o(5, opaque=2)]

    """
    merged = []
    for e in entries:
        if merged and _mergeable(merged[-1], e):
            merged[-1] = replace(merged[-1],
                                 opaque=merged[-1].opaque + e.opaque + 1)
        else:
            merged.append(e)
    return merged


def expand_msg_order(order):
    "The single-message orders a (possibly merged) MsgOrder stands for."
    return [replace(order, msg_seq_num=msn, opaque=0,
                    order_seq_num=order.order_seq_num + i,
                    timestamp=(order.timestamp + i if order.timestamp else 0))
            for i, msn in enumerate(order.covers())]


def merge_entries(entries):
    """mergeMsgOrders over a piggyback list: MsgOrder entries recorded one
    after another by the same primary collapse into one entry.

    The result is only for the wire, expand_entries restores the list.

    """
    out = []
    for e in entries:
        if out and e.order_type == OrderType.MsgOrder:
            last = out[-1]
            if (last.order_type == OrderType.MsgOrder and
                    (last.group_id, last.primary_view_num) ==
                    (e.group_id, e.primary_view_num) and
                    e.order_seq_num == last.order_seq_num +
                    last.body.opaque + 1):
                merged = merge_msg_orders([last.body, e.body])
                if len(merged) == 1:
                    out[-1] = replace(last, body=merged[0])
                    continue
        out.append(e)
    return out


def expand_entries(entries):
    out = []
    for e in entries:
        if e.order_type == OrderType.MsgOrder and e.body.opaque:
            out.extend(replace(e, order_seq_num=o.order_seq_num, body=o)
                       for o in expand_msg_order(e.body))
        else:
            out.append(e)
    return out


# ---- payload bodies ----------------------------------------------------

@dataclass(frozen=True)
class ControlBody(object):
    "FirstAck, SecondAck and KeepAlive: the sender's send progress."
    acked_msn: int
    last_sent_msn: int
    sent_view: int

    FORMAT = '<III'

    def pack(self):
        return struct.pack(self.FORMAT, self.acked_msn, self.last_sent_msn,
                           self.sent_view)

    @classmethod
    def unpack(cls, data):
        r = _Reader(data)
        body = cls(*r.take(cls.FORMAT))
        r.finish()
        return body


@dataclass(frozen=True)
class NackBody(object):
    view: int
    missing: tuple
    # set on a nack a backup sends its own primary
    remote_group: int = 0

    def pack(self):
        return (struct.pack('<III', self.view, self.remote_group,
                            len(self.missing)) +
                b''.join(struct.pack('<I', m) for m in self.missing))

    @classmethod
    def unpack(cls, data):
        r = _Reader(data)
        view, remote_group, n = r.take('<III')
        missing = tuple(r.take1('<I') for _ in range(n))
        r.finish()
        return cls(view, missing, remote_group)


@dataclass(frozen=True)
class HeartbeatBody(object):
    precedence: int
    birth: BirthId
    last_order_seq: int
    # ((ConnKey, received-timestamp mark), ...), reported by backups
    marks: tuple = ()
    # the sender's primary has concluded the view in the header
    settled: bool = True

    def pack(self):
        out = [struct.pack('<I', self.precedence), _pack_birth(self.birth),
               struct.pack('<BII', int(self.settled), self.last_order_seq,
                           len(self.marks))]
        for key, ts in self.marks:
            out.append(_pack_key(key) + struct.pack('<Q', ts))
        return b''.join(out)

    @classmethod
    def unpack(cls, data):
        r = _Reader(data)
        precedence = r.take1('<I')
        birth = _read_birth(r)
        settled, last_order_seq, n = r.take('<BII')
        marks = []
        for _ in range(n):
            key = _read_key(r)
            marks.append((key, r.take1('<Q')))
        r.finish()
        return cls(precedence, birth, last_order_seq, tuple(marks),
                   bool(settled))


@dataclass(frozen=True)
class ProposePrimaryBody(object):
    group_id: int
    primary_view_num: int
    precedence: int
    last_order_seq: int
    max_precedence: int
    members: tuple

    def pack(self):
        return (struct.pack('<IIIII', self.group_id, self.primary_view_num,
                            self.precedence, self.last_order_seq,
                            self.max_precedence) +
                pack_members(self.members))

    @classmethod
    def unpack(cls, data):
        r = _Reader(data)
        values = r.take('<IIIII')
        body = cls(*(values + (read_members(r),)))
        r.finish()
        return body


ADD, REMOVE = 1, 2


@dataclass(frozen=True)
class MembershipChangeBody(object):
    "AcceptBackup and RemoveBackup."
    group_id: int
    primary_view_num: int
    change_id: int
    kind: int
    subject: BirthId
    max_precedence: int
    members: tuple

    def pack(self):
        return (struct.pack('<IIIB', self.group_id, self.primary_view_num,
                            self.change_id, self.kind) +
                _pack_birth(self.subject) +
                struct.pack('<I', self.max_precedence) +
                pack_members(self.members))

    @classmethod
    def unpack(cls, data):
        r = _Reader(data)
        group_id, pvn, change_id, kind = r.take('<IIIB')
        subject = _read_birth(r)
        max_precedence = r.take1('<I')
        body = cls(group_id, pvn, change_id, kind, subject, max_precedence,
                   read_members(r))
        r.finish()
        return body


@dataclass(frozen=True)
class ProposeBackupBody(object):
    birth: BirthId

    def pack(self):
        return _pack_birth(self.birth)

    @classmethod
    def unpack(cls, data):
        r = _Reader(data)
        body = cls(_read_birth(r))
        r.finish()
        return body


@dataclass(frozen=True)
class MembershipAckBody(object):
    """Acknowledges ProposePrimary, AcceptBackup, RemoveBackup, State or
    NewPrimaryView (the last with recvUpToMsn and lastSentMsn)."""
    acked_type: MessageType
    precedence: int
    birth: BirthId
    primary_view_num: int
    change_id: int = 0
    recv_up_to: int = 0
    last_sent: int = 0
    needs_state: bool = False

    def pack(self):
        return (struct.pack('<BI', int(self.acked_type), self.precedence) +
                _pack_birth(self.birth) +
                struct.pack('<IIIIB', self.primary_view_num, self.change_id,
                            self.recv_up_to, self.last_sent,
                            int(self.needs_state)))

    @classmethod
    def unpack(cls, data):
        r = _Reader(data)
        acked_type, precedence = r.take('<BI')
        birth = _read_birth(r)
        pvn, change_id, recv_up_to, last_sent, needs = r.take('<IIIIB')
        r.finish()
        return cls(_enum(MessageType, acked_type), precedence, birth, pvn,
                   change_id, recv_up_to, last_sent, bool(needs))


@dataclass(frozen=True)
class NewPrimaryViewBody(object):
    primary_view_num: int
    last_order_seq: int
    # last msn this group logged on the connection under the old view
    last_logged_msn: int

    FORMAT = '<III'

    def pack(self):
        return struct.pack(self.FORMAT, self.primary_view_num,
                           self.last_order_seq, self.last_logged_msn)

    @classmethod
    def unpack(cls, data):
        r = _Reader(data)
        body = cls(*r.take(cls.FORMAT))
        r.finish()
        return body


def unpack_body(cls, data):
    "Decode a payload body, turning any failure into MalformedMessage."
    try:
        return cls.unpack(data)
    except MalformedMessage:
        raise
    except (ValueError, struct.error) as e:
        raise MalformedMessage(str(e))


def peek_header(data):
    "Decode only the header section, for routing and accounting."
    r = _Reader(data)
    hr = _Reader(r.blob())
    values = list(hr.take(HEADER_FORMAT))
    values[0] = _enum(MessageType, values[0])
    values[4] = _enum(Role, values[4])
    try:
        return MessageHeader(*values)
    except ValueError as e:
        raise MalformedMessage(str(e))


def identity(header):
    """Ground-truth identity of an application message: the sending end's
    connection, the sender's view and the msn."""
    if not header.is_application:
        return None
    return (header.source_group_id, header.dest_group_id,
            header.conn_seq_num, int(header.role),
            header.primary_view_num, header.msg_seq_num)
