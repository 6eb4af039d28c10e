"""This module contains the per-connection state and the rules for reliable,
totally ordered delivery on one connection: sequencing, gap detection with
placeholders, acks, nacks, retransmission, keep-alives and the reflection
of ordering information.

Nothing in here touches the network. Each operation mutates a
ConnectionState and returns what the owning replica should do next.

The receive side is indexed by the remote sender's primary view, so slots
and receivedUpToMsn are kept per (view, msn).

"""
import logging
from collections import namedtuple
from dataclasses import dataclass, field

from llft.buffers import PRIMARY
from llft.wire import (ConnKey, ControlBody, Message, MessageHeader,
                       MessageType, NackBody, Role, decode, decode_entry,
                       encode, encode_entry)

logger = logging.getLogger(__name__)


# receive outcomes
ACCEPTED = 'accepted'
DUPLICATE = 'duplicateDiscarded'
GAP = 'gapDetected'
SUPERSEDED = 'superseded'
IGNORED_VIEW = 'ignoredView'

ReceiveOutcome = namedtuple('ReceiveOutcome', 'kind missing orders')

# periodic actions
Retransmit = namedtuple('Retransmit', 'messages')
SendFirstAck = namedtuple('SendFirstAck', 'ack')
SendNackRemote = namedtuple('SendNackRemote', 'view missing')
SendNackLocal = namedtuple('SendNackLocal', 'view missing')
SendKeepAlive = namedtuple('SendKeepAlive', '')
DeliverReady = namedtuple('DeliverReady', '')

# ack handling outcomes
SEND_SECOND_ACK = 'sendSecondAck'
FLOW_CONTROL = 'invokeFlowControl'
STOP_FIRST_ACK = 'stopFirstAckRetransmit'
AppendNack = namedtuple('AppendNack', 'view missing')

DeliveredEntry = namedtuple('DeliveredEntry', 'view msn timestamp msg')

# remote entries held per connection for a new remote primary
RETAIN_WINDOW = 1024


@dataclass
class SentEntry(object):
    msn: int
    msg: Message
    # 0 until a backup learns the primary's timestamp for its logged copy
    timestamp: int
    acked: bool = False
    first_ack_count: int = 0
    last_sent: object = None


@dataclass
class ConnectionState(object):
    key: object
    msg_seq_count: int = 1
    send_view: int = 1
    sent: dict = field(default_factory=dict)
    recv_view: int = 1
    # (view, msn) -> Message, or None for a placeholder
    slots: dict = field(default_factory=dict)
    up_to: dict = field(default_factory=dict)
    up_to_ts: dict = field(default_factory=dict)
    high: dict = field(default_factory=dict)
    delivered_up_to: dict = field(default_factory=dict)
    delivered: list = field(default_factory=list)
    delivered_ts: int = 0
    remote_wm: int = 0
    recv_ts: int = 0
    remote_precedence: int = 0
    last_acked: int = 0
    # own-group entries piggybacked here and not yet seen reflected back
    pending_reflection: list = field(default_factory=list)
    # the remote group's entries, retained per key, and those to reflect
    retained: dict = field(default_factory=dict)
    to_reflect: list = field(default_factory=list)
    ack_due: object = None
    first_ack_msn: int = 0
    first_ack_deadline: object = None
    nack_deadline: object = None
    keepalive_deadline: object = None
    send_delay: int = 0
    # remote pvn -> (recvUpToMsn, lastSentMsn, cached ack bytes)
    npv_acks: dict = field(default_factory=dict)

    @property
    def received_up_to(self):
        return self.up_to.get(self.recv_view, 0)

    @property
    def nacks(self):
        "Placeholder positions of the current receive view."
        return sorted(m for (v, m), msg in self.slots.items()
                      if v == self.recv_view and msg is None)

    @property
    def last_sent_msn(self):
        return self.msg_seq_count - 1

    def app_type(self):
        "The type of application message this end sends."
        return (MessageType.Request if self.key.role == Role.client
                else MessageType.Reply)

    def is_received_type(self, msg_type):
        return msg_type != self.app_type()


def new_connection(key, send_view=1, recv_view=1):
    return ConnectionState(key, send_view=send_view, recv_view=recv_view)


def _header(conn, message_type, precedence, msn=0, back=0, timestamp=0):
    k = conn.key
    return MessageHeader(message_type, k.local, k.remote, k.seq, k.role,
                         conn.send_view, precedence, msn,
                         ack_view_num=conn.recv_view,
                         ack=conn.received_up_to, back=back,
                         timestamp=timestamp)


def send_app_message(conn, payload, local_orders, reflect_orders, role,
                     precedence, back, timestamp, now=None):
    """Stamp, log and (at the primary) return an application message.

    A backup logs the message it would have sent and returns None.

    """
    msn = conn.msg_seq_count
    conn.msg_seq_count += 1
    header = _header(conn, conn.app_type(), precedence, msn, back, timestamp)
    msg = Message(header, tuple(local_orders) + tuple(reflect_orders),
                  payload)
    conn.sent[msn] = SentEntry(msn, msg, timestamp)
    if role != PRIMARY:
        return None
    conn.sent[msn].last_sent = now
    conn.ack_due = None
    return msg


def control_message(conn, message_type, precedence, body, back=0,
                    timestamp=0):
    "FirstAck, SecondAck, KeepAlive or a remote Nack on this connection."
    return Message(_header(conn, message_type, precedence, back=back,
                           timestamp=timestamp), (), body.pack())


def set_sent_timestamp(conn, msn, timestamp):
    "A backup adopts the primary's timestamp for its logged copy."
    entry = conn.sent.get(msn)
    if entry is not None and not entry.timestamp:
        entry.timestamp = timestamp


def note_ack(conn, header):
    """Take the ack and back fields of a message from the remote primary.

    Returns True when the ack covers a newer message than before.

    """
    if header.back > conn.remote_wm:
        conn.remote_wm = header.back
    if header.ack_view_num != conn.send_view:
        return False
    for msn in range(conn.last_acked + 1, header.ack + 1):
        entry = conn.sent.get(msn)
        if entry is not None:
            entry.acked = True
    if header.ack > conn.last_acked:
        conn.last_acked = header.ack
        conn.send_delay = 0
        return True
    return False


def switch_receive_view(conn, view, recv_up_to=None):
    """Start expecting messages of a newer remote primary view.

    Slots of the old view past recv_up_to are discarded, as are the
    placeholders of every older view. Undelivered messages at or below it
    stay deliverable. The received-timestamp mark falls back to what is
    known to be held without a gap.

    """
    old = conn.recv_view
    if recv_up_to is None:
        recv_up_to = conn.up_to.get(old, 0)
    for (v, m), msg in list(conn.slots.items()):
        if msg is None or (v == old and m > recv_up_to):
            del conn.slots[(v, m)]
    conn.high[old] = min(conn.high.get(old, 0), recv_up_to)
    if recv_up_to == conn.up_to.get(old, 0):
        conn.recv_ts = conn.up_to_ts.get(old, conn.delivered_ts)
    else:
        conn.recv_ts = conn.delivered_ts
    conn.recv_view = view
    conn.nack_deadline = None
    logger.debug("%s: receive view %d -> %d (kept up to %d)",
                 conn.key.label(), old, view, recv_up_to)


def receive_app_message(conn, msg, local_primary_precedence=None,
                        role=PRIMARY):
    """Place a received application message in its slot.

    local_primary_precedence is given only for messages originating in the
    receiver's own group, a higher precedence there means a competing
    membership has superseded ours.

    Example
    -------
    >>> receive_app_message(conn, request(msn=3)).missing
    (2,)

    """
    h = msg.header
    if (local_primary_precedence is not None and
            h.precedence > local_primary_precedence):
        return ReceiveOutcome(SUPERSEDED, (), ())
    view, msn = h.primary_view_num, h.msg_seq_num
    if view != conn.recv_view:
        if role == PRIMARY:
            return ReceiveOutcome(IGNORED_VIEW, (), ())
        if view < conn.recv_view:
            return _receive_stale(conn, msg)
        switch_receive_view(conn, view)
    conn.remote_precedence = h.precedence
    note_ack(conn, h)

    up = conn.up_to.get(view, 0)
    if msn <= up or conn.slots.get((view, msn)) is not None:
        return ReceiveOutcome(DUPLICATE, (), ())

    high = conn.high.get(view, 0)
    missing = tuple(range(high + 1, msn))
    for m in missing:
        conn.slots[(view, m)] = None
    conn.slots[(view, msn)] = msg
    conn.high[view] = max(high, msn)

    while conn.slots.get((view, up + 1)) is not None:
        up += 1
    if up != conn.up_to.get(view, 0):
        conn.up_to[view] = up
        ts = conn.slots[(view, up)].header.timestamp
        conn.up_to_ts[view] = ts
        conn.recv_ts = max(conn.recv_ts, ts)

    kind = GAP if missing else ACCEPTED
    return ReceiveOutcome(kind, missing, msg.orders)


def _receive_stale(conn, msg):
    """A backup keeps a message of an older remote view that its order
    stream may still order, typically a retransmission from its primary."""
    key = (msg.header.primary_view_num, msg.header.msg_seq_num)
    if (key[1] <= conn.delivered_up_to.get(key[0], 0) or
            conn.slots.get(key) is not None):
        return ReceiveOutcome(DUPLICATE, (), ())
    conn.slots[key] = msg
    return ReceiveOutcome(ACCEPTED, (), msg.orders)


def note_last_sent(conn, view, last_sent, timestamp=0):
    """A control message from the remote primary reports its last sent msn.

    Placeholders are created for any tail it reveals. When everything up to
    it is held, the received-timestamp mark advances to the control
    message's timestamp. Returns the missing msns.

    """
    if view != conn.recv_view or not last_sent:
        return ()
    high = conn.high.get(view, 0)
    missing = tuple(range(high + 1, last_sent + 1))
    for m in missing:
        conn.slots[(view, m)] = None
    if missing:
        conn.high[view] = last_sent
    if conn.up_to.get(view, 0) >= last_sent and timestamp > conn.recv_ts:
        conn.recv_ts = timestamp
    return missing


def deliver_next(conn, role, next_order=None):
    """Deliver one message if the rules allow it.

    The primary delivers undelivered messages of earlier remote views
    first, then the next message of the current view. A backup delivers
    only the message named by the head of its message order stream.

    """
    if role == PRIMARY:
        key = _next_for_primary(conn)
        if key is None:
            return None
    else:
        if next_order is None:
            return None
        key = (next_order.primary_view_num, next_order.msg_seq_num)
        if conn.slots.get(key) is None:
            return None
    msg = conn.slots.pop(key)
    view, msn = key
    conn.delivered_up_to[view] = msn
    conn.delivered_ts = max(conn.delivered_ts, msg.header.timestamp)
    conn.delivered.append(DeliveredEntry(view, msn, msg.header.timestamp,
                                         msg))
    return msg


def _next_for_primary(conn):
    stale = sorted(k for k, m in conn.slots.items()
                   if k[0] < conn.recv_view and m is not None)
    for view, msn in stale:
        if msn == conn.delivered_up_to.get(view, 0) + 1:
            return (view, msn)
    view = conn.recv_view
    key = (view, conn.delivered_up_to.get(view, 0) + 1)
    if conn.slots.get(key) is None:
        return None
    return key


def has_deliverable(conn):
    return _next_for_primary(conn) is not None


def arm_first_ack(conn, now, timers):
    "A message was accepted at the primary, an ack is now owed."
    if conn.ack_due is None:
        conn.ack_due = now + timers.first_ack


def touch(conn, now, timers):
    "Something was sent on the connection, push back the keep-alive."
    conn.keepalive_deadline = now + timers.keepalive


def periodic_tick(conn, now, role, timers):
    """The actions due on this connection at simulated time now.

    Example
    -------
    >>> periodic_tick(conn_with_one_stale_send, now, PRIMARY, timers)
    [Retransmit(messages=[...]), DeliverReady()]

    """
    actions = []
    if role == PRIMARY:
        due = []
        for entry in conn.sent.values():
            if (not entry.acked and entry.last_sent is not None and
                    now - entry.last_sent >= timers.retransmit + conn.send_delay):
                entry.last_sent = now
                due.append(entry.msg)
        if due:
            actions.append(Retransmit(due))
        if conn.ack_due is not None and now >= conn.ack_due:
            conn.ack_due = None
            conn.first_ack_msn = conn.received_up_to
            conn.first_ack_deadline = now + timers.first_ack
            actions.append(SendFirstAck(conn.first_ack_msn))
        elif (conn.first_ack_deadline is not None and
              now >= conn.first_ack_deadline):
            conn.first_ack_deadline = now + timers.first_ack
            actions.append(SendFirstAck(conn.first_ack_msn))
        if (conn.keepalive_deadline is not None and
                now >= conn.keepalive_deadline):
            conn.keepalive_deadline = now + timers.keepalive
            actions.append(SendKeepAlive())
    nacks = conn.nacks
    if nacks and (conn.nack_deadline is None or now >= conn.nack_deadline):
        conn.nack_deadline = now + timers.retransmit
        if role == PRIMARY:
            actions.append(SendNackRemote(conn.recv_view, tuple(nacks)))
        else:
            actions.append(SendNackLocal(conn.recv_view, tuple(nacks)))
    elif not nacks:
        conn.nack_deadline = None
    actions.append(DeliverReady())
    return actions


def next_deadline(conn, role, timers):
    "The earliest instant periodic_tick has something to do."
    times = []
    if role == PRIMARY:
        times.extend(e.last_sent + timers.retransmit + conn.send_delay
                     for e in conn.sent.values()
                     if not e.acked and e.last_sent is not None)
        for t in (conn.ack_due, conn.first_ack_deadline,
                  conn.keepalive_deadline):
            if t is not None:
                times.append(t)
    if conn.nacks:
        times.append(conn.nack_deadline if conn.nack_deadline is not None
                     else 0)
    return min(times) if times else None


def handle_first_ack(conn, msg, role, backup_count, max_ack):
    """A FirstAck from the remote primary acks one of our messages.

    A backup that has generated the acked message, or a primary without
    backups, answers with a SecondAck. A primary that keeps receiving
    FirstAcks for the same message invokes flow control.

    """
    body = ControlBody.unpack(msg.payload)
    if msg.header.ack_view_num != conn.send_view:
        return None
    entry = conn.sent.get(body.acked_msn)
    if entry is not None:
        entry.first_ack_count += 1
        if role == PRIMARY and entry.first_ack_count > max_ack:
            return FLOW_CONTROL
    generated = 0 < body.acked_msn < conn.msg_seq_count
    if generated and (role != PRIMARY or backup_count == 0):
        return SEND_SECOND_ACK
    return None


def handle_second_ack(conn, msg, role):
    """Stop retransmitting our FirstAck, or learn that we miss messages.

    The SecondAck acks messages of the sender's view, which is carried in
    its header.

    """
    body = ControlBody.unpack(msg.payload)
    if role == PRIMARY:
        if (conn.first_ack_deadline is not None and
                body.acked_msn >= conn.first_ack_msn):
            conn.first_ack_deadline = None
            return STOP_FIRST_ACK
        return None
    view = msg.header.primary_view_num
    if view != conn.recv_view or body.acked_msn <= conn.received_up_to:
        return None
    high = conn.high.get(view, 0)
    for m in range(high + 1, body.acked_msn + 1):
        conn.slots[(view, m)] = None
    conn.high[view] = max(high, body.acked_msn)
    missing = tuple(m for m in conn.nacks if m <= body.acked_msn)
    return AppendNack(view, missing) if missing else None


def handle_nack(conn, body, local=False):
    """The messages a Nack asks for that this end still holds.

    A remote nack names messages we sent. A local nack comes from a backup
    of our own group and names messages we received.

    """
    found = []
    if not local:
        if body.view != conn.send_view:
            return None
        found = [conn.sent[m].msg for m in body.missing if m in conn.sent]
    else:
        delivered = dict(((d.view, d.msn), d.msg) for d in conn.delivered)
        for m in body.missing:
            msg = (conn.slots.get((body.view, m)) or
                   delivered.get((body.view, m)))
            if msg is not None:
                found.append(msg)
    return Retransmit(found) if found else None


def nack_message(conn, precedence, view, missing, local=False,
                 group_id=None):
    """A Nack for missing messages of the remote sender's view.

    A local nack travels on the intra-group connection and names the
    connection by remote group in its body.

    """
    k = conn.key
    if local:
        header = MessageHeader(MessageType.Nack, group_id, group_id, k.seq,
                               k.role, conn.send_view, precedence)
        body = NackBody(view, tuple(missing), k.remote)
    else:
        header = _header(conn, MessageType.Nack, precedence)
        body = NackBody(view, tuple(missing))
    return Message(header, (), body.pack())


def reflection_bookkeeping(conn, sent_entries, received_reflected):
    """Keep piggybacking an entry until it has been reflected back.

    Returns the updated pending list.

    """
    reflected = set(e.key for e in received_reflected)
    pending = [e for e in conn.pending_reflection if e.key not in reflected]
    known = set(e.key for e in pending)
    for e in sent_entries:
        if e.key not in known and e.key not in reflected:
            pending.append(e)
            known.add(e.key)
    conn.pending_reflection = pending
    return pending


def retain_remote_orders(conn, entries, window=RETAIN_WINDOW):
    """Hold the remote primary's entries and queue them for reflection.

    Only the newest window entries are held, by (view, orderSeqNum).

    """
    fresh = []
    for e in entries:
        if e.key not in conn.retained:
            conn.retained[e.key] = e
            fresh.append(e)
    conn.to_reflect.extend(fresh)
    excess = len(conn.retained) - window
    if excess > 0:
        oldest = sorted(conn.retained.values(),
                        key=lambda e: (e.primary_view_num, e.order_seq_num))
        for e in oldest[:excess]:
            del conn.retained[e.key]
    return fresh


def take_reflections(conn):
    out, conn.to_reflect = conn.to_reflect, []
    return out


def retained_beyond(conn, pvn_floor, order_seq):
    "Retained entries the remote group's new primary may lack."
    return sorted((e for e in conn.retained.values()
                   if e.primary_view_num >= pvn_floor and
                   e.order_seq_num > order_seq),
                  key=lambda e: (e.order_seq_num, e.primary_view_num))


def drop_retained_before(conn, pvn):
    for key in [k for k, e in conn.retained.items()
                if e.primary_view_num < pvn]:
        del conn.retained[key]
    conn.to_reflect = [e for e in conn.to_reflect
                       if e.primary_view_num >= pvn]


def renumber_sent(conn, recv_up_to, new_view, precedence, restamp,
                  orders=()):
    """Resume sending under a new primary view.

    Logged messages at or below the remote's recvUpToMsn are dropped, the
    rest renumbered from 1 and stamped with the new primary's precedence.
    restamp(entry) returns the timestamp for each renumbered message.
    Returns the renumbered entries.

    """
    old = sorted(conn.sent.values(), key=lambda e: e.msn)
    conn.sent = {}
    conn.send_view = new_view
    conn.msg_seq_count = 1
    conn.last_acked = 0
    conn.ack_due = None
    out = []
    for entry in old:
        if entry.msn <= recv_up_to:
            continue
        msn = conn.msg_seq_count
        conn.msg_seq_count += 1
        h = entry.msg.header
        ts = restamp(entry)
        header = MessageHeader(h.message_type, h.source_group_id,
                               h.dest_group_id, h.conn_seq_num, h.role,
                               new_view, precedence, msn,
                               ack_view_num=conn.recv_view,
                               ack=conn.received_up_to, back=h.back,
                               timestamp=ts)
        msg = Message(header, tuple(orders), entry.msg.payload)
        conn.sent[msn] = SentEntry(msn, msg, ts)
        out.append(conn.sent[msn])
    return out


def _pairs(d):
    return sorted([k, v] for k, v in d.items())


def snapshot_connection(conn):
    """The part of a connection a State message carries, as JSON-able
    values with messages and entries hex encoded."""
    return {
        'key': list(conn.key),
        'msg_seq_count': conn.msg_seq_count,
        'send_view': conn.send_view,
        'recv_view': conn.recv_view,
        'sent': [[e.msn, encode(e.msg).hex(), e.timestamp]
                 for e in sorted(conn.sent.values(), key=lambda e: e.msn)],
        'slots': sorted([v, m, None if msg is None else encode(msg).hex()]
                        for (v, m), msg in conn.slots.items()),
        'up_to': _pairs(conn.up_to),
        'up_to_ts': _pairs(conn.up_to_ts),
        'high': _pairs(conn.high),
        'delivered_up_to': _pairs(conn.delivered_up_to),
        'delivered': [[d.view, d.msn, d.timestamp, encode(d.msg).hex()]
                      for d in conn.delivered],
        'delivered_ts': conn.delivered_ts,
        'remote_wm': conn.remote_wm,
        'recv_ts': conn.recv_ts,
        'remote_precedence': conn.remote_precedence,
        'last_acked': conn.last_acked,
        'retained': sorted(encode_entry(e).hex()
                           for e in conn.retained.values()),
    }


def restore_connection(snap):
    local, remote, seq, role = snap['key']
    conn = ConnectionState(ConnKey(local, remote, seq, Role(role)))
    for name in ('msg_seq_count', 'send_view', 'recv_view', 'delivered_ts',
                 'remote_wm', 'recv_ts', 'remote_precedence', 'last_acked'):
        setattr(conn, name, snap[name])
    for name in ('up_to', 'up_to_ts', 'high', 'delivered_up_to'):
        setattr(conn, name, dict((k, v) for k, v in snap[name]))
    for msn, data, ts in snap['sent']:
        conn.sent[msn] = SentEntry(msn, decode(bytes.fromhex(data)), ts)
    for v, m, data in snap['slots']:
        conn.slots[(v, m)] = (None if data is None
                              else decode(bytes.fromhex(data)))
    conn.delivered = [DeliveredEntry(v, m, ts, decode(bytes.fromhex(data)))
                      for v, m, ts, data in snap['delivered']]
    for data in snap['retained']:
        e = decode_entry(bytes.fromhex(data))
        conn.retained[e.key] = e
    return conn


def is_quiet(conn):
    "Nothing left to (re)send, nack or acknowledge on this connection."
    return (not conn.sent and not conn.delivered and not conn.slots and
            conn.first_ack_deadline is None and conn.ack_due is None)
