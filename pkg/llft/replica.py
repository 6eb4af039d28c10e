"""This module contains the replica engine: one simulated process of a group,
driven one event at a time.

A Replica composes the per-connection rules (conn), the watermarks
(buffers), the membership protocol (membership) and the determinizer around
an application, and implements semi-active and semi-passive replication.
Every handler appends what it wants sent to the outbox, which step returns
as Outbound tuples; nothing in here knows about the network.

The ordering information of a group is a single stream of OrderEntry,
numbered by orderSeqNum across views. The primary appends to it, the other
members process it strictly in sequence.

"""
import json
import logging
import random
from collections import OrderedDict, namedtuple
from dataclasses import dataclass

from llft import membership as ms
from llft.apps import make_app
from llft.buffers import (BACKUP, PRIMARY, WatermarkState,
                          compute_back_field, garbage_collect, observe,
                          refresh, report_backup, retain_backups,
                          stamp_outgoing)
from llft.conn import (ACCEPTED, DUPLICATE, FLOW_CONTROL, GAP,
                       SEND_SECOND_ACK, DeliverReady, Retransmit,
                       SendFirstAck, SendKeepAlive, SendNackLocal,
                       SendNackRemote, arm_first_ack, control_message,
                       deliver_next, drop_retained_before, handle_first_ack,
                       handle_nack, handle_second_ack, is_quiet,
                       nack_message, new_connection, next_deadline,
                       note_ack, note_last_sent, periodic_tick,
                       receive_app_message, reflection_bookkeeping,
                       renumber_sent, restore_connection, retain_remote_orders,
                       retained_beyond, send_app_message, set_sent_timestamp,
                       snapshot_connection, switch_receive_view,
                       take_reflections, touch)
from llft.determinizer import (Determinizer, LocalIO, order_type,
                               read_virtual_clock)
from llft.wire import (ADD, BirthId, ConnKey, ControlBody, HeartbeatBody,
                       MalformedMessage, Member, MembershipAckBody,
                       MembershipChangeBody, Message, MessageHeader,
                       MessageType, MsgOrder, NackBody, NewPrimaryViewBody,
                       OrderEntry, OrderType, ProposeBackupBody,
                       ProposePrimaryBody, REMOVE, Role, UpdateOrder,
                       ViewChangeOrder, canonical_json, decode, encode,
                       expand_entries, identity, merge_entries, unpack_body)

logger = logging.getLogger(__name__)

SEMI_ACTIVE, SEMI_PASSIVE = 'semi-active', 'semi-passive'
MODES = (SEMI_ACTIVE, SEMI_PASSIVE)

SERVER, CLIENT = 'server', 'client'

# engine status
JOINING = 'joining'
AWAITING_STATE = 'awaiting-state'
SERVING_BACKUP = 'backup'
SERVING_PRIMARY = 'primary'
PROPOSING = 'proposer'
RECOVERING = 'recovering'
CRASHED = 'crashed'

# most entries a primary Heartbeat piggybacks
HEARTBEAT_ENTRIES = 128

Outbound = namedtuple('Outbound', 'group data delay')


class OrderStream(object):

    """The ordering information of one group, by orderSeqNum.

    Entries of a primary view older than the stream's are refused. For one
    number, an entry of a newer primary view replaces an unprocessed entry
    of an older one.

    """

    def __init__(self, pvn=1, next_seq=1):
        self.log = {}
        self.next_seq = next_seq
        self.pvn = pvn
        # entries at or below floor have been pruned
        self.floor = next_seq - 1

    @property
    def last_seq(self):
        "The last processed (or, at the primary, appended) number."
        return self.next_seq - 1

    def add(self, entry):
        seq = entry.order_seq_num
        if entry.primary_view_num < self.pvn or seq < self.next_seq:
            return False
        held = self.log.get(seq)
        if held is not None and held.primary_view_num >= entry.primary_view_num:
            return False
        self.log[seq] = entry
        return True

    def append(self, order_type, group_id, body):
        entry = OrderEntry(order_type, self.next_seq, group_id, self.pvn,
                           body)
        self.log[self.next_seq] = entry
        self.next_seq += 1
        return entry

    def head(self):
        return self.log.get(self.next_seq)

    def advance(self):
        self.next_seq += 1

    def processed(self, after, limit=None):
        out = [self.log[s] for s in range(max(after, self.floor) + 1,
                                          self.next_seq)
               if s in self.log]
        return out[:limit] if limit else out

    def known_beyond(self, seq):
        return [self.log[s] for s in sorted(self.log) if s > seq]

    def highest_pvn(self):
        return max([self.pvn] + [e.primary_view_num
                                 for e in self.log.values()])

    def prune(self, upto):
        """Forget processed entries up to upto, once no member can ask for
        them again."""
        upto = min(upto, self.last_seq)
        if upto <= self.floor:
            return
        for s in range(self.floor + 1, upto + 1):
            self.log.pop(s, None)
        self.floor = upto

    def switch_view(self, pvn):
        """Adopt a new primary view, discarding unprocessed entries of
        older ones."""
        self.pvn = pvn
        for s in [s for s, e in self.log.items()
                  if s >= self.next_seq and e.primary_view_num < pvn]:
            del self.log[s]


@dataclass
class StateTransfer(object):
    "A committed joiner waiting for its State message."
    birth: BirthId
    precedence: int
    change_id: int
    data: bytes = None
    deadline: int = None
    count: int = 0


def _members_json(members):
    return [[[m.birth.host_id, m.birth.pid, m.birth.ts], m.precedence,
             m.rank] for m in members]


def _members_from_json(data):
    return tuple(Member(BirthId(*b), p, r) for b, p, r in data)


_STATE_KEYS = ('group', 'to', 'change', 'pvn', 'members',
               'primary_precedence', 'max_precedence', 'order_seq',
               'lamport', 'app', 'det', 'conns')


def _state_snapshot(payload):
    "Decode a State payload, raising MalformedMessage on anything off."
    try:
        snap = json.loads(payload.decode('utf-8'))
    except (UnicodeDecodeError, ValueError) as e:
        raise MalformedMessage('bad state payload: %s' % e)
    if not isinstance(snap, dict):
        raise MalformedMessage('state payload is not an object')
    missing = [k for k in _STATE_KEYS if k not in snap]
    if missing:
        raise MalformedMessage('state payload lacks %s' % ', '.join(missing))
    to = snap['to']
    if (not isinstance(to, list) or len(to) != 3 or
            not all(isinstance(x, int) for x in to)):
        raise MalformedMessage('state payload has a bad recipient')
    snap['to'] = BirthId(*to)
    return snap


def _stable_hint(body, orders):
    """What a primary's heartbeat tells about the entries every backup has
    processed: it piggybacks those beyond that point, from the first on."""
    entries = expand_entries(orders)
    if entries:
        return entries[0].order_seq_num - 1
    return body.last_order_seq


def _earliest(times):
    times = [t for t in times if t is not None]
    return min(times) if times else None


class Replica(object):

    """One process: a server replica or a (singleton) client.

    The public surface is start, step (or on_message and on_timer),
    next_deadline, is_quiet and crash. Each handler returns the Outbound
    messages it produced.

    """

    def __init__(self, name, group_id, host_id, timers, kind=SERVER,
                 app='kv', mode=SEMI_ACTIVE, seed=0, skew=0, trace=None,
                 client=None, target=None):
        self.name = name
        self.group_id = group_id
        self.host_id = host_id
        self.timers = timers
        self.kind = kind
        self.app_name = app
        self.mode = mode
        self.seed = seed
        self.skew = skew
        self.trace = trace
        self.client = client
        self.target = target
        self.birth = BirthId(host_id, 1, 0)
        self.now = 0
        self.max_seen = 0
        self.outbox = []
        self._fresh()

    def _fresh(self):
        "Everything an incarnation owns, discarded by a reset."
        rng = random.Random('%s/%s/%d' % (self.seed, self.name,
                                          self.birth.pid))
        self.status = JOINING
        self.m = None
        self.precedence = None
        self.view_prec = None
        self.conns = {}
        self.ws = WatermarkState()
        self.stream = OrderStream()
        self.det = Determinizer(rng, self._physical, LocalIO(
            random.Random('io/%s/%s/%d' % (self.seed, self.name,
                                           self.birth.pid))))
        self.app = self.client if self.kind == CLIENT else \
            make_app(self.app_name)
        self.reorder = {}
        self.task_conn = {}
        self.awaiting = OrderedDict()
        self.pending_ts = {}
        self.piggybacked = {}
        self.stall = None
        # membership, per role
        self.seen = set()
        self.last_primary_hb = self.now
        self.primary_settled = True
        self.primary_back = None
        self.election = None
        self.recovery = None
        self.change = None
        self.change_data = None
        self.change_queue = []
        self.change_id = 0
        self.suspected = set()
        self.transfer = None
        self.excluded = {}
        self.backup_last_hb = {}
        self.backup_processed = {}
        self.join_state = None
        self.join_log = []
        self.join_entries = []
        # deadlines
        self.hb_deadline = None
        self.election_deadline = None
        self.npv_deadline = None
        self.change_deadline = None
        self.join_deadline = None
        self.task_deadline = None

    def _physical(self):
        return self.now + self.skew

    # ---- trace and output ------------------------------------------------

    def _emit(self, k, **fields):
        if self.trace is not None:
            self.trace.emit(self.now, self.name, k, g=self.group_id,
                            **fields)

    def _send(self, group, msg, delay=0):
        data = msg if isinstance(msg, bytes) else encode(msg)
        self.outbox.append(Outbound(group, data, delay))

    def _group_header(self, message_type, back=0):
        return MessageHeader(message_type, self.group_id, self.group_id, 0,
                             Role.server, self.m.primary_view_num,
                             self.m.primary_precedence, back=back,
                             timestamp=self.ws.my_timestamp)

    def _flush(self):
        out, self.outbox = self.outbox, []
        return out

    @property
    def is_primary(self):
        return self.status == SERVING_PRIMARY

    @property
    def holds_precedence(self):
        "Primary, proposer or recovering primary."
        return (self.m is not None and
                self.precedence == self.m.primary_precedence)

    # ---- starting --------------------------------------------------------

    def start(self, now, births=None):
        """Bootstrap into the committed membership births (in precedence
        order), or start joining when births is None."""
        self.now = now
        self.birth = BirthId(self.host_id, self.birth.pid, now)
        if births is None:
            self._start_join()
            return self._flush()
        births = [self.birth if b is None else b for b in births]
        self.m = ms.bootstrap(self.group_id, births)
        self.precedence = self.m.find(self.birth).precedence
        self.view_prec = self.m.primary_precedence
        self.last_primary_hb = now
        if self.precedence == self.m.primary_precedence:
            self.status = SERVING_PRIMARY
            for p in self._backups():
                self._track_backup(p, 0)
            self._emit('commit', kind='bootstrap', pvn=1,
                       prec=self.precedence,
                       members=_members_json(self.m.members))
        else:
            self.status = SERVING_BACKUP
        self._emit('view', op='v:1', pvn=1, prec=self.view_prec,
                   role=self.status)
        if self.kind == SERVER:
            self.hb_deadline = now
        return self._flush()

    def _start_join(self):
        self.status = JOINING
        self.join_state = ms.JoinState()
        self.join_deadline = self.now
        self._emit('join', phase='propose', birth=list(
            (self.birth.host_id, self.birth.pid, self.birth.ts)))

    def crash(self, now):
        self.now = now
        self.status = CRASHED
        self.outbox = []

    # ---- dispatch ----------------------------------------------------------

    def step(self, now, data=None):
        "A network delivery when data is given, otherwise a timer expiry."
        if data is not None:
            return self.on_message(now, data)
        return self.on_timer(now)

    def on_message(self, now, data):
        self.now = now
        if self.status == CRASHED:
            return []
        try:
            msg = decode(data)
            h = msg.header
            if h.dest_group_id != self.group_id:
                return []
            observe(self.ws, h.timestamp)
            if h.source_group_id == self.group_id:
                self._on_group_message(msg, data)
            else:
                self._on_remote_message(msg)
        except MalformedMessage as e:
            logger.debug("%s: dropping malformed message: %s", self.name, e)
            self._emit('drop', reason=str(e))
        self._after_event()
        return self._flush()

    def on_timer(self, now):
        self.now = now
        if self.status == CRASHED:
            return []
        t = self.timers
        if self.hb_deadline is not None and now >= self.hb_deadline:
            self.hb_deadline = now + t.heartbeat
            if self.m is not None and self.status not in (JOINING,
                                                          AWAITING_STATE):
                self._heartbeat()
        if self.status == JOINING and now >= self.join_deadline:
            self._join_timer()
        if self.status in (SERVING_BACKUP, AWAITING_STATE):
            self._watch_primary()
        if self.status == SERVING_PRIMARY:
            self._watch_backups()
            self._membership_timers()
        if (self.status == PROPOSING and self.election_deadline is not None
                and now >= self.election_deadline):
            self._election_step(timer=True)
        if (self.status == RECOVERING and self.recovery is not None and
                now >= self.npv_deadline):
            self._resend_npv()
        if self.kind == CLIENT and self.is_primary:
            self._client_timer()
        if (self.is_primary and self.task_deadline is not None and
                now >= self.task_deadline):
            self._task_round()
        self._tick_connections()
        if self.stall is not None and now >= self.stall[1]:
            self._stall_nack()
        self._after_event()
        return self._flush()

    def next_deadline(self):
        if self.status == CRASHED:
            return None
        times = [self.hb_deadline, self.task_deadline]
        if self.status == JOINING:
            times.append(self.join_deadline)
        if self.status in (SERVING_BACKUP, AWAITING_STATE):
            times.append(self._watch_deadline())
        if self.status == SERVING_PRIMARY:
            times.extend([self.change_deadline,
                          self.transfer.deadline if self.transfer else None])
            times.extend(ms.backup_fault_deadline(self.backup_last_hb[p],
                                                  self.timers)
                         for p in self._watched_backups())
        if self.status == PROPOSING:
            times.append(self.election_deadline)
        if self.status == RECOVERING and self.recovery is not None:
            times.append(self.npv_deadline)
        if self.kind == CLIENT and self.is_primary:
            times.append(self.app.next_request_at())
        if self.stall is not None:
            times.append(self.stall[1])
        role = self._tick_role()
        if role is not None:
            times.extend(next_deadline(c, role, self.timers)
                         for c in self.conns.values())
        return _earliest(times)

    def _after_event(self):
        if self.status in (SERVING_BACKUP, PROPOSING, RECOVERING):
            self._drain()
        if self.status == RECOVERING:
            self._recovery_progress()
        if self.status == SERVING_PRIMARY:
            self._maybe_checkpoint()
            self.stream.prune(self._stable_seq())
        if self.status in (SERVING_PRIMARY, SERVING_BACKUP, PROPOSING,
                           RECOVERING):
            self._collect_garbage()

    # ---- group messages ----------------------------------------------------

    def _on_group_message(self, msg, data):
        t = msg.header.message_type
        if self.status in (JOINING, AWAITING_STATE):
            return self._on_group_message_joining(msg)
        if (t not in (MessageType.ProposePrimary, MessageType.MembershipAck,
                      MessageType.ProposeBackup, MessageType.Nack) and
                self._superseded(msg)):
            if self.holds_precedence:
                self._send(self.group_id, data)
            self._reset('superseded by precedence %d'
                        % msg.header.precedence)
            return
        if t == MessageType.Heartbeat:
            self._on_heartbeat(msg)
        elif t == MessageType.ProposePrimary:
            self._on_propose_primary(msg)
        elif t == MessageType.ProposeBackup:
            self._on_propose_backup(msg)
        elif t in (MessageType.AcceptBackup, MessageType.RemoveBackup):
            self._on_membership_change(msg)
        elif t == MessageType.State:
            self._on_state(msg)
        elif t == MessageType.MembershipAck:
            self._on_membership_ack(msg)
        elif t == MessageType.Nack:
            self._on_local_nack(msg)

    def _superseded(self, msg):
        """A message of a competing membership of higher precedence.

        A backup only trusts one whose primary has concluded its view, an
        unconcluded proposer may still be pruned.

        """
        h = msg.header
        if h.precedence <= self.m.primary_precedence:
            return False
        if self.holds_precedence:
            return True
        if h.primary_view_num < self.m.primary_view_num:
            return False
        if h.message_type == MessageType.Heartbeat:
            return unpack_body(HeartbeatBody, msg.payload).settled
        return h.message_type in (MessageType.AcceptBackup,
                                  MessageType.RemoveBackup,
                                  MessageType.State)

    def _heartbeat(self):
        if self.holds_precedence:
            role = PRIMARY
            body = HeartbeatBody(self.precedence, self.birth,
                                 self.stream.last_seq, (), self.is_primary)
            orders = merge_entries(self.stream.processed(
                self._stable_seq(), HEARTBEAT_ENTRIES))
        else:
            role = BACKUP
            marks = tuple((k, c.recv_ts)
                          for k, c in sorted(self.conns.items()))
            body = HeartbeatBody(self.precedence, self.birth,
                                 self.stream.last_seq, marks,
                                 self.primary_settled)
            orders = ()
        header = self._group_header(MessageType.Heartbeat,
                                    compute_back_field(self.ws, role))
        self._send(self.group_id, Message(header, tuple(orders),
                                          body.pack()))

    def _on_heartbeat(self, msg):
        h = msg.header
        body = unpack_body(HeartbeatBody, msg.payload)
        p = self.m.primary_precedence
        if body.precedence == p and h.precedence == p:
            if self.holds_precedence:
                return
            self.last_primary_hb = self.now
            self.primary_settled = body.settled
            self.primary_back = h.back
            self._ingest(msg.orders)
            if body.settled:
                self.stream.prune(_stable_hint(body, msg.orders))
            return
        if not self.holds_precedence:
            return
        member = self.m.member(body.precedence)
        if member is not None and member.birth == body.birth:
            report_backup(self.ws, body.precedence, h.back, dict(body.marks))
            self.backup_last_hb[body.precedence] = self.now
            self.backup_processed[body.precedence] = body.last_order_seq
        elif self.is_primary and body.birth in self.excluded:
            self._send(self.group_id, self.excluded[body.birth])

    def _ingest(self, orders):
        for e in expand_entries(orders):
            if e.group_id == self.group_id:
                self.stream.add(e)

    def _reset(self, reason):
        logger.info("%s: reset (%s), rejoining", self.name, reason)
        self._emit('reset', reason=reason, prec=self.precedence)
        if self.m is not None:
            self.max_seen = max(self.max_seen, self.m.max_precedence)
        self.birth = BirthId(self.host_id, self.birth.pid + 1, self.now)
        self._fresh()
        self.hb_deadline = None
        self._start_join()

    # ---- fault detection and the primary change ----------------------------

    def _watch_deadline(self):
        if self.status == AWAITING_STATE:
            rank = max(self.m.rank_of(self.precedence) or 2, 2)
        else:
            rank = self.m.rank_of(self.precedence)
        return ms.primary_watch_deadline(self.last_primary_hb, rank,
                                         self.timers)

    def _watch_primary(self):
        if self.now < self._watch_deadline():
            return
        if self.status == AWAITING_STATE:
            self._reset('no State from the primary')
            return
        proposal = ms.on_primary_timeout(self.m, self.precedence, self.seen,
                                         self.stream.last_seq)
        if proposal is None:
            self.last_primary_hb = self.now
            return
        self._start_election(proposal)

    def _start_election(self, proposal):
        logger.info("%s: primary %d silent, proposing myself (%d)",
                    self.name, self.m.primary_precedence, self.precedence)
        self.status = PROPOSING
        self.election = ms.ElectionState(proposal, started=self.now)
        ms.adopt_proposal(self.m, proposal)
        self.seen = set()
        self.backup_last_hb, self.backup_processed = {}, {}
        self.ws.per_backup_watermark = {}
        for p in self._backups():
            self._track_backup(p, 0)
        self._emit('propose', kind='primary', pvn=proposal.primary_view_num,
                   prec=self.precedence,
                   members=_members_json(proposal.members))
        self._send_proposal()
        self._election_step()

    def _send_proposal(self):
        es = self.election
        header = self._group_header(MessageType.ProposePrimary)
        self._send(self.group_id, Message(header, (), es.proposal.pack()))
        self.election_deadline = self.now + self.timers.membership_retransmit

    def _election_step(self, acked_by=None, timer=False):
        es = self.election
        outcome, pruned = ms.election_progress(es, acked_by, timer,
                                               self.timers.max_count)
        if outcome == ms.PRUNED:
            self.m.members = ms.rank_members(es.proposal.members)
            for p in pruned:
                self._forget_backup(p)
            outcome, _ = ms.election_progress(es)
            if outcome != ms.CONCLUDED:
                self._send_proposal()
        elif outcome == ms.RETRANSMIT:
            self._send_proposal()
        if outcome == ms.CONCLUDED:
            self.election = None
            self.election_deadline = None
            self.status = RECOVERING
            self._emit('ack', kind='election', pvn=es.proposal.primary_view_num,
                       prec=self.precedence, acks=sorted(es.acks))

    def _on_propose_primary(self, msg):
        body = unpack_body(ProposePrimaryBody, msg.payload)
        self.seen.add((body.primary_view_num, body.precedence))
        action = ms.on_propose_primary(self.m, self.precedence, body)
        if action == ms.ADOPT and self.status == SERVING_BACKUP:
            logger.info("%s: adopting proposal of %d", self.name,
                        body.precedence)
            ms.adopt_proposal(self.m, body)
            self.seen = set()
            self.primary_settled = False
            self.last_primary_hb = self.now
            self._ack_proposal(body)
        elif action == ms.RESET:
            self._reset('excluded by proposal of %d' % body.precedence)
        elif (body.precedence == self.m.primary_precedence and
              not self.holds_precedence and
              self.m.member(self.precedence) is not None):
            # our ack was lost
            self._ack_proposal(body)

    def _ack_proposal(self, body):
        ack = MembershipAckBody(MessageType.ProposePrimary, self.precedence,
                                self.birth, body.primary_view_num,
                                recv_up_to=self.stream.last_seq)
        orders = self.stream.known_beyond(body.last_order_seq)
        header = self._group_header(MessageType.MembershipAck)
        self._send(self.group_id, Message(header, tuple(orders), ack.pack()))

    def _on_membership_ack(self, msg):
        body = unpack_body(MembershipAckBody, msg.payload)
        if body.acked_type == MessageType.ProposePrimary:
            es = self.election
            if (self.status != PROPOSING or es is None or
                    body.primary_view_num != es.proposal.primary_view_num):
                return
            self._ingest(msg.orders)
            self.backup_processed[body.precedence] = body.recv_up_to
            self.backup_last_hb[body.precedence] = self.now
            self._election_step(acked_by=body.precedence)
        elif body.acked_type in (MessageType.AcceptBackup,
                                 MessageType.RemoveBackup):
            cs = self.change
            if (self.is_primary and cs is not None and
                    body.change_id == cs.body.change_id):
                outcome, _ = ms.change_progress(cs, acked_by=body.precedence)
                if outcome == ms.CONCLUDED:
                    self._commit_change()
        elif body.acked_type == MessageType.State:
            st = self.transfer
            if self.is_primary and st is not None and body.birth == st.birth:
                self.transfer = None
                self.backup_last_hb[st.precedence] = self.now
                self._next_change()

    # ---- recovery (second phase of a primary change) -----------------------

    def _recovery_progress(self):
        if self.stream.head() is not None:
            return
        if self.recovery is None:
            self._begin_recovery()
        if ms.recovery_complete(self.recovery, self.conns,
                                self.m.primary_view_num, True, True):
            self._conclude()

    def _begin_recovery(self):
        pvn = self.stream.highest_pvn() + 1
        self.recovery = ms.RecoveryState(pvn, self.m.members,
                                         started=self.now)
        logger.info("%s: recovering virtual synchrony for view %d on %d "
                    "connections", self.name, pvn, len(self.conns))
        for key, conn in sorted(self.conns.items()):
            self.recovery.conns[key] = ms.ConnRecovery()
            self._send_npv(conn)
        self.npv_deadline = self.now + self.timers.retransmit

    def _send_npv(self, conn):
        body = NewPrimaryViewBody(self.recovery.primary_view_num,
                                  self.stream.last_seq, conn.last_sent_msn)
        msg = control_message(conn, MessageType.NewPrimaryView,
                              self.precedence, body,
                              back=compute_back_field(self.ws, PRIMARY),
                              timestamp=self.ws.my_timestamp)
        self._send(conn.key.remote, msg)

    def _resend_npv(self):
        for key, cr in sorted(self.recovery.conns.items()):
            if not cr.acked:
                cr.count += 1
                self._send_npv(self.conns[key])
        self.npv_deadline = self.now + self.timers.retransmit

    def _on_npv_ack(self, msg):
        h = msg.header
        body = unpack_body(MembershipAckBody, msg.payload)
        if body.acked_type != MessageType.NewPrimaryView:
            return
        if self.status in (SERVING_BACKUP, PROPOSING, RECOVERING):
            self._ingest(msg.orders)
        rs = self.recovery
        if (self.status != RECOVERING or rs is None or
                body.primary_view_num != rs.primary_view_num):
            return
        key = h.receiver_key
        cr = rs.conns.get(key)
        if cr is None or cr.acked:
            return
        cr.acked = True
        cr.recv_up_to, cr.last_sent = body.recv_up_to, body.last_sent
        note_last_sent(self.conns[key], h.primary_view_num, body.last_sent)
        self._emit('ack', kind='npv', conn=key.label(),
                   pvn=rs.primary_view_num, recv_up_to=body.recv_up_to,
                   last_sent=body.last_sent)

    def _conclude(self):
        """Flip to primary of the new view: order the view change, resume
        every connection under the new view and resend what the remote
        group has not received."""
        rs, self.recovery = self.recovery, None
        self.npv_deadline = None
        pvn = rs.primary_view_num
        self.m.primary_view_num = pvn
        self.m.members = ms.rank_members(self.m.members)
        self.status = SERVING_PRIMARY
        self.view_prec = self.precedence
        self.stream.switch_view(pvn)
        resume = tuple((key, cr.recv_up_to)
                       for key, cr in sorted(rs.conns.items()) if cr.acked)
        self._append(OrderType.ViewChangeOrder, ViewChangeOrder(
            pvn, self.precedence, self.m.members, resume))
        recv_up_to = dict(resume)
        for key, conn in sorted(self.conns.items()):
            entries = renumber_sent(
                conn, recv_up_to.get(key, 0), pvn, self.precedence,
                lambda e: e.timestamp or stamp_outgoing(self.ws))
            for entry in entries:
                self._append(OrderType.MsgOrder, MsgOrder(
                    pvn, conn.app_type(), key.seq, key.sock_fd, 0,
                    key.remote, entry.msn, 0, entry.timestamp))
                entry.last_sent = self.now
                self._send(key.remote, entry.msg, conn.send_delay)
                self._emit_send(conn, entry.msg)
            conn.pending_reflection = []
            if conn.received_up_to:
                arm_first_ack(conn, self.now, self.timers)
            touch(conn, self.now, self.timers)
        for p in self._backups():
            if p not in self.ws.per_backup_watermark:
                self._track_backup(p, 0)
        retain_backups(self.ws, self._backups())
        self.piggybacked = {}
        self.pending_ts = {}
        logger.info("%s: primary of view %d (precedence %d)", self.name,
                    pvn, self.precedence)
        self._emit('commit', kind='primary', pvn=pvn, prec=self.precedence,
                   members=_members_json(self.m.members),
                   took=self.now - rs.started)
        self._emit_view()
        if self.mode == SEMI_PASSIVE:
            for task_id, payload in list(self.awaiting.items()):
                self.det.spawn(task_id, self.app.handle(task_id, payload))
            self.awaiting.clear()
        self._schedule_tasks()
        self._deliver_all()

    def _emit_view(self):
        pvn = self.m.primary_view_num
        self._emit('view', op='v:%d' % pvn, pvn=pvn, prec=self.view_prec,
                   role=self.status)
        self._emit('digest', point='view:%d:%d:%d'
                   % (self.group_id, pvn, self.view_prec),
                   value=self.app.digest())

    # ---- backups: additions and removals -----------------------------------

    def _backups(self):
        return [p for p in self.m.precedences if p != self.precedence]

    def _track_backup(self, p, processed):
        report_backup(self.ws, p, 0)
        self.backup_last_hb[p] = self.now
        self.backup_processed[p] = processed

    def _forget_backup(self, p):
        self.backup_last_hb.pop(p, None)
        self.backup_processed.pop(p, None)
        self.suspected.discard(p)
        retain_backups(self.ws, self._backups())

    def _stable_seq(self):
        "Entries up to here have been processed by every backup."
        backups = self._backups()
        if not backups:
            return self.stream.last_seq
        return min(self.backup_processed.get(p, 0) for p in backups)

    def _watched_backups(self):
        waiting = self.transfer.precedence if self.transfer else None
        return [p for p in self._backups()
                if p in self.backup_last_hb and p not in self.suspected and
                p != waiting]

    def _watch_backups(self):
        for p in self._watched_backups():
            if self.now >= ms.backup_fault_deadline(self.backup_last_hb[p],
                                                    self.timers):
                logger.info("%s: backup %d silent, removing it", self.name, p)
                self.suspected.add(p)
                self.change_queue.append((REMOVE, p))
        self._next_change()

    def _on_propose_backup(self, msg):
        if not self.is_primary:
            return
        birth = unpack_body(ProposeBackupBody, msg.payload).birth
        if self.m.find(birth) is not None:
            return
        if (ADD, birth) not in self.change_queue and not (
                self.change is not None and self.change.body.subject == birth):
            self.change_queue.append((ADD, birth))
        self._next_change()

    def _next_change(self):
        if (not self.is_primary or self.change is not None or
                self.transfer is not None):
            return
        while self.change_queue:
            kind, subject = self.change_queue.pop(0)
            if kind == ADD:
                if self.m.find(subject) is not None:
                    continue
                self.change_id += 1
                cs = ms.propose_add(self.m, subject, self.change_id)
            else:
                if self.m.member(subject) is None:
                    continue
                self.change_id += 1
                cs = ms.propose_remove(self.m, subject, self.change_id)
            self.change = cs
            self._emit('propose', kind='add' if kind == ADD
                       else 'remove', pvn=self.m.primary_view_num,
                       prec=self.precedence, change=cs.body.change_id,
                       members=_members_json(cs.body.members))
            self._send_change()
            if ms.change_progress(cs)[0] == ms.CONCLUDED:
                self._commit_change()
            return

    def _send_change(self):
        cs = self.change
        t = (MessageType.AcceptBackup if cs.body.kind == ADD
             else MessageType.RemoveBackup)
        self.change_data = encode(Message(self._group_header(t), (),
                                          cs.body.pack()))
        self._send(self.group_id, self.change_data)
        self.change_deadline = self.now + self.timers.membership_retransmit

    def _membership_timers(self):
        if (self.change is not None and self.change_deadline is not None and
                self.now >= self.change_deadline):
            outcome, pruned = ms.change_progress(
                self.change, timer=True, max_count=self.timers.max_count)
            if outcome == ms.CONCLUDED:
                self._commit_change()
            else:
                self._send_change()
                if (outcome == ms.PRUNED and
                        ms.change_progress(self.change)[0] == ms.CONCLUDED):
                    self._commit_change()
        st = self.transfer
        if st is not None and st.data is not None and self.now >= st.deadline:
            st.count += 1
            if st.count > self.timers.max_count:
                logger.info("%s: joiner %d never acked its State", self.name,
                            st.precedence)
                self.transfer = None
                self.suspected.add(st.precedence)
                self.change_queue.append((REMOVE, st.precedence))
                self._next_change()
            else:
                self._send(self.group_id, st.data)
                st.deadline = self.now + self.timers.membership_retransmit

    def _commit_change(self):
        cs, self.change = self.change, None
        self.change_deadline = None
        before = dict((m.precedence, m.birth) for m in self.m.members)
        ms.commit_change(self.m, cs.body)
        for p, birth in before.items():
            if self.m.member(p) is None:
                self.excluded[birth] = self.change_data
                self._forget_backup(p)
        logger.info("%s: committed change %d, members %s", self.name,
                    cs.body.change_id, self.m.precedences)
        self._emit('commit', kind='add' if cs.body.kind == ADD else 'remove',
                   pvn=self.m.primary_view_num, prec=self.precedence,
                   change=cs.body.change_id,
                   members=_members_json(self.m.members))
        if cs.body.kind == ADD:
            joiner = self.m.find(cs.body.subject)
            if joiner is not None:
                self._track_backup(joiner.precedence, self.stream.last_seq)
                self.transfer = StateTransfer(cs.body.subject,
                                              joiner.precedence,
                                              cs.body.change_id)
                self._maybe_checkpoint()
        self._next_change()

    def _on_membership_change(self, msg):
        h = msg.header
        body = unpack_body(MembershipChangeBody, msg.payload)
        if self.status != SERVING_BACKUP or h.precedence != \
                self.m.primary_precedence:
            return
        action = ms.on_membership_change(self.m, self.birth, body)
        if action == ms.ADOPT:
            ack = MembershipAckBody(h.message_type, self.precedence,
                                    self.birth, body.primary_view_num,
                                    body.change_id)
            header = self._group_header(MessageType.MembershipAck)
            self._send(self.group_id, Message(header, (), ack.pack()))
        elif action == ms.RESET:
            self._reset('removed by change %d' % body.change_id)

    # ---- state transfer ----------------------------------------------------

    def _paused(self):
        "Delivery waits while a checkpoint is pending."
        return self.transfer is not None and self.transfer.data is None

    def _maybe_checkpoint(self):
        st = self.transfer
        if (st is None or st.data is not None or self.det.busy() or
                any(self.reorder.values())):
            return
        snap = {
            'group': self.group_id,
            'to': [st.birth.host_id, st.birth.pid, st.birth.ts],
            'change': st.change_id,
            'pvn': self.m.primary_view_num,
            'members': _members_json(self.m.members),
            'primary_precedence': self.m.primary_precedence,
            'max_precedence': self.m.max_precedence,
            'order_seq': self.stream.last_seq,
            'lamport': self.ws.my_timestamp,
            'app': self.app.checkpoint().decode('utf-8'),
            'det': self.det.snapshot(),
            'conns': [snapshot_connection(c)
                      for _, c in sorted(self.conns.items())],
        }
        header = self._group_header(MessageType.State)
        st.data = encode(Message(header, (),
                                 canonical_json(snap).encode('utf-8')))
        st.deadline = self.now + self.timers.membership_retransmit
        self.backup_processed[st.precedence] = self.stream.last_seq
        self._send(self.group_id, st.data)
        self._emit('digest', point='state:%d:%d:%d'
                   % (self.group_id, self.m.primary_view_num, st.change_id),
                   value=self.app.digest())
        self._deliver_all()

    def _on_state(self, msg):
        snap = _state_snapshot(msg.payload)
        if snap['to'] == self.birth:
            self._ack_state(snap)

    def _ack_state(self, snap):
        ack = MembershipAckBody(MessageType.State, self.precedence,
                                self.birth, snap['pvn'], snap['change'])
        header = self._group_header(MessageType.MembershipAck)
        self._send(self.group_id, Message(header, (), ack.pack()))

    # ---- joining -----------------------------------------------------------

    def _join_timer(self):
        action = ms.join_progress(self.join_state, self.timers.max_count)
        self.join_deadline = self.now + self.timers.membership_retransmit
        if action == ms.PROPOSE:
            header = MessageHeader(MessageType.ProposeBackup, self.group_id,
                                   self.group_id, 0, Role.server, 1, 1,
                                   timestamp=self.ws.my_timestamp)
            self._send(self.group_id, Message(
                header, (), ProposeBackupBody(self.birth).pack()))
        elif action == ms.FOUND_GROUP:
            self._found_group()

    def _found_group(self):
        self.m = ms.found_group(self.group_id, self.birth, self.max_seen)
        self.precedence = self.view_prec = self.m.primary_precedence
        self.status = SERVING_PRIMARY
        self.join_state = None
        self.join_deadline = None
        self.stream = OrderStream()
        logger.info("%s: heard nobody, founding group %d", self.name,
                    self.group_id)
        self._emit('commit', kind='found', pvn=1, prec=self.precedence,
                   members=_members_json(self.m.members))
        self._emit_view()
        self.join_log, self.join_entries = [], []
        self.hb_deadline = self.now

    def _on_group_message_joining(self, msg):
        h = msg.header
        t = h.message_type
        if t == MessageType.Heartbeat:
            self.join_state.heard = True
            body = unpack_body(HeartbeatBody, msg.payload)
            if body.precedence != h.precedence:
                return
            if (self.status == AWAITING_STATE and
                    h.precedence == self.m.primary_precedence):
                self.last_primary_hb = self.now
            self.join_entries.extend(
                e for e in expand_entries(msg.orders)
                if e.group_id == self.group_id)
        elif t == MessageType.AcceptBackup:
            body = unpack_body(MembershipChangeBody, msg.payload)
            if body.subject != self.birth:
                return
            if self.status == JOINING or body.change_id != self.change_id:
                self.m = ms.Membership(self.group_id, body.primary_view_num,
                                       ms.rank_members(body.members),
                                       h.precedence, body.max_precedence)
                self.precedence = self.m.find(self.birth).precedence
                self.change_id = body.change_id
                self.status = AWAITING_STATE
                self.join_state.accepted = True
                self.join_deadline = None
                self.last_primary_hb = self.now
            ack = MembershipAckBody(MessageType.AcceptBackup, self.precedence,
                                    self.birth, body.primary_view_num,
                                    body.change_id, needs_state=True)
            header = self._group_header(MessageType.MembershipAck)
            self._send(self.group_id, Message(header, (), ack.pack()))
        elif t == MessageType.State and self.status == AWAITING_STATE:
            snap = _state_snapshot(msg.payload)
            if snap['to'] == self.birth:
                self._restore(snap)

    def _restore(self, snap):
        """Become a backup from a State message, then replay what was
        logged while waiting for it."""
        m = self.m
        m.primary_view_num = snap['pvn']
        m.members = _members_from_json(snap['members'])
        m.primary_precedence = snap['primary_precedence']
        m.max_precedence = snap['max_precedence']
        self.view_prec = m.primary_precedence
        self.stream = OrderStream(snap['pvn'], snap['order_seq'] + 1)
        observe(self.ws, snap['lamport'])
        self.app.restore(snap['app'].encode('utf-8'))
        self.det.restore(snap['det'])
        self.conns = dict((c.key, c) for c in
                          (restore_connection(s) for s in snap['conns']))
        self.status = SERVING_BACKUP
        self.primary_settled = True
        self.last_primary_hb = self.now
        self.hb_deadline = self.now
        self._ack_state(snap)
        logger.info("%s: joined group %d as %d at order %d", self.name,
                    self.group_id, self.precedence, snap['order_seq'])
        self._emit('join', phase='state', prec=self.precedence,
                   pvn=m.primary_view_num, order_seq=snap['order_seq'])
        self._emit('digest', point='state:%d:%d:%d'
                   % (self.group_id, m.primary_view_num, snap['change']),
                   value=self.app.digest())
        logged, self.join_log = self.join_log, []
        for msg in logged:
            self._on_remote_app(msg)
        for e in self.join_entries:
            self.stream.add(e)
        self.join_entries = []

    # ---- inter-group messages ----------------------------------------------

    def _on_remote_message(self, msg):
        t = msg.header.message_type
        if self.status in (JOINING, AWAITING_STATE):
            if msg.header.is_application:
                self.join_log.append(msg)
            return
        if t in (MessageType.Request, MessageType.Reply):
            self._on_remote_app(msg)
        elif t in (MessageType.FirstAck, MessageType.SecondAck,
                   MessageType.KeepAlive):
            self._on_control(msg)
        elif t == MessageType.Nack:
            self._on_remote_nack(msg)
        elif t == MessageType.NewPrimaryView:
            self._on_new_primary_view(msg)
        elif t == MessageType.MembershipAck:
            self._on_npv_ack(msg)

    def _conn(self, key, recv_view=1):
        conn = self.conns.get(key)
        if conn is None:
            conn = new_connection(key, send_view=self.m.primary_view_num,
                                  recv_view=recv_view)
            touch(conn, self.now, self.timers)
            self.conns[key] = conn
            if self.status == RECOVERING and self.recovery is not None:
                self.recovery.conns[key] = ms.ConnRecovery()
                self._send_npv(conn)
        return conn

    def _on_remote_app(self, msg):
        h = msg.header
        key = h.receiver_key
        conn = self._conn(key, recv_view=h.primary_view_num)
        if (h.primary_view_num > conn.recv_view and not conn.up_to and
                not conn.slots and not conn.delivered_up_to):
            conn.recv_view = h.primary_view_num
        if (h.primary_view_num == conn.recv_view and
                h.precedence < conn.remote_precedence):
            return
        role = PRIMARY if self.is_primary else BACKUP
        out = receive_app_message(conn, msg, role=role)
        if out.kind == GAP:
            self._emit('nack', conn=key.label(), view=h.primary_view_num,
                       missing=list(out.missing), local=not self.is_primary)
        if out.kind in (ACCEPTED, GAP):
            self._take_orders(conn, h, out.orders)
        if self.is_primary:
            if out.kind in (ACCEPTED, DUPLICATE, GAP):
                arm_first_ack(conn, self.now, self.timers)
            self._deliver_ready(conn)

    def _take_orders(self, conn, h, orders):
        entries = expand_entries(orders)
        mine = [e for e in entries if e.group_id == self.group_id]
        theirs = [e for e in entries if e.group_id == h.source_group_id]
        if theirs:
            retain_remote_orders(conn, theirs)
            if not self.is_primary:
                conn.to_reflect = []
        if not mine:
            return
        if self.is_primary:
            reflection_bookkeeping(conn, (), mine)
        elif self.holds_precedence or self.primary_settled:
            for e in mine:
                self.stream.add(e)

    def _on_control(self, msg):
        h = msg.header
        conn = self.conns.get(h.receiver_key)
        if conn is None:
            return
        body = unpack_body(ControlBody, msg.payload)
        if body.sent_view and h.primary_view_num >= conn.recv_view:
            note_ack(conn, h)
            note_last_sent(conn, h.primary_view_num, body.last_sent_msn,
                           h.timestamp)
        role = PRIMARY if self.is_primary else BACKUP
        t = h.message_type
        if t == MessageType.FirstAck:
            res = handle_first_ack(conn, msg, role, len(self._backups()),
                                   self.timers.max_ack)
            if res == SEND_SECOND_ACK:
                ack = control_message(
                    conn, MessageType.SecondAck, self.m.primary_precedence,
                    ControlBody(body.acked_msn, 0, 0),
                    back=compute_back_field(self.ws, role),
                    timestamp=self.ws.my_timestamp)
                self._send(conn.key.remote, ack)
            elif res == FLOW_CONTROL:
                conn.send_delay = max(1000, 2 * conn.send_delay)
                logger.debug("%s: %s: flow control, send delay %dus",
                             self.name, conn.key.label(), conn.send_delay)
        elif t == MessageType.SecondAck:
            handle_second_ack(conn, msg, role)

    def _on_remote_nack(self, msg):
        if not self.is_primary:
            return
        conn = self.conns.get(msg.header.receiver_key)
        if conn is None:
            return
        res = handle_nack(conn, unpack_body(NackBody, msg.payload))
        if res is not None:
            for m in res.messages:
                self._send(conn.key.remote, m, conn.send_delay)

    def _on_local_nack(self, msg):
        if not self.holds_precedence:
            return
        h = msg.header
        body = unpack_body(NackBody, msg.payload)
        conn = self.conns.get(ConnKey(self.group_id, body.remote_group,
                                      h.conn_seq_num, h.role))
        if conn is None:
            return
        res = handle_nack(conn, body, local=True)
        if res is not None:
            for m in res.messages:
                self._send(self.group_id, m)

    def _on_new_primary_view(self, msg):
        h = msg.header
        body = unpack_body(NewPrimaryViewBody, msg.payload)
        key = h.receiver_key
        pvn = body.primary_view_num
        conn = self.conns.get(key)
        if not self.is_primary:
            if conn is not None and pvn > conn.recv_view:
                switch_receive_view(conn, pvn)
            return
        if conn is None:
            conn = self._conn(key, recv_view=pvn)
            conn.npv_acks[pvn] = (0, 0, None)
        cached = conn.npv_acks.get(pvn)
        if cached is not None and cached[2] is not None:
            self._send(h.source_group_id, cached[2])
            return
        res = ms.on_new_primary_view(conn, body)
        if res is None:
            return
        recv_up_to, last_sent = res
        entries = retained_beyond(conn, 0, body.last_order_seq)
        header = MessageHeader(MessageType.MembershipAck, key.local,
                               key.remote, key.seq, key.role, conn.send_view,
                               self.precedence, ack_view_num=conn.recv_view,
                               ack=conn.received_up_to,
                               back=compute_back_field(self.ws, PRIMARY),
                               timestamp=self.ws.my_timestamp)
        ack = MembershipAckBody(MessageType.NewPrimaryView, self.precedence,
                                self.birth, pvn, 0, recv_up_to, last_sent)
        data = encode(Message(header, tuple(merge_entries(entries)),
                              ack.pack()))
        conn.npv_acks[pvn] = (recv_up_to, last_sent, data)
        drop_retained_before(conn, pvn)
        logger.info("%s: %s: group %d has a new primary view %d", self.name,
                    key.label(), key.remote, pvn)
        self._send(h.source_group_id, data)

    # ---- the order stream at non-primaries ---------------------------------

    def _drain(self):
        while self.status in (SERVING_BACKUP, PROPOSING, RECOVERING):
            e = self.stream.head()
            if e is None or not self._process(e):
                break
            self.stream.advance()
            self._settle_tasks()
        self._settle_tasks()

    def _process(self, e):
        "Process one entry, False when it cannot be yet."
        t = e.order_type
        if t == OrderType.MsgOrder:
            return self._process_msg_order(e)
        if t == OrderType.ViewChangeOrder:
            return self._process_view_change(e)
        if t == OrderType.UpdateOrder:
            self._apply_update(e.body)
        elif self.mode == SEMI_ACTIVE:
            self.det.ingest(e.body)
        elif t == OrderType.TimeOrder:
            value = read_virtual_clock(self.det.vgc, BACKUP,
                                       self._physical(),
                                       replayed=e.body.meta['value'])
            self._emit('clock', value=value, task=e.body.task)
        return True

    def _order_conn(self, o):
        key = ConnKey(self.group_id, o.remote_grp_id, o.conn_seq_num,
                      Role(o.sock_fd & 1))
        return self._conn(key)

    def _process_msg_order(self, e):
        o = e.body
        conn = self._order_conn(o)
        key = conn.key
        if o.msg_type == conn.app_type():
            observe(self.ws, o.timestamp)
            entry = conn.sent.get(o.msg_seq_num)
            if (o.primary_view_num == conn.send_view and entry is not None):
                set_sent_timestamp(conn, o.msg_seq_num, o.timestamp)
            else:
                self.pending_ts[(key, o.primary_view_num,
                                 o.msg_seq_num)] = o.timestamp
            return True
        msg = deliver_next(conn, BACKUP, next_order=o)
        if msg is None:
            target = (key, o.primary_view_num, o.msg_seq_num)
            if self.stall is None or self.stall[0] != target:
                self.stall = [target, self.now]
            return False
        self.stall = None
        self._delivered(conn, msg, e)
        return True

    def _stall_nack(self):
        (key, view, msn), _ = self.stall
        self.stall[1] = self.now + self.timers.retransmit
        conn = self.conns[key]
        if self.status == SERVING_BACKUP:
            msg = nack_message(conn, self.m.primary_precedence, view, (msn,),
                               local=True, group_id=self.group_id)
            self._send(self.group_id, msg)
        else:
            msg = nack_message(conn, self.precedence, view, (msn,))
            self._send(key.remote, msg)
        self._emit('nack', conn=key.label(), view=view, missing=[msn],
                   local=self.status == SERVING_BACKUP)

    def _process_view_change(self, e):
        """A backup (or a member still replaying an older primary's view)
        switches to the view the entry starts."""
        vc = e.body
        self._settle_tasks()
        m = self.m
        adopt = vc.precedence >= m.primary_precedence
        if adopt and not any(x.precedence == self.precedence
                             for x in vc.members):
            self._reset('not in view %d' % vc.primary_view_num)
            return False
        m.primary_view_num = vc.primary_view_num
        m.max_precedence = max([m.max_precedence] +
                               [x.precedence for x in vc.members])
        if adopt:
            m.members = ms.rank_members(vc.members)
            m.primary_precedence = vc.precedence
            self.primary_settled = True
        self.view_prec = vc.precedence
        resume = dict(vc.resume)
        for key, conn in sorted(self.conns.items()):
            renumber_sent(conn, resume.get(key, 0), vc.primary_view_num,
                          vc.precedence, lambda entry: entry.timestamp)
        self.stream.switch_view(vc.primary_view_num)
        self.pending_ts = dict((k, ts) for k, ts in self.pending_ts.items()
                               if k[1] >= vc.primary_view_num)
        if (self.recovery is not None and
                vc.primary_view_num >= self.recovery.primary_view_num):
            self.recovery = None
        self._emit_view()
        return True

    def _apply_update(self, u):
        "Exactly once per request, in stream order."
        if u.task not in self.awaiting:
            return
        del self.awaiting[u.task]
        self.app.apply_update(u.delta)
        self._emit('apply', op='u:%s' % u.task, pvn=self.m.primary_view_num,
                   prec=self.view_prec)
        key = self.task_conn.pop(u.task)[0]
        self._reply_ready(key, u.task, u.reply)

    # ---- delivery, tasks and replies -----------------------------------

    def _deliver_all(self):
        for _, conn in sorted(self.conns.items()):
            self._deliver_ready(conn)

    def _deliver_ready(self, conn):
        if not self.is_primary or self._paused():
            return
        while True:
            msg = deliver_next(conn, PRIMARY)
            if msg is None:
                return
            h = msg.header
            k = conn.key
            e = self._append(OrderType.MsgOrder, MsgOrder(
                h.primary_view_num, h.message_type, k.seq, k.sock_fd, 0,
                k.remote, h.msg_seq_num, 0))
            self._delivered(conn, msg, e)

    def _delivered(self, conn, msg, entry):
        h = msg.header
        label = conn.key.label()
        self._emit('deliver', op='d:%s:%d:%d' % (label, h.primary_view_num,
                                                 h.msg_seq_num),
                   conn=label, view=h.primary_view_num, msn=h.msg_seq_num,
                   seq=entry.order_seq_num, epvn=entry.primary_view_num,
                   pvn=self.m.primary_view_num, prec=self.view_prec,
                   role=self.status)
        if self.kind == CLIENT:
            rid, first = self.app.on_reply(msg.payload)
            self._emit('reply', rid=rid, first=first)
            return
        task_id = '%d.%d.%d.%d' % (conn.key.remote, conn.key.seq,
                                   h.primary_view_num, h.msg_seq_num)
        self.reorder.setdefault(conn.key, []).append([task_id, None])
        self.task_conn[task_id] = (conn.key, h.primary_view_num,
                                   h.msg_seq_num)
        if self.mode == SEMI_ACTIVE or self.is_primary:
            self.det.spawn(task_id, self.app.handle(task_id, msg.payload))
            self._schedule_tasks()
        else:
            self.awaiting[task_id] = msg.payload

    def _schedule_tasks(self):
        if self.is_primary and self.det.busy() and self.task_deadline is None:
            self.task_deadline = self.now + self.timers.task_step

    def _task_round(self):
        self.task_deadline = None
        self.det.run_round(PRIMARY)
        self._collect_tasks()
        self._schedule_tasks()

    def _settle_tasks(self):
        if self.det.busy():
            self.det.run_until_blocked(BACKUP)
        self._collect_tasks()

    def _collect_tasks(self):
        for tup in self.det.take_recorded():
            self._append(order_type(tup.op), tup)
            if tup.op == 'clock':
                self._emit('clock', value=tup.meta['value'], task=tup.task)
        for tup in self.det.take_consumed():
            self._emit('consume', task=tup.task, op=tup.op, n=tup.count)
            if tup.op == 'clock':
                self._emit('clock', value=tup.meta['value'], task=tup.task)
        for task in self.det.take_finished():
            self._task_finished(task)

    def _task_finished(self, task):
        key, view, msn = self.task_conn.pop(task.id)
        if self.mode == SEMI_PASSIVE and self.is_primary:
            self._append(OrderType.UpdateOrder, UpdateOrder(
                task.id, key, msn, view, self.app.delta(task.id),
                task.result))
            self._emit('apply', op='u:%s' % task.id,
                       pvn=self.m.primary_view_num, prec=self.view_prec)
        else:
            self.app.touched.pop(task.id, None)
        self._reply_ready(key, task.id, task.result)

    def _reply_ready(self, key, task_id, reply):
        "Replies leave in request order."
        queue = self.reorder.get(key, [])
        for slot in queue:
            if slot[0] == task_id:
                slot[1] = reply
                break
        conn = self.conns[key]
        while queue and queue[0][1] is not None:
            _, payload = queue.pop(0)
            self._send_app(conn, payload)

    def _send_app(self, conn, payload):
        key = conn.key
        if not self.is_primary:
            ts = self.pending_ts.pop((key, conn.send_view,
                                      conn.msg_seq_count), 0)
            if ts:
                stamp_outgoing(self.ws, primary_timestamp=ts)
            send_app_message(conn, payload, (), (), BACKUP,
                             self.m.primary_precedence,
                             compute_back_field(self.ws, BACKUP), ts)
            return
        ts = stamp_outgoing(self.ws)
        self._append(OrderType.MsgOrder, MsgOrder(
            conn.send_view, conn.app_type(), key.seq, key.sock_fd, 0,
            key.remote, conn.msg_seq_count, 0, ts))
        local, reflected = self._piggyback(conn)
        msg = send_app_message(conn, payload, local, reflected, PRIMARY,
                               self.precedence,
                               compute_back_field(self.ws, PRIMARY), ts,
                               now=self.now)
        touch(conn, self.now, self.timers)
        self._send(key.remote, msg, conn.send_delay)
        self._emit_send(conn, msg)

    def _emit_send(self, conn, msg):
        h = msg.header
        self._emit('send', ident=list(identity(h)), conn=conn.key.label(),
                   view=h.primary_view_num, msn=h.msg_seq_num,
                   ts=h.timestamp)

    def _piggyback(self, conn):
        """Own entries not every backup has processed, until reflected, and
        the remote group's entries to reflect."""
        stable = self._stable_seq()
        after = max(stable, self.piggybacked.get(conn.key, 0))
        fresh = self.stream.processed(after)
        self.piggybacked[conn.key] = self.stream.last_seq
        pending = reflection_bookkeeping(conn, fresh, ())
        conn.pending_reflection = [e for e in pending
                                   if e.order_seq_num > stable]
        return (merge_entries(conn.pending_reflection),
                merge_entries(take_reflections(conn)))

    def _append(self, order_type, body):
        """Order something at the primary."""
        if order_type == OrderType.MsgOrder:
            body = MsgOrder(body.primary_view_num, body.msg_type,
                            body.conn_seq_num, body.sock_fd, body.opaque,
                            body.remote_grp_id, body.msg_seq_num,
                            self.stream.next_seq, body.timestamp)
        entry = self.stream.append(order_type, self.group_id, body)
        fields = {}
        if order_type in (OrderType.MutexOrder, OrderType.TimeOrder,
                          OrderType.SocketOrder):
            fields = dict(task=body.task, op=body.op, n=body.count)
        self._emit('order', seq=entry.order_seq_num,
                   epvn=entry.primary_view_num, type=order_type.name,
                   **fields)
        return entry

    # ---- clients ---------------------------------------------------------

    def _client_timer(self):
        at = self.app.next_request_at()
        if at is None or self.now < at:
            return
        payload = self.app.issue()
        conn = self._conn(ConnKey(self.group_id, self.target, 1, Role.client))
        self._emit('request', rid=payload.split()[0].decode('utf-8'))
        self._send_app(conn, payload)

    # ---- connection timers and garbage collection ----------------------

    def _tick_role(self):
        if self.is_primary or self.status in (PROPOSING, RECOVERING):
            return PRIMARY
        if self.status == SERVING_BACKUP:
            return BACKUP
        return None

    def _tick_connections(self):
        role = self._tick_role()
        if role is None:
            return
        for key, conn in sorted(self.conns.items()):
            due = next_deadline(conn, role, self.timers)
            if due is None or self.now < due:
                continue
            for action in periodic_tick(conn, self.now, role, self.timers):
                self._tick_action(conn, action)

    def _tick_action(self, conn, action):
        key = conn.key
        if isinstance(action, SendNackRemote):
            msg = nack_message(conn, self.precedence, action.view,
                               action.missing)
            self._send(key.remote, msg)
            self._emit('nack', conn=key.label(), view=action.view,
                       missing=list(action.missing), local=False)
        elif isinstance(action, SendNackLocal):
            msg = nack_message(conn, self.m.primary_precedence, action.view,
                               action.missing, local=True,
                               group_id=self.group_id)
            self._send(self.group_id, msg)
            self._emit('nack', conn=key.label(), view=action.view,
                       missing=list(action.missing), local=True)
        elif not self.is_primary:
            # a proposer or recovering primary only chases what it misses
            return
        elif isinstance(action, Retransmit):
            for m in action.messages:
                self._send(key.remote, m, conn.send_delay)
        elif isinstance(action, SendFirstAck):
            self._control(conn, MessageType.FirstAck, action.ack)
        elif isinstance(action, SendKeepAlive):
            self._control(conn, MessageType.KeepAlive, 0)
        elif isinstance(action, DeliverReady):
            self._deliver_ready(conn)

    def _control(self, conn, message_type, acked):
        body = ControlBody(acked, conn.last_sent_msn, conn.send_view)
        msg = control_message(conn, message_type, self.precedence, body,
                              back=compute_back_field(self.ws, PRIMARY),
                              timestamp=self.ws.my_timestamp)
        touch(conn, self.now, self.timers)
        self._send(conn.key.remote, msg)

    def _collect_garbage(self):
        conns = [c for _, c in sorted(self.conns.items())]
        role = PRIMARY if self.holds_precedence else BACKUP
        refresh(self.ws, conns, role, self.primary_back)
        for key, name, view, msn, ts, wm in garbage_collect(self.ws, conns):
            fields = dict(conn=key.label(), list=name, view=view, msn=msn,
                          ts=ts, wm=wm)
            if name == 'sent':
                fields['ident'] = [key.local, key.remote, key.seq,
                                   int(key.role), view, msn]
            self._emit('gc', **fields)

    # ---- quiescence --------------------------------------------------------

    def is_quiet(self):
        """Nothing in flight: the run may stop once every process is."""
        if self.status == CRASHED:
            return True
        if self.kind == CLIENT:
            return self.app.done and all(is_quiet(c)
                                         for c in self.conns.values())
        if self.status not in (SERVING_PRIMARY, SERVING_BACKUP):
            return False
        if self.is_primary and self._stable_seq() < self.stream.last_seq:
            return False
        return (self.change is None and not self.change_queue and
                self.transfer is None and self.stall is None and
                not self.det.busy() and self.stream.head() is None and
                not any(self.reorder.values()) and not self.awaiting and
                all(is_quiet(c) for c in self.conns.values()))
