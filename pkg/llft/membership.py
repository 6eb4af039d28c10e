"""This module contains the leader-determined membership rules: precedence and
rank bookkeeping, the rank-scaled fault detectors, the two phases of a
primary change and the commit of backup additions and removals.

Like conn, these functions only mutate the state objects they are given and
return what the replica should do, the replica owns every side effect.

"""
import logging
from dataclasses import dataclass, field, replace

from llft.wire import (ADD, REMOVE, Member, MembershipChangeBody,
                       ProposePrimaryBody)

logger = logging.getLogger(__name__)

# outcomes of a received ProposePrimary
ADOPT, IGNORE, RESET = 'ackAndAdopt', 'ignore', 'resetAndRejoin'

# outcomes of a retransmission timer or an ack
CONCLUDED, RETRANSMIT, PRUNED, WAIT = ('concluded', 'retransmit',
                                       'prunedMembers', 'wait')

# join progress
PROPOSE, FOUND_GROUP = 'proposeBackup', 'becomeFirstMember'


def rank_members(members):
    """Ranks are consecutive from 1 in the order of the precedences, so the
    primary (the lowest precedence) has rank 1.

    Example
    -------
    >>> [m.rank for m in rank_members([m(precedence=4), m(precedence=2)])]
    [1, 2]

    """
    ordered = sorted(members, key=lambda m: m.precedence)
    return tuple(replace(m, rank=i) for i, m in enumerate(ordered, 1))


@dataclass
class Membership(object):
    group_id: int
    primary_view_num: int = 1
    members: tuple = ()
    primary_precedence: int = 1
    # highest precedence ever assigned in the group
    max_precedence: int = 1

    @property
    def precedences(self):
        return [m.precedence for m in self.members]

    @property
    def backups(self):
        return [m for m in self.members
                if m.precedence != self.primary_precedence]

    def member(self, precedence):
        for m in self.members:
            if m.precedence == precedence:
                return m
        return None

    def find(self, birth):
        for m in self.members:
            if m.birth == birth:
                return m
        return None

    def rank_of(self, precedence):
        m = self.member(precedence)
        return m.rank if m is not None else None


def bootstrap(group_id, births):
    """An initial committed membership, the first birth is the primary."""
    members = rank_members(Member(b, i, 0) for i, b in enumerate(births, 1))
    return Membership(group_id, 1, members, 1, len(members))


def found_group(group_id, birth, max_precedence=0):
    "A joiner that heard nobody becomes the first member and primary."
    precedence = max_precedence + 1
    return Membership(group_id, 1, (Member(birth, precedence, 1),),
                      precedence, precedence)


def check_ranks(m):
    """Precedences unique, ranks 1..n by precedence, primary has rank 1."""
    precs = m.precedences
    if len(set(precs)) != len(precs):
        return False
    ranked = rank_members(m.members)
    if tuple(sorted(m.members, key=lambda x: x.precedence)) != ranked:
        return False
    return not m.members or ranked[0].precedence == m.primary_precedence


# ---- fault detectors ---------------------------------------------------

def primary_watch_timeout(rank, timers):
    """Timeout of a rank r backup watching the primary, increasing in r.

    Example
    -------
    >>> [primary_watch_timeout(r, defaults) for r in (2, 3, 4)]  # ms
    [10, 30, 50]

    """
    r = max(rank, 2)
    return timers.fault_base + 2 * (r - 2) * timers.fault_step


def primary_watch_deadline(last_heartbeat, rank, timers):
    "Only silence beyond the primary's own heartbeat period counts."
    return last_heartbeat + timers.heartbeat + primary_watch_timeout(rank,
                                                                     timers)


def backup_fault_deadline(last_heartbeat, timers):
    return (last_heartbeat + timers.heartbeat * timers.heartbeat_misses +
            timers.heartbeat // 2)


# ---- primary change, first phase ---------------------------------------

@dataclass
class ElectionState(object):
    proposal: ProposePrimaryBody
    acks: set = field(default_factory=set)
    count: int = 0
    phase: str = 'electing'
    started: int = 0

    @property
    def waiting_for(self):
        return set(m.precedence for m in self.proposal.members
                   if m.precedence != self.proposal.precedence) - self.acks


def on_primary_timeout(m, self_precedence, seen_proposals, last_order_seq):
    """Denounce the primary and propose oneself, unless a backup with lower
    precedence has already proposed for this or a later view.

    seen_proposals holds (pvn, precedence) pairs.

    """
    for pvn, precedence in seen_proposals:
        if pvn >= m.primary_view_num and precedence < self_precedence:
            return None
    members = rank_members(x for x in m.members
                           if x.precedence >= self_precedence)
    return ProposePrimaryBody(m.group_id, m.primary_view_num,
                              self_precedence, last_order_seq,
                              m.max_precedence, members)


def on_propose_primary(m, self_precedence, proposal):
    """Decide what a member does with another member's ProposePrimary.

    Adopting sets primaryPrecedence, so a later proposal from a lower
    precedence, or the member's own proposal, blocks further adoption.

    """
    if proposal.group_id != m.group_id:
        return IGNORE
    if proposal.primary_view_num < m.primary_view_num:
        return IGNORE
    included = any(x.precedence == self_precedence
                   for x in proposal.members)
    if proposal.precedence <= m.primary_precedence:
        return IGNORE
    return ADOPT if included else RESET


def adopt_proposal(m, proposal):
    "Update membership and ranks for an acked proposal."
    m.primary_precedence = proposal.precedence
    m.members = rank_members(proposal.members)
    m.max_precedence = max(m.max_precedence, proposal.max_precedence)


def election_progress(es, acked_by=None, timer=False, max_count=5):
    """Progress of the proposer on an ack (acked_by) or a retransmission
    timer expiry.

    Returns (outcome, pruned precedences).

    """
    if acked_by is not None:
        if acked_by in es.waiting_for:
            es.acks.add(acked_by)
        return (CONCLUDED if not es.waiting_for else WAIT), ()
    if not es.waiting_for:
        return CONCLUDED, ()
    if timer:
        es.count += 1
        if es.count > max_count:
            pruned = tuple(sorted(es.waiting_for))
            es.proposal = replace(es.proposal, members=rank_members(
                x for x in es.proposal.members
                if x.precedence not in pruned))
            es.count = 0
            logger.info("group %d: proposer %d prunes silent %s",
                        es.proposal.group_id, es.proposal.precedence, pruned)
            return PRUNED, pruned
        return RETRANSMIT, ()
    return WAIT, ()


# ---- primary change, second phase --------------------------------------

@dataclass
class ConnRecovery(object):
    "What the remote primary acknowledged for one connection."
    acked: bool = False
    recv_up_to: int = 0
    last_sent: int = 0
    count: int = 0


@dataclass
class RecoveryState(object):
    primary_view_num: int
    members: tuple
    conns: dict = field(default_factory=dict)
    started: int = 0


def connection_synchronized(cr, conn, old_send_view):
    """The new primary holds every remote message up to lastSentMsn and has
    regenerated every message the remote received from the old primary."""
    if not cr.acked:
        return False
    held = conn.up_to.get(conn.recv_view, 0)
    return (held >= cr.last_sent and conn.send_view == old_send_view and
            conn.last_sent_msn >= cr.recv_up_to)


def recovery_complete(rs, conns, old_send_view, stream_drained, tasks_idle):
    """Conclusion of the second phase, vacuous without connections."""
    if not (stream_drained and tasks_idle):
        return False
    for key, cr in rs.conns.items():
        if not connection_synchronized(cr, conns[key], old_send_view):
            return False
    return True


def on_new_primary_view(conn, body):
    """At the remote primary: flush the failed primary's messages received
    after the last gap-free one and expect the new view from msn 1.

    Returns (recvUpToMsn, lastSentMsn), or None for a stale view. A repeat
    of an already answered view returns the cached values.

    """
    from llft.conn import switch_receive_view
    pvn = body.primary_view_num
    if pvn in conn.npv_acks:
        r, l, _ = conn.npv_acks[pvn]
        return r, l
    if pvn <= conn.recv_view:
        return None
    recv_up_to = conn.up_to.get(conn.recv_view, 0)
    last_sent = conn.last_sent_msn
    switch_receive_view(conn, pvn, recv_up_to)
    conn.npv_acks[pvn] = (recv_up_to, last_sent, None)
    return recv_up_to, last_sent


# ---- backup addition and removal ---------------------------------------

@dataclass
class ChangeState(object):
    body: MembershipChangeBody
    acks: set = field(default_factory=set)
    count: int = 0

    @property
    def waiting_for(self):
        primary = min(m.precedence for m in self.body.members)
        return set(m.precedence for m in self.body.members
                   if m.precedence != primary) - self.acks


def propose_add(m, birth, change_id):
    """AcceptBackup for a ProposeBackup, the joiner gets the next precedence
    ever assigned and the last rank."""
    precedence = m.max_precedence + 1
    members = rank_members(m.members + (Member(birth, precedence, 0),))
    return ChangeState(MembershipChangeBody(
        m.group_id, m.primary_view_num, change_id, ADD, birth, precedence,
        members))


def propose_remove(m, precedence, change_id):
    subject = m.member(precedence)
    members = rank_members(x for x in m.members
                           if x.precedence != precedence)
    return ChangeState(MembershipChangeBody(
        m.group_id, m.primary_view_num, change_id, REMOVE, subject.birth,
        m.max_precedence, members))


def change_progress(cs, acked_by=None, timer=False, max_count=5):
    """Like election_progress, for AcceptBackup and RemoveBackup. Pruning a
    silent joiner or backup shrinks the proposed membership."""
    if acked_by is not None:
        if acked_by in cs.waiting_for:
            cs.acks.add(acked_by)
        return (CONCLUDED if not cs.waiting_for else WAIT), ()
    if not cs.waiting_for:
        return CONCLUDED, ()
    if timer:
        cs.count += 1
        if cs.count > max_count:
            pruned = tuple(sorted(cs.waiting_for))
            cs.body = replace(cs.body, members=rank_members(
                x for x in cs.body.members if x.precedence not in pruned))
            cs.count = 0
            return PRUNED, pruned
        return RETRANSMIT, ()
    return WAIT, ()


def commit_change(m, body):
    m.members = rank_members(body.members)
    m.max_precedence = max(m.max_precedence, body.max_precedence)


def on_membership_change(m, self_birth, body):
    """At a backup: adopt an AcceptBackup or RemoveBackup from the primary,
    or reset when the new membership excludes it.

    Returns ADOPT, RESET or IGNORE.

    """
    if body.group_id != m.group_id or body.primary_view_num < m.primary_view_num:
        return IGNORE
    if any(x.birth == self_birth for x in body.members):
        commit_change(m, body)
        return ADOPT
    return RESET


@dataclass
class JoinState(object):
    count: int = 0
    # a heartbeat of the group was heard since the last proposal
    heard: bool = False
    accepted: bool = False


def join_progress(js, max_count=5):
    """On the ProposeBackup retransmission timer: propose again, or become
    the first member after max_count proposals in silence."""
    if js.accepted:
        return None
    if js.heard:
        js.count, js.heard = 0, False
        return PROPOSE
    js.count += 1
    if js.count > max_count:
        return FOUND_GROUP
    return PROPOSE
