"""This module contains Lamport timestamping and the timestamp-watermark
garbage collection shared by all of a member's connections.

A sent message is removed once the remote group's watermark (the back field
of its messages) reaches its timestamp, a delivered message once this
group's watermark does.

"""
from collections import namedtuple
from dataclasses import dataclass, field

PRIMARY, BACKUP = 'primary', 'backup'

# a backup's watermark, and the per-connection marks it was computed from
BackupReport = namedtuple('BackupReport', 'watermark marks')


@dataclass
class WatermarkState(object):
    my_timestamp: int = 0
    my_timestamp_watermark: int = 0
    my_group_watermark: int = 0
    # primary only: backup precedence -> BackupReport
    per_backup_watermark: dict = field(default_factory=dict)


def observe(ws, ts):
    "Lamport receive rule."
    if ts > ws.my_timestamp:
        ws.my_timestamp = ts


def stamp_outgoing(ws, observed=0, primary_timestamp=None):
    """Timestamp for an outgoing message.

    A backup logging its copy of the primary's message passes the primary's
    timestamp and gets it back unchanged, so both copies agree.

    Example
    -------
    >>> stamp_outgoing(WatermarkState())
    1
    >>> stamp_outgoing(ws_after_receiving_10)
    11

    """
    if primary_timestamp is not None:
        observe(ws, primary_timestamp)
        return primary_timestamp
    ws.my_timestamp = max(ws.my_timestamp, observed) + 1
    return ws.my_timestamp


def compute_back_field(ws, role):
    """The primary advertises the group watermark, a backup its own."""
    if role == PRIMARY:
        return ws.my_group_watermark
    return ws.my_timestamp_watermark


def _backup_mark(report, key):
    if report.marks is None:
        return report.watermark
    return report.marks.get(key, 0)


def group_watermark(ws, conns=None):
    """Minimum over the members of what each has received.

    With connections given, a backup's contribution on a connection is the
    mark it reported for that connection (0 if it has not seen it yet), so
    a connection only one member knows about cannot inflate the result.

    Example
    -------
    >>> ws.my_timestamp_watermark, [b.watermark for b in backups]
    (9, [7, 12])
    >>> group_watermark(ws)
    7

    """
    if conns is None:
        return min([ws.my_timestamp_watermark] +
                   [r.watermark for r in ws.per_backup_watermark.values()])
    marks = [min([c.recv_ts] +
                 [_backup_mark(r, c.key)
                  for r in ws.per_backup_watermark.values()])
             for c in conns]
    return min(marks) if marks else 0


def refresh(ws, conns, role, primary_back=None):
    """Recompute the watermarks from the connections' gap-free marks.

    A connection contributes the timestamp of the last message received on
    it without a gap. A backup's group watermark is bounded by what the
    primary last advertised to it.

    """
    conns = list(conns)
    marks = [c.recv_ts for c in conns]
    ws.my_timestamp_watermark = min(marks) if marks else 0
    if role == PRIMARY:
        ws.my_group_watermark = group_watermark(ws, conns)
    elif primary_back is not None:
        ws.my_group_watermark = min(primary_back, ws.my_timestamp_watermark)
    else:
        ws.my_group_watermark = 0
    return ws.my_group_watermark


def report_backup(ws, precedence, watermark, marks=None):
    """Record a backup's watermark, replacing its previous report.

    A freshly admitted backup is registered with 0 so that nothing it may
    still need is collected before it reports.

    """
    ws.per_backup_watermark[precedence] = BackupReport(
        watermark, None if marks is None else dict(marks))


def retain_backups(ws, precedences):
    "Drop the reports of backups no longer in the membership."
    for p in list(ws.per_backup_watermark):
        if p not in precedences:
            del ws.per_backup_watermark[p]


def garbage_collect(ws, conns):
    """Remove sent messages covered by the remote group's watermark and
    delivered messages covered by this group's watermark.

    Returns the removals as (conn key, list name, view, msn, ts, watermark)
    tuples, their number is the removed message count.

    """
    removed = []
    for c in conns:
        for entry in list(c.sent.values()):
            if 0 < entry.timestamp <= c.remote_wm:
                del c.sent[entry.msn]
                removed.append((c.key, 'sent', c.send_view, entry.msn,
                                entry.timestamp, c.remote_wm))
        keep = []
        for d in c.delivered:
            if d.timestamp <= ws.my_group_watermark:
                removed.append((c.key, 'delivered', d.view, d.msn,
                                d.timestamp, ws.my_group_watermark))
            else:
                keep.append(d)
        c.delivered = keep
    return removed
