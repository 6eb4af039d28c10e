import random

from tests.util import *

from llft.buffers import BACKUP, PRIMARY
from llft.determinizer import *
from llft.wire import MessageType, OrderType, TupleOrder


class TestOperations(TestCase):

    def test_operation_id(self):
        res = [operation_id(c) for c in (Lock('m'), TryLock('m'), ReadClock(),
                                         SocketRead(4), SelectPoll((4, 5), 9))]
        exp = ['mutex:m', 'mutex:m', 'clock', 'sock:4', 'poll:4,5']
        self.assertEqual(res, exp)

    def test_not_intercepted(self):
        self.assertRaises(TypeError, operation_id, object())

    def test_order_type(self):
        self.assertEqual(order_type('mutex:m'), OrderType.MutexOrder)
        self.assertEqual(order_type('clock'), OrderType.TimeOrder)
        self.assertEqual(order_type('poll:1'), OrderType.SocketOrder)


class TestRecording(TestCase):

    def test_counts_per_task_and_op(self):
        counts = Counts()
        res = [record_at_primary(counts, t, 'clock', lambda: {'ok': True})[1]
               for t in ('a', 'a', 'b')]
        self.assertEqual([(x.task, x.count) for x in res],
                         [('a', 1), ('a', 2), ('b', 1)])

    def test_os_error_captured(self):
        def fail():
            raise OSError(11, 'EAGAIN')
        meta, tup = record_at_primary(Counts(), 't', 'sock:3', fail)
        self.assertEqual(meta, {'ok': False, 'errno': 'EAGAIN'})
        self.assertEqual(tup.meta, meta)

    def test_socket_outcomes(self):
        counts = Counts()
        miss = record_socket_outcome(counts, 't', 3, 'read', EAGAIN)
        self.assertEqual(miss.meta, {'ok': False, 'errno': EAGAIN})
        write = record_socket_outcome(counts, 't', 3, 'write', '3:1', 2)
        self.assertEqual(write.meta, {'ok': True, 'msg': '3:1', 'attempt': 2})
        self.assertEqual(write.count, 2)
        poll = record_socket_outcome(counts, 't', (3, 4), 'selectPoll',
                                     (1, 1, 7))
        self.assertEqual(poll.op, 'poll:3,4')
        self.assertEqual(poll.meta['remaining'], 7)

    def test_as_msg_order(self):
        tup = TupleOrder('t', 'sock:3', 2, {'ok': True, 'attempt': 4})
        res = as_msg_order(tup, 1, 9)
        self.assertEqual((res.sock_fd, res.opaque, res.msg_seq_num,
                          res.order_seq_num), (3, 4, 2, 9))
        self.assertEqual(res.msg_type, MessageType.Request)


class TestReplay(TestCase):

    def test_head_only(self):
        rq, counts = ReplayQueues(), Counts()
        ingest_at_backup(rq, TupleOrder('a', 'mutex:m', 1, {'ok': True}))
        ingest_at_backup(rq, TupleOrder('b', 'mutex:m', 1, {'ok': True}))
        # b is second in line, so it suspends even though its tuple is here
        self.assertEqual(replay_at_backup(rq, counts, 'b', 'mutex:m'), None)
        self.assertEqual(replay_at_backup(rq, counts, 'a', 'mutex:m'),
                         {'ok': True})
        self.assertEqual(replay_at_backup(rq, counts, 'b', 'mutex:m'),
                         {'ok': True})
        self.assertEqual(rq.pending(), 0)

    def test_ingest_wakes_suspended(self):
        rq, counts = ReplayQueues(), Counts()
        self.assertEqual(replay_at_backup(rq, counts, 'a', 'clock'), None)
        res = ingest_at_backup(rq, TupleOrder('a', 'clock', 1, {'value': 5}))
        self.assertEqual(res, 'a')

    def test_wrong_count_suspends(self):
        rq, counts = ReplayQueues(), Counts()
        ingest_at_backup(rq, TupleOrder('a', 'clock', 2, {'value': 5}))
        self.assertEqual(replay_at_backup(rq, counts, 'a', 'clock'), None)


class TestVirtualClock(TestCase):

    def test_backup_adopts_offset(self):
        vgc = VirtualGroupClock()
        self.assertEqual(read_virtual_clock(vgc, BACKUP, 100, replayed=95), 95)
        self.assertEqual(vgc.offset, -5)
        self.assertEqual(read_virtual_clock(vgc, PRIMARY, 110), 105)

    def test_never_goes_back(self):
        vgc = VirtualGroupClock(offset=0, last_issued=500)
        self.assertEqual(read_virtual_clock(vgc, PRIMARY, 100), 500)


def clock_task(n):
    values = []
    for _ in range(n):
        d = yield ReadClock()
        values.append(d['value'])
    return values


def mutex_task(log, name):
    yield Lock('m')
    log.append(name)
    yield Unlock('m')


class DeterminizerTestCase(TestCase):

    def determinizer(self, seed=1, now=100):
        rng = random.Random(seed)
        return Determinizer(rng, lambda: now, LocalIO(rng))


class TestDeterminizer(DeterminizerTestCase):

    def test_backup_replays_primary(self):
        primary = self.determinizer(now=1000)
        primary.spawn('t', clock_task(3))
        primary.run_until_blocked(PRIMARY)
        recorded = primary.take_recorded()
        self.assertEqual(len(recorded), 3)

        backup = self.determinizer(seed=2, now=4000)
        backup.spawn('t', clock_task(3))
        backup.run_until_blocked(BACKUP)
        # nothing ordered yet
        self.assertTrue(backup.busy())
        for tup in recorded:
            backup.ingest(tup)
        backup.run_until_blocked(BACKUP)
        res = [t.result for t in backup.take_finished()]
        exp = [t.result for t in primary.take_finished()]
        self.assertEqual(res, exp)
        self.assertEqual(len(backup.take_consumed()), 3)

    def test_mutex_order_replayed(self):
        primary, log = self.determinizer(seed=7), []
        for name in ('a', 'b', 'c'):
            primary.spawn(name, mutex_task(log, name))
        primary.run_until_blocked(PRIMARY)
        self.assertFalse(primary.busy())

        backup, replayed = self.determinizer(seed=8), []
        for name in ('a', 'b', 'c'):
            backup.spawn(name, mutex_task(replayed, name))
        for tup in primary.take_recorded():
            backup.ingest(tup)
        backup.run_until_blocked(BACKUP)
        self.assertEqual(replayed, log)

    def test_snapshot_restore(self):
        primary = self.determinizer()
        primary.spawn('t', clock_task(2))
        primary.run_until_blocked(PRIMARY)
        recorded = primary.take_recorded()
        backup = self.determinizer()
        backup.ingest(recorded[1])
        snap = backup.snapshot()

        joiner = self.determinizer()
        joiner.restore(snap)
        self.assertEqual(joiner.snapshot(), snap)
        self.assertEqual(joiner.replay.head('clock'), recorded[1])


if __name__ == '__main__':
    test_main()
