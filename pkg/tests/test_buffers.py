from tests.util import *

from llft.buffers import *
from llft.conn import new_connection, send_app_message
from llft.wire import ConnKey, Role


def conn(remote=2, recv_ts=0):
    c = new_connection(ConnKey(1, remote, 1, Role.server))
    c.recv_ts = recv_ts
    return c


class TestTimestamps(TestCase):

    def test_stamp_outgoing(self):
        ws = WatermarkState()
        self.assertEqual(stamp_outgoing(ws), 1)
        observe(ws, 10)
        self.assertEqual(stamp_outgoing(ws), 11)

    def test_observe_never_goes_back(self):
        ws = WatermarkState(my_timestamp=5)
        observe(ws, 3)
        self.assertEqual(ws.my_timestamp, 5)

    def test_backup_copies_primary_timestamp(self):
        ws = WatermarkState(my_timestamp=2)
        self.assertEqual(stamp_outgoing(ws, primary_timestamp=9), 9)
        self.assertEqual(ws.my_timestamp, 9)

    def test_back_field(self):
        ws = WatermarkState(my_timestamp_watermark=4, my_group_watermark=3)
        self.assertEqual(compute_back_field(ws, PRIMARY), 3)
        self.assertEqual(compute_back_field(ws, BACKUP), 4)


class TestWatermarks(TestCase):

    def test_group_watermark_is_minimum(self):
        ws = WatermarkState(my_timestamp_watermark=9)
        report_backup(ws, 2, 7)
        report_backup(ws, 3, 12)
        self.assertEqual(group_watermark(ws), 7)

    def test_group_watermark_per_connection(self):
        ws = WatermarkState()
        a, b = conn(2, recv_ts=9), conn(3, recv_ts=6)
        report_backup(ws, 2, 5, {a.key: 8})
        # the backup never reported b, so nothing on it is stable
        self.assertEqual(group_watermark(ws, [a, b]), 0)
        report_backup(ws, 2, 5, {a.key: 8, b.key: 6})
        self.assertEqual(group_watermark(ws, [a, b]), 6)

    def test_refresh_primary(self):
        ws = WatermarkState()
        report_backup(ws, 2, 0, {})
        a = conn(recv_ts=5)
        refresh(ws, [a], PRIMARY)
        self.assertEqual(ws.my_timestamp_watermark, 5)
        self.assertEqual(ws.my_group_watermark, 0)

    def test_refresh_backup_bounded_by_primary(self):
        ws = WatermarkState()
        refresh(ws, [conn(recv_ts=8)], BACKUP, primary_back=6)
        self.assertEqual(ws.my_group_watermark, 6)
        refresh(ws, [conn(recv_ts=8)], BACKUP)
        self.assertEqual(ws.my_group_watermark, 0)

    def test_retain_backups(self):
        ws = WatermarkState()
        report_backup(ws, 2, 1)
        report_backup(ws, 3, 1)
        retain_backups(ws, [3])
        self.assertEqual(list(ws.per_backup_watermark), [3])


class TestGarbageCollect(TestCase):

    def test_sent_collected_by_remote_watermark(self):
        ws = WatermarkState()
        c = conn()
        for ts in (3, 5, 8):
            send_app_message(c, b"x", (), (), PRIMARY, 1, 0, ts, now=0)
        c.remote_wm = 5
        res = garbage_collect(ws, [c])
        self.assertEqual([(name, msn) for _, name, _, msn, _, _ in res],
                         [('sent', 1), ('sent', 2)])
        self.assertEqual(list(c.sent), [3])

    def test_unstamped_not_collected(self):
        ws = WatermarkState()
        c = conn()
        send_app_message(c, b"x", (), (), BACKUP, 1, 0, 0)
        c.remote_wm = 5
        self.assertEqual(garbage_collect(ws, [c]), [])

    def test_delivered_collected_by_group_watermark(self):
        from llft.conn import DeliveredEntry
        ws = WatermarkState(my_group_watermark=4)
        c = conn()
        c.delivered = [DeliveredEntry(1, 1, 3, None),
                       DeliveredEntry(1, 2, 6, None)]
        res = garbage_collect(ws, [c])
        self.assertEqual([(name, msn) for _, name, _, msn, _, _ in res],
                         [('delivered', 1)])
        self.assertEqual([d.msn for d in c.delivered], [2])


if __name__ == '__main__':
    test_main()
