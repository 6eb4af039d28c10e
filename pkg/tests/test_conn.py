from tests.util import *

from llft.buffers import BACKUP, PRIMARY
from llft.conn import *
from llft.wire import (ConnKey, ControlBody, Message, MessageHeader,
                       MessageType, NackBody, Role)

# the server end of client group 2's first connection to server group 1
KEY = ConnKey(1, 2, 1, Role.server)


def request(msn, view=1, ts=None, precedence=1, ack=0):
    h = MessageHeader(MessageType.Request, 2, 1, 1, Role.client, view,
                      precedence, msn, ack_view_num=1, ack=ack,
                      timestamp=msn if ts is None else ts)
    return Message(h, (), b"r%d incr k0 1" % msn)


class TestReceive(TestCase):

    def test_in_order(self):
        conn = new_connection(KEY)
        res = receive_app_message(conn, request(1))
        self.assertEqual(res.kind, ACCEPTED)
        self.assertEqual(conn.received_up_to, 1)

    def test_gap_makes_placeholders(self):
        conn = new_connection(KEY)
        res = receive_app_message(conn, request(3))
        self.assertEqual(res.kind, GAP)
        self.assertEqual(res.missing, (1, 2))
        self.assertEqual(conn.nacks, [1, 2])
        self.assertEqual(conn.received_up_to, 0)

    def test_gap_filled(self):
        conn = new_connection(KEY)
        receive_app_message(conn, request(3))
        receive_app_message(conn, request(1))
        res = receive_app_message(conn, request(2))
        self.assertEqual(res.kind, ACCEPTED)
        self.assertEqual(conn.received_up_to, 3)
        self.assertEqual(conn.nacks, [])
        self.assertEqual(conn.recv_ts, 3)

    def test_duplicate(self):
        conn = new_connection(KEY)
        receive_app_message(conn, request(1))
        res = receive_app_message(conn, request(1))
        self.assertEqual(res.kind, DUPLICATE)

    def test_duplicate_after_delivery(self):
        conn = new_connection(KEY)
        receive_app_message(conn, request(1))
        deliver_next(conn, PRIMARY)
        res = receive_app_message(conn, request(1))
        self.assertEqual(res.kind, DUPLICATE)

    def test_superseded(self):
        conn = new_connection(KEY)
        res = receive_app_message(conn, request(1, precedence=3),
                                  local_primary_precedence=2)
        self.assertEqual(res.kind, SUPERSEDED)

    def test_primary_ignores_other_view(self):
        conn = new_connection(KEY)
        res = receive_app_message(conn, request(1, view=2))
        self.assertEqual(res.kind, IGNORED_VIEW)

    def test_backup_follows_newer_view(self):
        conn = new_connection(KEY)
        receive_app_message(conn, request(1))
        res = receive_app_message(conn, request(1, view=2), role=BACKUP)
        self.assertEqual(res.kind, ACCEPTED)
        self.assertEqual(conn.recv_view, 2)


class TestDeliver(TestCase):

    def test_primary_delivers_in_order(self):
        conn = new_connection(KEY)
        receive_app_message(conn, request(2))
        self.assertEqual(deliver_next(conn, PRIMARY), None)
        receive_app_message(conn, request(1))
        res = [deliver_next(conn, PRIMARY).header.msg_seq_num,
               deliver_next(conn, PRIMARY).header.msg_seq_num]
        self.assertEqual(res, [1, 2])
        self.assertEqual(deliver_next(conn, PRIMARY), None)

    def test_backup_needs_an_order(self):
        from llft.wire import MsgOrder
        conn = new_connection(KEY)
        receive_app_message(conn, request(1), role=BACKUP)
        self.assertEqual(deliver_next(conn, BACKUP), None)
        order = MsgOrder(1, MessageType.Request, 1, 2, 0, 2, 1, 1)
        res = deliver_next(conn, BACKUP, order)
        self.assertEqual(res.header.msg_seq_num, 1)
        self.assertEqual(len(conn.delivered), 1)

    def test_backup_waits_for_the_message(self):
        from llft.wire import MsgOrder
        conn = new_connection(KEY)
        order = MsgOrder(1, MessageType.Request, 1, 2, 0, 2, 1, 1)
        self.assertEqual(deliver_next(conn, BACKUP, order), None)


class TestSend(TestCase):

    def test_send_numbers(self):
        conn = new_connection(KEY)
        a = send_app_message(conn, b"a", (), (), PRIMARY, 1, 0, 5, now=0)
        b = send_app_message(conn, b"b", (), (), PRIMARY, 1, 0, 6, now=0)
        self.assertEqual([a.header.msg_seq_num, b.header.msg_seq_num],
                         [1, 2])
        self.assertEqual(conn.last_sent_msn, 2)
        self.assertEqual(a.header.message_type, MessageType.Reply)

    def test_backup_only_logs(self):
        conn = new_connection(KEY)
        res = send_app_message(conn, b"a", (), (), BACKUP, 1, 0, 5)
        self.assertEqual(res, None)
        self.assertEqual(list(conn.sent), [1])

    def test_ack_marks_sent(self):
        conn = new_connection(KEY)
        send_app_message(conn, b"a", (), (), PRIMARY, 1, 0, 5, now=0)
        self.assertTrue(note_ack(conn, request(1, ack=1).header))
        self.assertTrue(conn.sent[1].acked)

    def test_retransmit_after_timeout(self):
        conn = new_connection(KEY)
        msg = send_app_message(conn, b"a", (), (), PRIMARY, 1, 0, 5, now=0)
        self.assertEqual(next_deadline(conn, PRIMARY, TIMERS),
                         TIMERS.retransmit)
        actions = periodic_tick(conn, TIMERS.retransmit, PRIMARY, TIMERS)
        self.assertEqual(actions[0], Retransmit([msg]))

    def test_no_retransmit_once_acked(self):
        conn = new_connection(KEY)
        send_app_message(conn, b"a", (), (), PRIMARY, 1, 0, 5, now=0)
        note_ack(conn, request(1, ack=1).header)
        actions = periodic_tick(conn, TIMERS.retransmit, PRIMARY, TIMERS)
        self.assertEqual(actions, [DeliverReady()])


class TestAcks(TestCase):

    def test_first_ack_after_delay(self):
        conn = new_connection(KEY)
        receive_app_message(conn, request(1))
        arm_first_ack(conn, 0, TIMERS)
        actions = periodic_tick(conn, TIMERS.first_ack, PRIMARY, TIMERS)
        self.assertIn(SendFirstAck(1), actions)
        self.assertEqual(conn.first_ack_deadline, 2 * TIMERS.first_ack)

    def test_second_ack_stops_first_ack(self):
        conn = new_connection(KEY)
        receive_app_message(conn, request(1))
        arm_first_ack(conn, 0, TIMERS)
        periodic_tick(conn, TIMERS.first_ack, PRIMARY, TIMERS)
        second = control_message(conn, MessageType.SecondAck, 1,
                                 ControlBody(1, 0, 1))
        res = handle_second_ack(conn, second, PRIMARY)
        self.assertEqual(res, STOP_FIRST_ACK)
        self.assertEqual(conn.first_ack_deadline, None)

    def test_second_ack_reveals_loss_at_backup(self):
        conn = new_connection(KEY)
        second = Message(MessageHeader(MessageType.SecondAck, 2, 1, 1,
                                       Role.client, 1, 1, ack_view_num=1),
                         (), ControlBody(2, 0, 1).pack())
        res = handle_second_ack(conn, second, BACKUP)
        self.assertEqual(res, AppendNack(1, (1, 2)))

    def test_backup_answers_first_ack(self):
        conn = new_connection(KEY)
        send_app_message(conn, b"a", (), (), BACKUP, 1, 0, 5)
        first = Message(MessageHeader(MessageType.FirstAck, 2, 1, 1,
                                      Role.client, 1, 1, ack_view_num=1,
                                      ack=1), (),
                        ControlBody(1, 0, 1).pack())
        res = handle_first_ack(conn, first, BACKUP, 2, TIMERS.max_ack)
        self.assertEqual(res, SEND_SECOND_ACK)

    def test_flow_control(self):
        conn = new_connection(KEY)
        send_app_message(conn, b"a", (), (), PRIMARY, 1, 0, 5, now=0)
        first = Message(MessageHeader(MessageType.FirstAck, 2, 1, 1,
                                      Role.client, 1, 1, ack_view_num=1,
                                      ack=1), (),
                        ControlBody(1, 0, 1).pack())
        res = [handle_first_ack(conn, first, PRIMARY, 2, TIMERS.max_ack)
               for _ in range(TIMERS.max_ack + 1)]
        self.assertEqual(res[-1], FLOW_CONTROL)
        self.assertEqual(res[0], None)


class TestNacks(TestCase):

    def test_nack_on_tick(self):
        conn = new_connection(KEY)
        receive_app_message(conn, request(3))
        actions = periodic_tick(conn, 0, PRIMARY, TIMERS)
        self.assertIn(SendNackRemote(1, (1, 2)), actions)
        again = periodic_tick(conn, 1, PRIMARY, TIMERS)
        self.assertNotIn(SendNackRemote(1, (1, 2)), again)

    def test_backup_nacks_locally(self):
        conn = new_connection(KEY)
        receive_app_message(conn, request(2), role=BACKUP)
        actions = periodic_tick(conn, 0, BACKUP, TIMERS)
        self.assertIn(SendNackLocal(1, (1,)), actions)

    def test_handle_remote_nack(self):
        conn = new_connection(KEY)
        a = send_app_message(conn, b"a", (), (), PRIMARY, 1, 0, 5, now=0)
        send_app_message(conn, b"b", (), (), PRIMARY, 1, 0, 6, now=0)
        res = handle_nack(conn, NackBody(1, (1,)))
        self.assertEqual(res, Retransmit([a]))

    def test_handle_local_nack(self):
        conn = new_connection(KEY)
        msg = request(1)
        receive_app_message(conn, msg)
        deliver_next(conn, PRIMARY)
        res = handle_nack(conn, NackBody(1, (1,), 2), local=True)
        self.assertEqual(res, Retransmit([msg]))

    def test_nack_of_an_old_view(self):
        conn = new_connection(KEY)
        send_app_message(conn, b"a", (), (), PRIMARY, 1, 0, 5, now=0)
        self.assertEqual(handle_nack(conn, NackBody(2, (1,))), None)


class TestViews(TestCase):

    def test_note_last_sent_reveals_tail(self):
        conn = new_connection(KEY)
        receive_app_message(conn, request(1))
        res = note_last_sent(conn, 1, 3)
        self.assertEqual(res, (2, 3))
        self.assertEqual(conn.nacks, [2, 3])

    def test_switch_receive_view(self):
        conn = new_connection(KEY)
        receive_app_message(conn, request(1))
        receive_app_message(conn, request(3))
        switch_receive_view(conn, 2)
        self.assertEqual(conn.recv_view, 2)
        # msn 3 came after a gap and is flushed, msn 1 stays deliverable
        self.assertEqual(sorted(conn.slots), [(1, 1)])
        self.assertEqual(deliver_next(conn, PRIMARY).header.msg_seq_num, 1)

    def test_renumber_sent(self):
        conn = new_connection(KEY)
        for i in range(3):
            send_app_message(conn, b"x%d" % i, (), (), PRIMARY, 1, 0, i + 1,
                             now=0)
        res = renumber_sent(conn, 1, 2, 5, lambda e: e.timestamp + 10)
        self.assertEqual([e.msn for e in res], [1, 2])
        self.assertEqual([e.msg.payload for e in res], [b"x1", b"x2"])
        self.assertEqual(res[0].msg.header.primary_view_num, 2)
        self.assertEqual(res[0].msg.header.precedence, 5)
        self.assertEqual(res[0].timestamp, 12)
        self.assertEqual(conn.send_view, 2)

    def test_snapshot_restore(self):
        conn = new_connection(KEY)
        receive_app_message(conn, request(1))
        receive_app_message(conn, request(3))
        deliver_next(conn, PRIMARY)
        send_app_message(conn, b"a", (), (), PRIMARY, 1, 0, 5, now=0)
        res = snapshot_connection(restore_connection(
            snapshot_connection(conn)))
        self.assertEqual(res, snapshot_connection(conn))


class TestQuiet(TestCase):

    def test_fresh_connection(self):
        self.assertTrue(is_quiet(new_connection(KEY)))

    def test_unacked(self):
        conn = new_connection(KEY)
        send_app_message(conn, b"a", (), (), PRIMARY, 1, 0, 5, now=0)
        self.assertFalse(is_quiet(conn))

    def test_placeholder(self):
        conn = new_connection(KEY)
        receive_app_message(conn, request(2))
        self.assertFalse(is_quiet(conn))



class TestRetained(TestCase):

    def entries(self, seqs, view=1):
        from llft.wire import OrderEntry, OrderType, TupleOrder
        return [OrderEntry(OrderType.TimeOrder, s, 2, view,
                           TupleOrder('t', 'clock', s)) for s in seqs]

    def test_held_and_reflected_once(self):
        conn = new_connection(KEY)
        fresh = retain_remote_orders(conn, self.entries([1, 2]))
        self.assertEqual(len(fresh), 2)
        self.assertEqual(retain_remote_orders(conn, self.entries([2])), [])
        self.assertEqual(len(take_reflections(conn)), 2)

    def test_window_keeps_newest(self):
        conn = new_connection(KEY)
        retain_remote_orders(conn, self.entries(range(1, 9)), window=4)
        retain_remote_orders(conn, self.entries([1], view=2), window=4)
        res = sorted((e.primary_view_num, e.order_seq_num)
                     for e in conn.retained.values())
        self.assertEqual(res, [(1, 6), (1, 7), (1, 8), (2, 1)])

    def test_long_run_stays_bounded(self):
        conn = new_connection(KEY)
        for s in range(1, 3 * RETAIN_WINDOW, 7):
            retain_remote_orders(conn, self.entries(range(s, s + 7)))
            take_reflections(conn)
        self.assertEqual(len(conn.retained), RETAIN_WINDOW)


if __name__ == '__main__':
    test_main()
