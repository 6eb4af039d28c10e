from tests.util import *

from llft.checks import *
from llft.simnet import run
from llft.trace import Trace


class Builder(object):

    "Hand-written traces for one server group (1) and one client."

    def __init__(self):
        self.trace = Trace()
        self.t = 0

    def emit(self, p, k, **fields):
        self.t += 1
        return self.trace.emit(self.t, p, k, **fields)

    def view(self, p, pvn, prec, role='backup', g=1):
        self.emit(p, 'view', g=g, op='v:%d' % pvn, pvn=pvn, prec=prec,
                  role=role)

    def deliver(self, p, msn, pvn=1, prec=1, seq=None, view=1, conn='c'):
        self.emit(p, 'deliver', g=1, op='d:%s:%d:%d' % (conn, view, msn),
                  conn=conn, view=view, msn=msn,
                  seq=msn if seq is None else seq, epvn=pvn, pvn=pvn,
                  prec=prec, role='backup')

    def end(self, quiescent=True):
        self.emit('sim', 'end', reason='quiescent' if quiescent else 'until',
                  events=1, quiescent=quiescent)
        return self.trace


def healthy(msns=(1, 2)):
    b = Builder()
    b.view('server.0', 1, 1, 'primary')
    b.view('server.1', 1, 1)
    b.view('client.0', 1, 1, 'primary', g=2)
    b.emit('client.0', 'request', g=2, rid='r1')
    for m in msns:
        b.deliver('server.0', m)
        b.deliver('server.1', m)
    b.emit('client.0', 'reply', g=2, rid='r1', first=True)
    return b


def verdict(trace, prop):
    for v in check(trace):
        if v.prop == prop:
            return v


class TestSequences(TestCase):

    def test_infix(self):
        self.assertTrue(is_infix([2, 3], [1, 2, 3, 4]))
        self.assertTrue(is_infix([], [1]))
        self.assertFalse(is_infix([1, 3], [1, 2, 3]))

    def test_prefix_suffix(self):
        self.assertTrue(is_prefix([1], [1, 2]))
        self.assertTrue(is_suffix([2], [1, 2]))
        self.assertTrue(is_suffix([], [1, 2]))
        self.assertFalse(comparable([1, 3], [1, 2]))


class TestHealthy(TestCase):

    def test_all_pass(self):
        verdicts = check(healthy().end())
        self.assertEqual([v.prop for v in verdicts], list(PROPERTIES))
        self.assertEqual([v.prop for v in verdicts if not v.ok], [])
        self.assertTrue(passed(verdicts))

    def test_branch(self):
        bs = branches(healthy().end())
        self.assertEqual([b.g for b in bs], [1, 2])
        self.assertEqual(bs[0].chain, {1: 1})
        self.assertEqual(bs[0].full(1), ['v:1', 'd:c:1:1', 'd:c:1:2'])
        self.assertEqual(bs[0].surviving(1), None)


class TestViolations(TestCase):

    def test_two_primaries(self):
        b = healthy()
        b.view('server.1', 2, 2, 'primary')
        b.view('server.2', 1, 1)
        b.view('server.2', 2, 3, 'primary')
        v = verdict(b.end(), 'T1')
        self.assertFalse(v.ok)
        self.assertIn('view 2', v.detail)

    def test_old_primary_reset(self):
        b = healthy()
        b.view('server.2', 1, 1)
        b.view('server.2', 2, 2, 'primary')
        b.view('server.0', 2, 1, 'primary')
        b.emit('server.0', 'reset', g=1, reason='superseded', prec=1)
        self.assertTrue(verdict(b.end(), 'T1').ok)

    def test_diverging_starters(self):
        b = Builder()
        b.view('server.0', 1, 1, 'primary')
        b.view('server.1', 1, 1)
        b.deliver('server.0', 1)
        b.deliver('server.1', 2, seq=1)
        v = verdict(b.end(), 'T2')
        self.assertFalse(v.ok)
        self.assertEqual([r['op'] for r in v.excerpt],
                         ['d:c:1:1', 'd:c:1:2'])

    def test_unknown_delivery(self):
        b = healthy()
        b.deliver('server.1', 9, seq=3)
        self.assertFalse(verdict(b.end(), 'L1').ok)

    def test_hole_in_views(self):
        b = healthy()
        b.view('server.1', 3, 3, 'primary')
        self.assertFalse(verdict(b.end(), 'T6').ok)

    def test_unanswered(self):
        b = healthy()
        b.emit('client.0', 'request', g=2, rid='r2')
        v = verdict(b.end(), 'T5')
        self.assertFalse(v.ok)
        self.assertEqual(v.excerpt[0]['rid'], 'r2')

    def test_crashed_client_excused(self):
        b = healthy()
        b.emit('client.0', 'request', g=2, rid='r2')
        b.emit('client.0', 'crash')
        self.assertTrue(verdict(b.end(), 'T5').ok)

    def test_not_quiescent(self):
        self.assertFalse(verdict(healthy().end(quiescent=False), 'T5').ok)
        self.assertFalse(check_answered(healthy().trace, []).ok)

    def test_digests_differ(self):
        b = healthy()
        b.emit('server.0', 'digest', g=1, point='end:1', value='a')
        b.emit('server.1', 'digest', g=1, point='end:1', value='b')
        self.assertFalse(verdict(b.end(), 'replay-eq').ok)

    def test_clock_back(self):
        b = healthy()
        b.emit('server.0', 'clock', g=1, value=5, task='t')
        b.emit('server.0', 'clock', g=1, value=3, task='t')
        self.assertFalse(verdict(b.end(), 'clock-mono').ok)

    def test_repeated_delivery(self):
        b = healthy()
        self.assertTrue(check_reliable(b.trace, []).ok)
        b.deliver('server.1', 2, seq=2)
        self.assertFalse(check_reliable(b.trace, []).ok)

    def test_disobedient_backup(self):
        b = healthy()
        b.deliver('server.2', 1, seq=2)
        self.assertFalse(check_obedience(b.trace, []).ok)

    def test_consumed_out_of_order(self):
        b = healthy()
        b.emit('server.0', 'order', g=1, seq=3, epvn=1, type='TimeOrder',
               task='a', op='clock', n=1)
        b.emit('server.0', 'order', g=1, seq=4, epvn=1, type='TimeOrder',
               task='b', op='clock', n=1)
        b.emit('server.1', 'consume', g=1, task='b', op='clock', n=1)
        b.emit('server.1', 'consume', g=1, task='a', op='clock', n=1)
        self.assertFalse(check_head_only(b.trace, []).ok)

    def test_consumed_unordered(self):
        b = healthy()
        b.emit('server.1', 'consume', g=1, task='a', op='clock', n=1)
        self.assertFalse(check_head_only(b.trace, []).ok)

    def test_gc_violation(self):
        b = healthy()
        b.emit('server.0', 'gc-violation', ident=[2, 1, 1, 1, 1],
               missing=['server.1'])
        self.assertFalse(verdict(b.end(), 'GC-safe').ok)


class TestStatistics(TestCase):

    def test_view_changes(self):
        b = healthy()
        b.emit('server.1', 'propose', g=1, kind='primary')
        b.emit('server.1', 'commit', g=1, kind='primary', pvn=2, prec=2,
               members=[], took=2)
        b.view('server.1', 2, 2, 'primary')
        trace = b.end()
        self.assertEqual(view_changes(trace), [2])
        self.assertEqual(failovers(trace), 1)


class TestRuns(TestCase):

    def test_fault_free_run_passes(self):
        verdicts = check(run(scenario(BASIC)))
        self.assertEqual([v.prop for v in verdicts if not v.ok], [])

    def test_crash_primary_passes(self):
        from llft.config import read_scenario
        trace = run(read_scenario(scenario_path('crash-primary'), seed=2))
        verdicts = check(trace)
        self.assertEqual([v.prop for v in verdicts if not v.ok], [])

    def test_sweep(self):
        from llft.config import parse_config
        config = parse_config(BASIC)
        seen = []
        report = sweep(config, '<test>', range(1, 3),
                       progress=lambda *args: seen.append(args[:2]))
        self.assertEqual(list(report['cells']), ['default'])
        self.assertEqual(report['runs'], 2)
        self.assertEqual(report['pass_rate'], 1.0)
        self.assertEqual(seen, [('default', 1), ('default', 2)])

    def test_sweep_no_seeds(self):
        from llft.config import parse_config
        report = sweep(parse_config(BASIC), '<test>', range(0))
        self.assertEqual(report['cells'], {})
        self.assertEqual(report['pass_rate'], None)


if __name__ == '__main__':
    test_main()
