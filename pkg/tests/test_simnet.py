from tests.util import *

from llft.checks import check
from llft.config import read_scenario
from llft.replica import CRASHED, SERVER
from llft.simnet import BudgetExceeded, SimNet, run
from llft.trace import digest


def answered(trace):
    return set(r['rid'] for r in trace.of('reply') if r['first'])


def requested(trace):
    return set(r['rid'] for r in trace.of('request'))


class TestFaultFree(TestCase):

    def test_every_request_answered(self):
        trace = run(scenario(BASIC))
        self.assertEqual(len(requested(trace)), 5)
        self.assertEqual(answered(trace), requested(trace))
        self.assertEqual(trace.of('end')[-1]['reason'], 'quiescent')

    def test_deterministic(self):
        a = run(scenario(BASIC, seed=4))
        b = run(scenario(BASIC, seed=4))
        self.assertEqual(a.hash(), b.hash())

    def test_seed_matters(self):
        a = run(scenario(BASIC, seed=1))
        b = run(scenario(BASIC, seed=2))
        self.assertNotEqual(a.hash(), b.hash())

    def test_replicas_end_equal(self):
        trace = run(scenario(BASIC))
        values = set(r['value'] for r in trace.of('digest')
                     if r['point'] == 'end:1')
        self.assertEqual(len(values), 1)

    def test_budget(self):
        sc = scenario(BASIC)
        sc.budget = 50
        try:
            run(sc)
        except BudgetExceeded as e:
            self.assertEqual(e.trace.of('end')[-1]['reason'], 'budget')
        else:
            self.fail("no BudgetExceeded")


class TestFaults(TestCase):

    def test_crash_primary_fails_over(self):
        trace = run(read_scenario(scenario_path('crash-primary')))
        commits = [r for r in trace.of('commit') if r['kind'] == 'primary']
        self.assertEqual([(r['p'], r['pvn']) for r in commits],
                         [('server.1', 2)])
        self.assertEqual(answered(trace), requested(trace))
        self.assertEqual(len(trace.of('crash')), 1)

    def test_two_way_commits_without_acks(self):
        trace = run(read_scenario(scenario_path('two-way')))
        commits = [r for r in trace.of('commit') if r['kind'] == 'primary']
        self.assertEqual([r['p'] for r in commits], ['server.1'])
        elections = [r for r in trace.of('ack') if r['kind'] == 'election']
        self.assertEqual([r['acks'] for r in elections], [[]])

    def test_partition_heals(self):
        trace = run(read_scenario(scenario_path('partition')))
        sim = [r['k'] for r in trace.of('partition', 'heal')]
        self.assertEqual(sim, ['partition', 'heal'])
        resets = [r['p'] for r in trace.of('reset')]
        self.assertIn('server.0', resets)
        self.assertEqual(answered(trace), requested(trace))

    def test_no_gc_violation(self):
        for name in ('fault-free', 'crash-backup'):
            trace = run(read_scenario(scenario_path(name)))
            self.assertEqual(trace.of('gc-violation'), [])


class TestScenarios(TestCase):

    def simulate(self, name, cell=None):
        net = SimNet(read_scenario(scenario_path(name), cell))
        trace = net.run()
        self.assertEqual([v.prop for v in check(trace) if not v.ok], [])
        return net, trace

    def end_digests(self, trace):
        return dict((r['p'], r['value']) for r in trace.of('digest')
                    if r['point'] == 'end:1')

    def test_semi_passive_failover(self):
        net, trace = self.simulate('semi-passive')
        asked = set((r['p'], r['rid']) for r in trace.of('request'))
        got = set((r['p'], r['rid']) for r in trace.of('reply'))
        self.assertEqual(len(asked), 30)
        self.assertEqual(got, asked)
        # both clients increment k0 7 times and k1 8 times
        oracle = digest({'k0': 14, 'k1': 16})
        ends = self.end_digests(trace)
        self.assertEqual(sorted(ends), ['server.1', 'server.2'])
        self.assertEqual(set(ends.values()), set([oracle]))
        for name in ('server.1', 'server.2'):
            ops = [r['op'] for r in trace.of('apply') if r['p'] == name]
            self.assertEqual(len(ops), 30)
            self.assertEqual(len(set(ops)), 30)

    def test_tasks_replay(self):
        for cell in ('default', 'crash'):
            net, trace = self.simulate('tasks', cell)
            self.assertEqual(answered(trace), requested(trace))
            ends = self.end_digests(trace)
            self.assertTrue(ends)
            self.assertEqual(len(set(ends.values())), 1)
            for name in ends:
                values = [r['value'] for r in trace.of('clock')
                          if r['p'] == name]
                self.assertTrue(values)
                self.assertEqual(values, sorted(values))

    def test_tasks_clock_across_failover(self):
        net, trace = self.simulate('tasks', 'crash')
        commit = [r for r in trace.of('commit') if r['kind'] == 'primary']
        self.assertEqual([r['p'] for r in commit], ['server.1'])
        clocks = [r for r in trace.of('clock') if r['p'] == 'server.1']
        self.assertTrue([r for r in clocks if r['t'] < commit[0]['t']])
        values = [r['value'] for r in clocks]
        self.assertEqual(values, sorted(values))

    def test_join_transfers_state(self):
        net, trace = self.simulate('join')
        adds = [r for r in trace.of('commit') if r['kind'] == 'add']
        self.assertEqual([r['p'] for r in adds], ['server.0'])
        joined = [r for r in trace.of('join')
                  if r['p'] == 'server.3' and r['phase'] == 'state']
        self.assertEqual(len(joined), 1)
        states = [r for r in trace.of('digest')
                  if r['point'].startswith('state:')]
        self.assertEqual(sorted(r['p'] for r in states),
                         ['server.0', 'server.3'])
        self.assertEqual(len(set(r['value'] for r in states)), 1)
        later = [r for r in trace.of('deliver')
                 if r['p'] == 'server.3' and r['t'] >= joined[0]['t']]
        self.assertTrue(later)
        ends = self.end_digests(trace)
        self.assertIn('server.3', ends)
        self.assertEqual(len(set(ends.values())), 1)
        self.assertEqual(answered(trace), requested(trace))


class TestLongRun(TestCase):

    def test_order_log_stays_bounded(self):
        text = BASIC.replace('requests = 5', 'requests = 300')
        text = text.replace('until_ms = 1500', 'until_ms = 5000')
        net = SimNet(scenario(text))
        sizes = []

        def sample(record):
            e = net.procs.get(record['p'])
            if record['k'] == 'deliver' and e.kind == SERVER:
                sizes.append(len(e.stream.log))

        net.trace.listeners.append(sample)
        trace = net.run()
        self.assertEqual(trace.of('end')[-1]['reason'], 'quiescent')
        primary = net.procs['server.0']
        self.assertTrue(primary.stream.last_seq >= 600)
        self.assertTrue(max(sizes) * 5 < primary.stream.last_seq)
        self.assertEqual(primary.stream.log, {})

    def test_quiescent_buffers_empty(self):
        for sc in (scenario(BASIC),
                   read_scenario(scenario_path('semi-passive'))):
            net = SimNet(sc)
            trace = net.run()
            self.assertEqual(trace.of('end')[-1]['reason'], 'quiescent')
            for name, e in net.procs.items():
                if e.status == CRASHED:
                    continue
                self.assertTrue(e.is_quiet())
                res = [(c.sent, c.delivered) for c in e.conns.values()]
                self.assertEqual(res, [({}, [])] * len(e.conns))


class TestTopology(TestCase):

    def test_process_names(self):
        net = SimNet(scenario(BASIC))
        net._bootstrap()
        self.assertEqual(list(net.procs),
                         ['server.0', 'server.1', 'server.2', 'client.0'])
        self.assertEqual(net.registered[1],
                         ['server.0', 'server.1', 'server.2'])

    def test_unlisted_on_last_side(self):
        net = SimNet(scenario(BASIC))
        net.sides = {'server.0': 0, 'server.1': 1}
        self.assertTrue(net._connected('server.1', 'client.0'))
        self.assertFalse(net._connected('server.0', 'client.0'))


if __name__ == '__main__':
    test_main()
