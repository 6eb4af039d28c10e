from tests.util import *

from llft.config import *


SWEEP = """
[scenario]
seed = 4
until_ms = 2000
latency_us = 200, 300
grid = loss{0,10}-{crash,split}
loss =
    loss10: 0.10

[timers]
heartbeat_misses =
    loss10: 5

[timers:loss10-split]
fault_base_ms = 25

[group:server]
id = 1
replicas = 3
mode = semi-passive

[group:client]
id = 2
kind = client
target = server
requests = 7
request_gap_ms = 0.5

[fault:crash]
cells = crash
kind = crash
at_ms = 40
target = server.0

[fault:split]
cells = split
kind = partition
at_ms = 20
heal_ms = 200
sides = server.0 | server.1 server.2 client.0
"""


class TestConfig(TestCase):

    config = parse_config(SWEEP)

    def test_read_scenario(self):
        sc = read_scenario(scenario_path("fault-free"))
        self.assertEqual([g.name for g in sc.groups], ['server', 'client'])
        self.assertEqual(sc.faults, [])

    def test_read_config_missing(self):
        self.assertRaises(ScenarioError, read_config, "no-such-file.ini")

    def test_get_grid(self):
        res = get_grid(self.config)
        exp = ['loss0-crash', 'loss0-split', 'loss10-crash', 'loss10-split']
        self.assertEqual(res, exp)

    def test_get_grid_loss(self):
        res = get_grid(self.config, '10')
        exp = ['loss10-crash', 'loss10-split']
        self.assertEqual(res, exp)

    def test_defaults(self):
        sc = load_scenario(self.config, "x.ini", 'loss0-crash')
        self.assertEqual(sc.seed, 4)
        self.assertEqual(sc.until, 2000000)
        self.assertEqual(sc.drain, 1500000)
        self.assertEqual(sc.latency, (200, 300))
        self.assertEqual(sc.loss, 0.0)
        self.assertEqual(sc.eventual_k, 20)
        self.assertEqual(sc.timers, Timers())

    def test_factor_conditional_value(self):
        sc = load_scenario(self.config, "x.ini", 'loss10-crash')
        self.assertEqual(sc.loss, 0.10)
        self.assertEqual(sc.timers.heartbeat_misses, 5)
        self.assertEqual(sc.timers.fault_base, 10000)

    def test_cell_section(self):
        sc = load_scenario(self.config, "x.ini", 'loss10-split')
        self.assertEqual(sc.timers.fault_base, 25000)

    def test_overrides(self):
        sc = load_scenario(self.config, "x.ini", 'loss0-crash', seed=9,
                           loss=0.2)
        self.assertEqual(sc.seed, 9)
        self.assertEqual(sc.loss, 0.2)

    def test_get_groups(self):
        sc = load_scenario(self.config, "x.ini", 'loss0-crash')
        server, client = sc.groups
        self.assertEqual((server.kind, server.replicas, server.mode),
                         ('server', 3, 'semi-passive'))
        self.assertEqual((client.kind, client.replicas, client.target),
                         ('client', 1, 'server'))
        self.assertEqual(client.request_gap, 500)
        self.assertEqual(client.requests, 7)

    def test_get_faults_crash(self):
        sc = load_scenario(self.config, "x.ini", 'loss0-crash')
        res = [(f.kind, f.at, f.target) for f in sc.faults]
        exp = [('crash', 40000, ('server', 0))]
        self.assertEqual(res, exp)

    def test_get_faults_partition(self):
        sc = load_scenario(self.config, "x.ini", 'loss0-split')
        f, = sc.faults
        self.assertEqual(f.kind, 'partition')
        self.assertEqual((f.at, f.heal), (20000, 200000))
        exp = ((('server', 0),),
               (('server', 1), ('server', 2), ('client', 0)))
        self.assertEqual(f.sides, exp)

    def test_no_server(self):
        text = "[group:client]\nkind = client\ntarget = server\n"
        self.assertRaises(ScenarioError, scenario, text)

    def test_unknown_kind(self):
        text = BASIC + "\n[fault:x]\nkind = meteor\nat_ms = 1\n"
        self.assertRaises(ScenarioError, scenario, text)

    def test_unknown_mode(self):
        text = BASIC.replace("app = kv", "app = kv\nmode = active")
        self.assertRaises(ScenarioError, scenario, text)

    def test_unknown_target(self):
        text = BASIC.replace("target = server", "target = nobody")
        self.assertRaises(ScenarioError, scenario, text)

    def test_fault_on_unknown_group(self):
        text = BASIC + ("\n[fault:x]\nkind = crash\nat_ms = 1\n"
                        "target = nobody.0\n")
        self.assertRaises(ScenarioError, scenario, text)

    def test_one_sided_partition(self):
        text = BASIC + ("\n[fault:x]\nkind = partition\nat_ms = 1\n"
                        "sides = server.0\n")
        self.assertRaises(ScenarioError, scenario, text)

    def test_bad_number(self):
        text = BASIC.replace("requests = 5", "requests = five")
        self.assertRaises(ScenarioError, scenario, text)

    def test_seed_substitution(self):
        text = BASIC.replace("requests = 5", "requests = {seed}")
        sc = scenario(text, seed=3)
        self.assertEqual(sc.group('client').requests, 3)

    def test_shipped_scenarios(self):
        for name in ('fault-free', 'crash-primary', 'two-way',
                     'crash-backup', 'partition', 'join', 'semi-passive',
                     'tasks', 'sweep'):
            config = read_config(scenario_path(name))
            for cell in get_grid(config) or [DEFAULT_CELL]:
                sc = load_scenario(config, name, cell)
                self.assertTrue(sc.groups)


if __name__ == '__main__':
    test_main()
