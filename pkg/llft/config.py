"""This module contains the config functions for reading and parsing scenario
documents.

A scenario is an ini file: a [scenario] section, optional [timers], one
[group:NAME] section per group and one [fault:NAME] section per fault.
Any option can be overridden for one cell of the grid in a
[section:CELL] section, and any value line can be factor-conditional.

Note: Substitutions functions can be found in subst.py.

"""
from configparser import ConfigParser, NoOptionError, NoSectionError
from dataclasses import dataclass, field


class ScenarioError(ValueError):

    """Raised for a scenario document that cannot be run."""


DEFAULT_CELL = 'default'

GROUP_KINDS = ('server', 'client')
FAULT_KINDS = ('crash', 'partition', 'join', 'loss')


@dataclass
class Timers(object):
    "Protocol timers, in µs, and counters."
    retransmit: int = 40000
    first_ack: int = 20000
    keepalive: int = 200000
    heartbeat: int = 10000
    fault_base: int = 10000
    fault_step: int = 10000
    membership_retransmit: int = 20000
    # simulated cost of one step of an application task
    task_step: int = 10
    max_ack: int = 8
    max_count: int = 5
    heartbeat_misses: int = 3


MS_TIMERS = ('retransmit', 'first_ack', 'keepalive', 'heartbeat',
             'fault_base', 'fault_step', 'membership_retransmit')
COUNTERS = ('max_ack', 'max_count', 'heartbeat_misses')


@dataclass
class GroupSpec(object):
    name: str
    group_id: int
    kind: str = 'server'
    replicas: int = 3
    mode: str = 'semi-active'
    app: str = 'kv'
    # client workload
    requests: int = 0
    request_gap: int = 2000
    start: int = 1000
    keys: int = 1
    target: str = None


@dataclass
class FaultSpec(object):
    name: str
    kind: str
    at: int
    heal: int = None
    # (group name, index) of a crash or join
    target: tuple = None
    # tuple of sides, each a tuple of (group name, index)
    sides: tuple = ()
    loss: float = None


@dataclass
class Scenario(object):
    name: str
    path: str
    seed: int
    until: int = 5000000
    drain: int = 1500000
    budget: int = 2000000
    latency: tuple = (100, 500)
    loss: float = 0.0
    eventual_k: int = 20
    duplicate: float = 0.0
    reorder: float = 0.0
    timers: Timers = field(default_factory=Timers)
    groups: list = field(default_factory=list)
    faults: list = field(default_factory=list)
    grid: list = field(default_factory=list)

    def group(self, name):
        for g in self.groups:
            if g.name == name:
                return g
        raise ScenarioError("no group %r in %s" % (name, self.path))


class Cell(object):

    """One cell of a scenario's grid: the name factor conditions are matched
    against, and what braces can refer to."""

    attributes = ('name', 'seed')

    def __init__(self, name, config, path, seed=0):
        self.name = name
        self.config = config
        self.path = path
        self.seed = seed


def read_config(scenariofile):
    config = ConfigParser(interpolation=None)
    if not config.read(scenariofile):
        raise ScenarioError("cannot read scenario %s" % scenariofile)
    return config


def parse_config(text):
    config = ConfigParser(interpolation=None)
    config.read_string(text)
    return config


def _get(config, *args):
    try:
        return config.get(*args).strip()
    except (NoSectionError, NoOptionError):
        return ''


def _get_env_maybe(cell, section, option):
    return (_get(cell.config, '%s:%s' % (section, cell.name), option) or
            _get(cell.config, section, option))


def _value(cell, section, option, default=None):
    """The cell's value of an option: the last line left once factor
    conditions are expanded, with braces replaced."""
    from llft.subst import expand_factor_conditions, replace_braces
    raw = _get_env_maybe(cell, section, option)
    lines = [expand_factor_conditions(line.strip(), cell)
             for line in raw.split('\n')]
    lines = [line for line in lines if line]
    if not lines:
        return default
    return replace_braces(lines[-1], cell)


def _number(cell, section, option, default, kind):
    value = _value(cell, section, option)
    if value is None:
        return default
    try:
        return kind(value)
    except ValueError:
        raise ScenarioError("[%s] %s = %r is not a number"
                            % (section, option, value))


def _ms(cell, section, option, default):
    "An option in ms, as µs."
    return int(round(_number(cell, section, option, default, float) * 1000))


def _member(s, what):
    "GROUP.INDEX"
    try:
        name, index = s.rsplit('.', 1)
        return name, int(index)
    except ValueError:
        raise ScenarioError("%s: %r is not GROUP.INDEX" % (what, s))


def get_grid(config, loss=None):
    """The cell names of the scenario's grid, narrowed to the loss factors
    in loss (e.g. "0,10") when given."""
    from llft.subst import matches_factor_conditions, parse_grid
    cells = parse_grid(_get(config, 'scenario', 'grid'))
    if loss:
        wanted = 'loss{%s}' % loss
        cells = [c for c in cells
                 if matches_factor_conditions(wanted, Cell(c, config, ''))]
    return cells


def get_timers(cell):
    t = Timers()
    for name in MS_TIMERS:
        setattr(t, name, _ms(cell, 'timers', name + '_ms',
                             getattr(t, name) / 1000.0))
    for name in COUNTERS:
        setattr(t, name, _number(cell, 'timers', name, getattr(t, name),
                                 int))
    t.task_step = _number(cell, 'timers', 'task_step_us', t.task_step, int)
    return t


def _sections(config, prefix):
    "Base sections NAME of prefix:NAME, not their cell overrides."
    return [s.split(':')[1] for s in config.sections()
            if s.startswith(prefix + ':') and s.count(':') == 1]


def get_groups(cell):
    from llft.apps import APPS
    from llft.replica import MODES
    groups = []
    for i, name in enumerate(_sections(cell.config, 'group'), 1):
        section = 'group:%s' % name
        g = GroupSpec(name, _number(cell, section, 'id', i, int))
        g.kind = _value(cell, section, 'kind', g.kind)
        if g.kind not in GROUP_KINDS:
            raise ScenarioError("group %s: unknown kind %r" % (name, g.kind))
        g.replicas = _number(cell, section, 'replicas',
                             1 if g.kind == 'client' else g.replicas, int)
        g.mode = _value(cell, section, 'mode', g.mode)
        if g.mode not in MODES:
            raise ScenarioError("group %s: unknown mode %r" % (name, g.mode))
        g.app = _value(cell, section, 'app', g.app)
        if g.kind == 'server' and g.app not in APPS:
            raise ScenarioError("group %s: unknown app %r" % (name, g.app))
        g.requests = _number(cell, section, 'requests', 0, int)
        g.request_gap = _ms(cell, section, 'request_gap_ms', 2)
        g.start = _ms(cell, section, 'start_ms', 1)
        g.keys = _number(cell, section, 'keys', 1, int)
        g.target = _value(cell, section, 'target')
        groups.append(g)
    if not any(g.kind == 'server' for g in groups):
        raise ScenarioError("%s has no server group" % cell.path)
    names = [g.name for g in groups]
    for g in groups:
        if g.kind == 'client' and g.target not in names:
            raise ScenarioError("client %s targets unknown group %r"
                                % (g.name, g.target))
    return groups


def get_faults(cell):
    from llft.subst import matches_factor_conditions, partition_sides
    faults = []
    for name in _sections(cell.config, 'fault'):
        section = 'fault:%s' % name
        cells = _value(cell, section, 'cells')
        if cells and not matches_factor_conditions(cells, cell):
            continue
        kind = _value(cell, section, 'kind')
        if kind not in FAULT_KINDS:
            raise ScenarioError("fault %s: unknown kind %r" % (name, kind))
        if _value(cell, section, 'at_ms') is None:
            raise ScenarioError("fault %s: no at_ms" % name)
        f = FaultSpec(name, kind, _ms(cell, section, 'at_ms', 0))
        if _value(cell, section, 'heal_ms') is not None:
            f.heal = _ms(cell, section, 'heal_ms', 0)
        if kind in ('crash', 'join'):
            f.target = _member(_value(cell, section, 'target', ''), name)
        elif kind == 'partition':
            sides = partition_sides(_value(cell, section, 'sides', ''))
            f.sides = tuple(tuple(_member(s, name) for s in side)
                            for side in sides)
            if len(f.sides) < 2:
                raise ScenarioError("fault %s: a partition needs two sides"
                                    % name)
        else:
            f.loss = _number(cell, section, 'loss', 0.0, float)
        faults.append(f)
    return sorted(faults, key=lambda f: (f.at, f.name))


def load_scenario(config, path, cell=None, seed=None, loss=None):
    """The Scenario for one cell of a parsed document.

    seed and loss, when given, override the document.

    """
    c = Cell(cell or DEFAULT_CELL, config, path)
    c.seed = _number(c, 'scenario', 'seed', 1, int) if seed is None else seed
    sc = Scenario(c.name, path, c.seed)
    sc.until = _ms(c, 'scenario', 'until_ms', sc.until / 1000.0)
    sc.drain = _ms(c, 'scenario', 'drain_ms', sc.drain / 1000.0)
    sc.budget = _number(c, 'scenario', 'budget', sc.budget, int)
    latency = _value(c, 'scenario', 'latency_us')
    if latency:
        try:
            lo, hi = [int(x) for x in latency.split(',')]
        except ValueError:
            raise ScenarioError("latency_us = %r is not MIN, MAX" % latency)
        sc.latency = (lo, hi)
    sc.loss = (_number(c, 'scenario', 'loss', 0.0, float) if loss is None
               else loss)
    sc.eventual_k = _number(c, 'scenario', 'eventual_k', sc.eventual_k, int)
    sc.duplicate = _number(c, 'scenario', 'duplicate', 0.0, float)
    sc.reorder = _number(c, 'scenario', 'reorder', 0.0, float)
    sc.timers = get_timers(c)
    sc.groups = get_groups(c)
    sc.faults = get_faults(c)
    sc.grid = get_grid(config)
    for f in sc.faults:
        for name, _ in ((f.target,) if f.target else ()) + sum(f.sides, ()):
            sc.group(name)
    return sc


def read_scenario(scenariofile, cell=None, seed=None, loss=None):
    return load_scenario(read_config(scenariofile), scenariofile, cell,
                         seed, loss)
