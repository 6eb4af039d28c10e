import os
from unittest import main as test_main, SkipTest, TestCase

from llft.config import Cell, Timers, parse_config, load_scenario

ROOTDIR = os.path.dirname(os.path.dirname(os.path.realpath(__file__)))
SCENARIODIR = os.path.join(ROOTDIR, "scenarios")


def scenario_path(name):
    return os.path.join(SCENARIODIR, name + ".ini")


def scenario(text, cell=None, seed=None):
    "A Scenario from the text of a scenario document."
    return load_scenario(parse_config(text), "<test>", cell, seed)


class DummyCell(Cell):

    "Bunch dummy grid cell."

    def __init__(self, **kwargs):
        self.__dict__.update(kwargs)


# small horizons keep the simulated runs quick
BASIC = """
[scenario]
seed = 1
until_ms = 1500
drain_ms = 500

[group:server]
id = 1
replicas = 3
app = kv

[group:client]
id = 2
kind = client
target = server
requests = 5
"""

TIMERS = Timers()
