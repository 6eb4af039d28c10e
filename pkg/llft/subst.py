"""This module contains functions to deal with substitution in scenario
documents: the expansion of fault grids and of factor-conditional values.

The most useful are parse_grid and replace_braces.

"""
import os
import re
from itertools import product


DEPTH = 5


def parse_grid(s):
    """Expand a scenario's grid into the list of its cell names, braces
    multiply out with the first factor outermost.

    Example
    -------
    >>> parse_grid("loss{0,10}-{crashprimary,partition}, faultfree")
    ["loss0-crashprimary", "loss0-partition", "loss10-crashprimary",
    "loss10-partition", "faultfree"]

    """
    return [name for term in _terms(s) for name in _cell_names(term)]


def _terms(s):
    "The comma separated terms of a grid, commas in braces don't count."
    depth, start = 0, 0
    for i, c in enumerate(s):
        depth += {'{': 1, '}': -1}.get(c, 0)
        if c == ',' and depth == 0:
            if s[start:i].strip():
                yield s[start:i].strip()
            start = i + 1
    if s[start:].strip():
        yield s[start:].strip()


def _cell_names(term):
    pieces = re.split(r"({[^{}]*})", term)
    factors = [[o.strip() for o in p[1:-1].split(',')]
               if p[:1] + p[-1:] == '{}' else [p] for p in pieces]
    return [''.join(labels) for labels in product(*factors)]


def expand_factor_conditions(s, cell):
    """If cell matches the expanded factor then return value else return ''.

    Example
    -------
    >>> s = 'loss{10,20}: 0.25'
    >>> expand_factor_conditions(s, Cell(name="loss10-partition", ...))
    "0.25"
    >>> expand_factor_conditions(s, Cell(name="loss0-partition", ...))
    ""

    """
    try:
        factor, value = re.split(r'\s*\:\s*', s)
    except ValueError:
        return s

    if matches_factor_conditions(factor, cell):
        return value
    else:
        return ''


def matches_factor_conditions(s, cell):
    """"Returns True if loss{10, 20} expanded is contained in cell.name."""
    cell_labels = set(cell.name.split('-'))
    labels = set(parse_grid(s))
    return bool(labels & cell_labels)


def partition_sides(s):
    """The sides of a partition fault, "|" between sides.

    Example
    -------
    >>> partition_sides("server.0 | server.1 server.2")
    [["server.0"], ["server.1", "server.2"]]

    """
    return [side.split() for side in s.split("|") if side.strip()]


def replace_braces(s, cell):
    """Makes substitutions to s, with respect to grid cell cell.

    Example
    -------
    >>> replace_braces("{env:LLFT_LOSS:{[scenario]loss}}", cell)
    "0.1"

    Note: first "{[scenario]loss}" is replaced with the scenario's loss,
    then "{env:LLFT_LOSS:0.1}" with os.environ.get("LLFT_LOSS", "0.1").

    """
    def replace(m):
        return _replace_match(m, cell)
    for _ in range(DEPTH):
        s = re.sub(r"{[^{}]*}", replace, s)
    return s


def _replace_match(m, cell):
    """Given a match object, having matched something inside curly braces,
    replace the contents if matches one of the supported substitutions."""
    # ditch the curly braces
    s = m.group()[1:-1].strip()

    if s in cell.attributes:
        return str(getattr(cell, s))

    for r in [_replace_envvar, _replace_config]:
        try:
            return r(s, cell)
        except ValueError:
            pass

    raise NotImplementedError("{%s} not understood in scenario %s."
                              % (s, cell.path))


def _replace_envvar(s, _):
    """env:KEY or env:KEY:DEFAULT"""
    e = s.split(":")
    if len(e) > 3 or len(e) == 1 or e[0] != "env":
        raise ValueError()
    elif len(e) == 2:
        # Note: this can raise a KeyError.
        return os.environ[e[1]]
    else:  # len(e) == 3
        return os.environ.get(e[1], e[2])


def _replace_config(s, cell):
    """[sectionname]optionname"""
    m = re.match(r"\[(.*?)\](.*)", s)
    if m:
        section, option = m.groups()
        expanded = cell.config.get(section, option)
        return '\n'.join([expand_factor_conditions(e, cell)
                          for e in expanded.split("\n")]).strip()
    else:
        raise ValueError()
