"""This module defines the CLI for llft via main and llft functions.

run simulates one scenario, check judges a trace written by run, and sweep
runs and checks every cell of a scenario's fault grid for a range of seeds.

"""
import json
import logging

from llft.shell import cprint, init_colors, verdict_status

__version__ = version = '0.4.0'


def main(arguments):
    "llft: leader-determined fault tolerance, simulated."
    try:  # pragma: no cover
        # Exit on broken pipe.
        import signal
        signal.signal(signal.SIGPIPE, signal.SIG_DFL)
    except AttributeError:  # pragma: no cover
        # SIGPIPE is not available on Windows.
        pass

    from llft.config import ScenarioError
    from llft.trace import UnparseableTrace
    try:
        return llft(arguments)

    except (ScenarioError, UnparseableTrace) as e:
        cprint(str(e), 'err')
        return 1

    except NotImplementedError as e:
        cprint(str(e), 'err')
        cprint("Supported substitutions are {seed}, {name}, {env:KEY} and "
               "{[section]option}.", 'warn')
        return 1

    except KeyboardInterrupt:  # pragma: no cover
        return 1


def parse_seeds(s):
    """Seeds A..B, both included.

    Example
    -------
    >>> list(parse_seeds("1..3"))
    [1, 2, 3]
    >>> list(parse_seeds("7"))
    [7]

    """
    a, _, b = s.partition('..')
    try:
        return range(int(a), int(b or a) + 1)
    except ValueError:
        from llft.config import ScenarioError
        raise ScenarioError("--seeds %r is not A..B" % s)


def parse_args(arguments):
    from argparse import ArgumentParser
    description = ("Simulate leader-determined fault tolerant replication "
                   "and check its traces.")
    parser = ArgumentParser(description=description, prog='llft')
    parser.add_argument('--version',
                        help='print version number and exit',
                        action='store_true')
    parser.add_argument('-v', '--verbose',
                        help='log protocol transitions',
                        action='store_true')
    sub = parser.add_subparsers(dest='command')

    p = sub.add_parser('run', help='simulate one scenario')
    p.add_argument('scenario')
    p.add_argument('--seed', type=int, help='override the scenario seed')
    p.add_argument('--loss', type=float, help='override the loss rate')
    p.add_argument('--cell', help='grid cell to run, default: default')
    p.add_argument('--trace', help='write the trace here')
    p.add_argument('--check', action='store_true',
                   help='check the trace, exit 1 on any failure')

    p = sub.add_parser('check', help='check a trace')
    p.add_argument('trace')

    p = sub.add_parser('sweep', help='run and check a fault grid')
    p.add_argument('scenario')
    p.add_argument('--seeds', default='1..1', help='seeds A..B')
    p.add_argument('--loss',
                   help='only cells of these loss factors, comma separated')
    p.add_argument('--report', help='write the JSON report here')

    return parser, parser.parse_args(arguments)


def llft(arguments):
    """Dispatch a subcommand.

    Returns 0 if every verdict passed (or nothing was checked), 1 otherwise.

    """
    parser, args = parse_args(arguments or [])

    if args.version:
        print(version)
        return 0
    if args.command is None:
        parser.print_usage()
        return 1

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format='%(levelname)s %(name)s: %(message)s')
    init_colors()

    return {'run': run_command, 'check': check_command,
            'sweep': sweep_command}[args.command](args)


def print_verdicts(verdicts):
    for v in verdicts:
        line = "%-18s %s" % (v.prop, 'pass' if v.ok else 'FAIL')
        if not v.ok:
            line += ": %s" % v.detail
        cprint(line, verdict_status(v.ok))
        for r in ([] if v.ok else v.excerpt):
            print("    %s" % json.dumps(r, sort_keys=True))


def run_command(args):
    from llft.config import read_scenario
    from llft.simnet import BudgetExceeded, run
    from llft.trace import dump

    sc = read_scenario(args.scenario, args.cell, args.seed, args.loss)
    cprint("%s %s seed %d: %d groups, %d faults"
           % (args.scenario, sc.name, sc.seed, len(sc.groups),
              len(sc.faults)))
    status = 0
    try:
        trace = run(sc)
    except BudgetExceeded as e:
        cprint(str(e), 'err')
        trace, status = e.trace, 1
    if args.trace:
        dump(trace, args.trace)

    end = trace.of('end')[-1]
    replies = [r for r in trace.of('reply') if r['first']]
    cprint('Summary')
    print("-" * 23)
    print("ended %s at %.1fms after %d events" % (end['reason'],
                                                   end['t'] / 1000.0,
                                                   end['events']))
    print("%d of %d requests answered" % (len(replies),
                                          len(trace.of('request'))))
    print("trace %s" % trace.hash())
    if args.check:
        from llft.checks import check, passed
        verdicts = check(trace)
        print_verdicts(verdicts)
        status = status or int(not passed(verdicts))
    return status


def check_command(args):
    from llft.checks import check, passed
    from llft.trace import load

    verdicts = check(load(args.trace))
    print_verdicts(verdicts)
    return int(not passed(verdicts))


def sweep_command(args):
    from llft.checks import passed, sweep
    from llft.config import read_config

    config = read_config(args.scenario)
    seeds = parse_seeds(args.seeds)

    def progress(cell, seed, verdicts, reason):
        if reason == 'budget':
            cprint("%s seed %d: budget exceeded" % (cell, seed), 'err')
        elif not passed(verdicts):
            cprint("%s seed %d: %s" % (cell, seed, ', '.join(
                v.prop for v in verdicts if not v.ok)), 'err')

    report = sweep(config, args.scenario, seeds, args.loss, progress)
    if args.report:
        with open(args.report, 'w') as f:
            json.dump(report, f, indent=2)

    # print summary of the outcomes of each cell
    cprint('Summary')
    print("-" * 23)
    for cell, stats in report['cells'].items():
        ok = stats['passed'] == stats['runs']
        cprint("%s: %d/%d passed, %d failovers"
               % (cell, stats['passed'], stats['runs'], stats['failovers']),
               verdict_status(ok))
    vc = report['view_change_us']
    if vc['count']:
        print("view changes: %d, mean %.1fms, max %.1fms"
              % (vc['count'], vc['mean'] / 1000.0, vc['max'] / 1000.0))
    return int(report['passed'] != report['runs'])


def _main():
    "llft: leader-determined fault tolerance, simulated"
    from sys import argv, exit
    exit(main(argv[1:]))


if __name__ == '__main__':
    _main()
