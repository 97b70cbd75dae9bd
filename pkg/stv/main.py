# (c) 2016 Anaconda, Inc. / https://anaconda.com
# All Rights Reserved
#
# stv is distributed under the terms of the BSD 3-clause license.
# Consult LICENSE.txt or http://opensource.org/licenses/BSD-3-Clause.

from __future__ import absolute_import, division, print_function

import argparse
import logging
import os
from collections import OrderedDict, namedtuple
from os.path import isfile, join
import sys

from . import config
from .checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from .data import load_dataset, generate_synthetic_dataset, save_dataset
from .evaluation import CSV_COLUMNS, evaluate_network, table1_report
from .exceptions import ConfigError, EvaluationError, StvError, YamlParsingError
from .gradcheck import format_results, run_gradient_suite
from .networks import Network, NetworkSpec, build_spec, complexity_of
from .trainer import ARCH_SCHEDULES, run_schedule, write_run_report
from .utils import derive_seed, makedirs, normalize_path, yield_lines

from . import __version__

logger = logging.getLogger(__name__)

COMMANDS = OrderedDict([
    ('generate', "render the synthetic still/video dataset into the workdir"),
    ('train', "train the configured architecture on the workdir dataset"),
    ('eval', "rank-1 evaluation of the trained checkpoint"),
    ('gradcheck', "finite-difference check of every loss and layer"),
    ('complexity', "operation, parameter and layer counts of the four architectures"),
    ('report', "comparison table of the checkpoints and eval reports in the workdir"),
])
SEED_KEYS = sorted(key for key in config.TYPES if key.endswith('.seed'))
Summary = namedtuple('Summary', 'rank1_mean rank1_std')


def workdir_layout(info):
    root = normalize_path(os.path.abspath(info['paths.workdir']))
    return OrderedDict((name, join(root, name)) for name in ('data', 'checkpoints', 'reports'))


def checkpoint_path(info, arch):
    if info['paths.checkpoint'] and arch == info['model.arch']:
        return info['paths.checkpoint']
    return join(workdir_layout(info)['checkpoints'], arch + '.ckpt')


def spec_overrides(info, arch, geometry=None, n_classes=None):
    """Builder overrides: the configured ones, the ROI geometry and the class count."""
    overrides = dict(info['model.overrides']) if arch == info['model.arch'] else {}
    if geometry is not None:
        rows, cols, channels = geometry
        overrides['input_shape'] = (channels, rows, cols)
    if n_classes is not None and arch in ('tbe', 'haarnet'):
        overrides['n_classes'] = n_classes
    return overrides


def build_networks(info, dataset):
    arch = info['model.arch']
    overrides = spec_overrides(info, arch, dataset.geometry, dataset.n_identities)
    seed = info['model.seed']
    scale = info['model.scale']
    if arch == 'cfr':
        return OrderedDict([
            ('autoencoder', Network(build_spec('cfr', scale, **overrides), seed)),
            ('classifier', Network(build_spec('cfr_classifier', scale, **overrides),
                                   derive_seed(seed, 1))),
        ])
    return OrderedDict([('net', Network(build_spec(arch, scale, **overrides), seed))])


def _dataset(info):
    return load_dataset(workdir_layout(info)['data'])


def _evaluate(info, net, dataset):
    return evaluate_network(net, dataset, config.matcher_kind(info, net.spec.arch),
                            trials=info['eval.trials'], seed=info['eval.seed'],
                            fusion=info['eval.fusion'], threads=info['eval.threads'])


def cmd_generate(info, args):
    dataset = generate_synthetic_dataset(info['data.seed'], info['data.identities'],
                                         info['data.geometry'], config.degradations(info),
                                         threads=info['eval.threads'])
    manifest = save_dataset(dataset, workdir_layout(info)['data'])
    print("Successfully wrote %d identities, %d video ROIs: '%s'."
          % (dataset.n_identities, len(dataset.videos), manifest))


def cmd_train(info, args):
    dataset = _dataset(info)
    arch = info['model.arch']
    nets = build_networks(info, dataset)
    result = run_schedule(ARCH_SCHEDULES[arch], nets, dataset, info.train)
    for net in nets.values():
        path = checkpoint_path(info, net.spec.arch)
        makedirs(os.path.dirname(os.path.abspath(path)))
        save_checkpoint(net, path)
        print("Successfully created '%s'." % path)

    main_net = nets.get('net') or nets['autoencoder']
    fields = OrderedDict(config.echo_items(info))
    fields['spec_digest'] = main_net.spec.digest()
    for label, rep in _evaluate(info, main_net, dataset).items():
        fields['train.%s.rank1_mean' % label] = '%.6f' % rep.rank1_mean
        fields['train.%s.rank1_std' % label] = '%.6f' % rep.rank1_std
    report, trace = write_run_report(workdir_layout(info)['checkpoints'], arch, result, fields)
    print("Successfully created '%s'." % report)
    print("Successfully created '%s'." % trace)


def cmd_eval(info, args):
    dataset = _dataset(info)
    net = load_checkpoint(checkpoint_path(info, info['model.arch']))
    arch = net.spec.arch
    results = _evaluate(info, net, dataset)
    reports = workdir_layout(info)['reports']
    makedirs(reports)
    lines = config.echo_lines(info)
    for label, rep in results.items():
        lines.extend(rep.as_lines(label + '.'))
        print('%s rank-1: %.4f +- %.4f (%d trials, %d probes)'
              % (label, rep.rank1_mean, rep.rank1_std, rep.n_trials, rep.n_probes))
    text = join(reports, arch + '.eval.txt')
    with open(text, 'w') as fo:
        fo.write('\n'.join(lines) + '\n')
    c = complexity_of(net)
    csv = join(reports, arch + '.eval.csv')
    with open(csv, 'w') as fo:
        fo.write(','.join(CSV_COLUMNS) + '\n')
        for label, rep in results.items():
            fo.write('%s %s,%.12g,%.12g,%d,%d,%d\n'
                     % (net.spec.name, label, rep.rank1_mean, rep.rank1_std, c.n_operations,
                        c.n_parameters, c.n_layers))
    print("Successfully created '%s'." % text)
    print("Successfully created '%s'." % csv)


def cmd_gradcheck(info, args):
    results = run_gradient_suite(seed=args.suite_seed, points=args.points)
    print(format_results(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print("Error: %d gradient check(s) failed: %s" % (len(failed), ', '.join(failed)),
              file=sys.stderr)
        return 1
    print("all %d gradient checks passed" % len(results))


def _write_table(info, name, text, csv):
    reports = workdir_layout(info)['reports']
    makedirs(reports)
    paths = join(reports, name + '.txt'), join(reports, name + '.csv')
    for path, content in zip(paths, (text, csv)):
        with open(path, 'w') as fo:
            fo.write(content)
    sys.stdout.write(text)
    for path in paths:
        print("Successfully created '%s'." % path)


def cmd_complexity(info, args):
    scale = info['model.scale']
    geometry = info['data.geometry'] if scale == 'desk' else None
    n_classes = info['data.identities'] if scale == 'desk' else None
    specs = [build_spec(arch, scale, **spec_overrides(info, arch, geometry, n_classes))
             for arch in config.ARCHS]
    text, csv = table1_report(specs, [s.name for s in specs])
    _write_table(info, 'complexity-' + scale, text, csv)


def read_eval_report(path):
    """The frame-level rank-1 of an eval report, or None when there is none."""
    if not isfile(path):
        return None
    fields = dict(line.split(': ', 1) for line in yield_lines(path) if ': ' in line)
    try:
        return Summary(float(fields['frame.rank1_mean']), float(fields['frame.rank1_std']))
    except (KeyError, ValueError):
        logger.warning("ignoring malformed eval report %s", path)
        return None


def cmd_report(info, args):
    layout = workdir_layout(info)
    specs, evals = [], {}
    for arch in config.ARCHS:
        path = join(layout['checkpoints'], arch + '.ckpt')
        if not isfile(path):
            continue
        spec = NetworkSpec.from_yaml(read_checkpoint(path)[0])
        specs.append(spec)
        summary = read_eval_report(join(layout['reports'], arch + '.eval.txt'))
        if summary is not None:
            evals[spec.name] = summary
    if not specs:
        raise EvaluationError("no checkpoints in %s; run 'stv train' first"
                              % layout['checkpoints'])
    text, csv = table1_report(specs, [s.name for s in specs], evals)
    _write_table(info, 'table1', text, csv)


def cli_overrides(args):
    """(dotted key, value) pairs from the shorthand flags, then the explicit key flags."""
    overrides = []
    if args.arch is not None:
        overrides.append(('model.arch', args.arch))
    if args.epochs is not None:
        overrides.append(('train.epochs', args.epochs))
        overrides.append(('train.stage_epochs', {}))
    if args.seed is not None:
        overrides.extend((key, args.seed) for key in SEED_KEYS)
    if args.threads is not None:
        overrides.append(('eval.threads', args.threads))
    if args.matcher is not None:
        overrides.append(('eval.matcher', args.matcher))
    for key in config.TYPES:
        value = getattr(args, 'key:' + key)
        if value is not None:
            overrides.append((key, value))
    return overrides


def build_parser():
    common = common_options()
    p = argparse.ArgumentParser(
        prog='stv',
        description="still-to-video face recognition: train, evaluate and account for "
                    "CCM, TBE, HaarNet and CFR networks on synthetic data")

    p.add_argument('-V', '--version',
                   help="display the version being used and exit",
                   action="version",
                   version='%(prog)s {version}'.format(version=__version__))

    sub = p.add_subparsers(dest='command', metavar='COMMAND')
    sub.required = True
    for name, help in COMMANDS.items():
        sp = sub.add_parser(name, parents=[common], help=help, description=help)
        if name == 'gradcheck':
            sp.add_argument('--points',
                            type=int,
                            default=20,
                            help="random points per check, defaults to 20")
            sp.add_argument('--suite-seed',
                            type=int,
                            default=0,
                            help="seed of the check points, defaults to 0")
    return p


def common_options():
    common = argparse.ArgumentParser(add_help=False)

    common.add_argument('-c', '--config',
                        action="store",
                        help="run configuration (YAML sections, optionally templated)",
                        metavar='FILE')

    common.add_argument('--debug',
                        action="store_true")

    common.add_argument('-v', '--verbose',
                        action="store_true")

    common.add_argument('--arch',
                        choices=config.ARCHS,
                        help="shorthand for --model.arch")

    common.add_argument('--epochs',
                        type=int,
                        help="epochs of every training stage")

    common.add_argument('--seed',
                        help="sets %s" % ', '.join(SEED_KEYS))

    common.add_argument('--workdir',
                        action="store",
                        help="working directory, may be changed by STV_WORKDIR",
                        metavar='PATH')

    common.add_argument('--threads',
                        help="shorthand for --eval.threads")

    common.add_argument('--matcher',
                        help="shorthand for --eval.matcher")

    keys = common.add_argument_group('configuration keys')
    for key, _, _, descr in config.KEYS:
        keys.add_argument('--' + key,
                          dest='key:' + key,
                          metavar='VALUE',
                          help=descr.strip().split('\n')[0].replace('%', '%%'))
    return common


def main(argv=None):
    p = build_parser()
    args = p.parse_args(argv)

    if args.debug:
        logging.basicConfig(level=logging.DEBUG)
    elif args.verbose:
        logging.basicConfig(level=logging.INFO)

    workdir = getattr(args, 'key:paths.workdir') or args.workdir
    try:
        info = config.load(args.config, cli_overrides(args), cli_workdir=workdir)
        for line in config.echo_lines(info):
            print(line)
        return COMMAND_FUNCS[args.command](info, args) or 0
    except (ConfigError, YamlParsingError) as e:
        print(e.error_msg(), file=sys.stderr)
        return 2
    except StvError as e:
        print(e.error_msg(), file=sys.stderr)
        return 1
    except (IOError, OSError) as e:
        print("Error: %s" % e, file=sys.stderr)
        return 1


COMMAND_FUNCS = {
    'generate': cmd_generate,
    'train': cmd_train,
    'eval': cmd_eval,
    'gradcheck': cmd_gradcheck,
    'complexity': cmd_complexity,
    'report': cmd_report,
}


if __name__ == '__main__':
    sys.exit(main())
