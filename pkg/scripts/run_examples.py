#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""Run the run configurations bundled with this repo through the stv CLI."""

# Standard library imports
import csv
import os
import subprocess
import sys
import tempfile

from stv.utils import rm_rf, sha256_files

try:
    import coverage # noqa
    COV_CMD = ['coverage', 'run', '--append', '-m']
except ImportError:
    COV_CMD = [sys.executable, '-m']


HERE = os.path.abspath(os.path.dirname(__file__))
REPO_DIR = os.path.dirname(HERE)
RUNS_DIR = os.path.join(REPO_DIR, 'runs')
# the long acceptance runs are skipped with --quick
SLOW = ['ccm-overfit', 'cfr-overfit']
BLACKLIST = []


def _execute(cmd):
    print(' '.join(cmd))
    p = subprocess.Popen(cmd, stderr=subprocess.PIPE)
    print('--- STDOUT ---')
    _, stderr = p.communicate()
    if stderr:
        print('--- STDERR ---')
        print(stderr.decode().strip())
    return p.returncode != 0


def _stv(command, run_path, workdir, *args):
    cmd = COV_CMD + ['stv', command, '--workdir', workdir] + list(args)
    if run_path:
        cmd += ['-c', run_path]
    return _execute(cmd)


def _report_fields(path):
    fields = {}
    with open(path) as fi:
        for line in fi:
            key, _, value = line.rstrip('\n').partition(': ')
            fields[key] = value
    return fields


def check_ccm_overfit(workdir):
    fields = _report_fields(os.path.join(workdir, 'checkpoints', 'ccm.report.txt'))
    rank1 = float(fields['train.frame.rank1_mean'])
    print('training rank-1: %.6f' % rank1)
    return rank1 != 1.0


def check_cfr_overfit(workdir):
    with open(os.path.join(workdir, 'checkpoints', 'cfr.trace.csv')) as fi:
        losses = [float(row['loss']) for row in csv.DictReader(fi)
                  if row['stage'] == 'autoencoder']
    print('reconstruction loss: epoch 1 %.6g, epoch %d %.6g'
          % (losses[0], len(losses), losses[-1]))
    return not losses[-1] < 0.5 * losses[0]


CHECKS = {
    'ccm-overfit': check_ccm_overfit,
    'cfr-overfit': check_cfr_overfit,
}


def _checkpoints(workdir):
    directory = os.path.join(workdir, 'checkpoints')
    return [os.path.join(directory, f) for f in sorted(os.listdir(directory))
            if f.endswith('.ckpt')]


def run_example(name, run_path, workdir):
    errored = 0
    for command in ('generate', 'train', 'eval'):
        errored += _stv(command, run_path, workdir)
    if errored:
        return errored
    if name not in SLOW:
        # a second training run from the same config is bit-identical
        first = sha256_files(_checkpoints(workdir))
        errored += _stv('train', run_path, workdir)
        if sha256_files(_checkpoints(workdir)) != first:
            print('checkpoints of %s differ between identical runs' % name)
            errored += 1
        # threaded evaluation writes the same report
        report = os.path.join(workdir, 'reports')
        first = sha256_files([os.path.join(report, f) for f in sorted(os.listdir(report))
                              if f.endswith('.eval.csv')])
        errored += _stv('eval', run_path, workdir, '--threads', '4')
        if sha256_files([os.path.join(report, f) for f in sorted(os.listdir(report))
                         if f.endswith('.eval.csv')]) != first:
            print('threaded evaluation of %s differs' % name)
            errored += 1
    errored += _stv('report', None, workdir)
    if name in CHECKS:
        errored += CHECKS[name](workdir)
    return errored


def run_examples(quick=False):
    """Generate, train and evaluate every bundled run, each in its own workdir."""
    errored = 0
    workdirs = []

    for name in sorted(os.listdir(RUNS_DIR)):
        run_path = os.path.join(RUNS_DIR, name, 'run.yaml')
        if not os.path.isfile(run_path) or name in BLACKLIST or (quick and name in SLOW):
            continue
        print(run_path)
        print('-' * len(run_path))
        workdir = tempfile.mkdtemp()
        workdirs.append(workdir)
        errored += run_example(name, run_path, workdir)
        print('')

    workdir = tempfile.mkdtemp()
    workdirs.append(workdir)
    errored += _stv('complexity', None, workdir)
    errored += _stv('complexity', None, workdir, '--model.scale', 'full')
    errored += _stv('gradcheck', None, workdir)

    if errored:
        print('Some runs failed!')
        print('Assets saved in: %s' % ', '.join(workdirs))
        sys.exit(1)
    else:
        print('All runs completed successfully!')
        for workdir in workdirs:
            rm_rf(workdir)


if __name__ == '__main__':
    run_examples(quick='--quick' in sys.argv[1:])
