import os
import shutil
import tempfile

import pytest

from stv import __version__
from stv.main import build_parser, cli_overrides, read_eval_report
from stv.main import main as stv_main

TINY = ['--data.identities', '3', '--data.videos_per_identity', '2', '--eval.trials', '2',
        '--train.batch_size', '4', '--train.augment_ops', '[mirror]',
        '--train.blur_copies', '1']


def stv(workdir, command, *args):
    return stv_main([command, '--workdir', workdir] + TINY + list(args))


def read_lines(path):
    with open(path) as fi:
        return fi.read().splitlines()


def test_version():
    with pytest.raises(SystemExit) as exc:
        stv_main(["-V"])
    assert exc.value.code == 0
    assert __version__ == '0.1.0'


def test_cli_overrides():
    args = build_parser().parse_args(['train', '--arch', 'tbe', '--epochs', '2', '--seed', '5',
                                      '--train.lr', '0.1'])
    pairs = cli_overrides(args)
    assert ('model.arch', 'tbe') in pairs
    assert ('train.epochs', 2) in pairs
    assert ('train.stage_epochs', {}) in pairs
    assert ('train.lr', '0.1') in pairs
    assert set(k for k, v in pairs if v == '5') == {'data.seed', 'eval.seed', 'model.seed',
                                                     'train.seed'}


def test_gradcheck_command():
    tmp_dir = tempfile.mkdtemp()
    assert stv(tmp_dir, 'gradcheck', '--points', '2') == 0
    shutil.rmtree(tmp_dir)


def test_complexity_command():
    tmp_dir = tempfile.mkdtemp()
    assert stv(tmp_dir, 'complexity') == 0
    csv = os.path.join(tmp_dir, 'reports', 'complexity-desk.csv')
    lines = read_lines(csv)
    # four desk-scale systems and four published rows
    assert len(lines) == 9
    assert lines[1].startswith('ccm-desk,,,')
    assert os.path.isfile(os.path.join(tmp_dir, 'reports', 'complexity-desk.txt'))
    shutil.rmtree(tmp_dir)


def test_invalid_configuration():
    tmp_dir = tempfile.mkdtemp()
    assert stv(tmp_dir, 'complexity', '--data.geometry', '[8, 8, 1]') == 2
    assert stv(tmp_dir, 'complexity', '--model.scale', 'huge') == 2
    assert stv(tmp_dir, 'generate', '--data.degradations', '{noise_sd: 0.9}') == 2
    assert not os.path.isdir(os.path.join(tmp_dir, 'data'))
    assert stv(tmp_dir, 'train', '--arch', 'cfr', '--model.overrides', '{hiden: 64}') == 2
    assert stv(tmp_dir, 'complexity', '-c', os.path.join(tmp_dir, 'missing.yaml')) == 2
    # nothing generated yet
    assert stv(tmp_dir, 'train') == 1
    assert stv(tmp_dir, 'report') == 1
    shutil.rmtree(tmp_dir)


def test_generate_train_eval_report():
    tmp_dir = tempfile.mkdtemp()
    assert stv(tmp_dir, 'generate') == 0
    assert os.path.isdir(os.path.join(tmp_dir, 'data'))

    assert stv(tmp_dir, 'train', '--arch', 'ccm', '--epochs', '1') == 0
    checkpoints = os.path.join(tmp_dir, 'checkpoints')
    assert os.path.isfile(os.path.join(checkpoints, 'ccm.ckpt'))
    report = read_lines(os.path.join(checkpoints, 'ccm.report.txt'))
    assert 'schedule: ccm_pretrain_finetune' in report
    assert any(line.startswith('train.trajectory.rank1_mean: ') for line in report)

    assert stv(tmp_dir, 'eval', '--arch', 'ccm') == 0
    summary = read_eval_report(os.path.join(tmp_dir, 'reports', 'ccm.eval.txt'))
    assert 0.0 <= summary.rank1_mean <= 1.0
    assert len(read_lines(os.path.join(tmp_dir, 'reports', 'ccm.eval.csv'))) == 3

    # no tbe checkpoint to evaluate
    assert stv(tmp_dir, 'eval', '--arch', 'tbe') == 1

    assert stv(tmp_dir, 'train', '--arch', 'cfr', '--epochs', '0') == 0
    assert os.path.isfile(os.path.join(checkpoints, 'cfr.ckpt'))
    assert os.path.isfile(os.path.join(checkpoints, 'cfr_classifier.ckpt'))

    assert stv(tmp_dir, 'report') == 0
    table = read_lines(os.path.join(tmp_dir, 'reports', 'table1.csv'))
    assert table[1].startswith('ccm-desk,%.12g,' % summary.rank1_mean)
    assert table[2].startswith('cfr-desk,,,')
    shutil.rmtree(tmp_dir)


def test_read_eval_report_ignores_malformed():
    tmp_dir = tempfile.mkdtemp()
    path = os.path.join(tmp_dir, 'x.eval.txt')
    assert read_eval_report(path) is None
    with open(path, 'w') as fo:
        fo.write('frame.rank1_mean: high\n')
    assert read_eval_report(path) is None
    shutil.rmtree(tmp_dir)


def main():
    test_version()
    test_cli_overrides()
    test_gradcheck_command()
    test_complexity_command()
    test_invalid_configuration()
    test_generate_train_eval_report()
    test_read_eval_report_ignores_malformed()


if __name__ == '__main__':
    main()
