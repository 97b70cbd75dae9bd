import os
import shutil
import tempfile

import pytest

from stv import config
from stv.exceptions import ConfigError, UnableToParse
from stv.trainer import TrainConfig


def write_config(text):
    tmp_dir = tempfile.mkdtemp()
    path = os.path.join(tmp_dir, 'run.yaml')
    with open(path, 'w') as fo:
        fo.write(text)
    return tmp_dir, path


def test_defaults():
    info = config.load(cli_workdir='work')
    assert info['model.arch'] == 'ccm'
    assert info['data.geometry'] == [48, 40, 1]
    assert info['train.weight_decay'] == 1e-4
    assert info['paths.workdir'] == 'work'
    assert set(info) == set(config.DEFAULTS)


def test_parse_sections():
    tmp_dir, path = write_config("""\
model:
  arch: haarnet
train:
  lr: 1e-3
  stage_epochs:
    trunk: 2
loss:
  tmask_fractions:
    eye_rows: [0.2, 0.4]
""")
    info = config.load(path)
    assert info['model.arch'] == 'haarnet'
    # exponent floats without a dot are read as numbers
    assert info['train.lr'] == 0.001
    assert info['train.stage_epochs'] == {'trunk': 2}
    assert info['loss.tmask_fractions'] == {'eye_rows': [0.2, 0.4]}
    shutil.rmtree(tmp_dir)


def test_empty_file():
    tmp_dir, path = write_config("# nothing configured\n")
    assert config.parse(path) == {}
    shutil.rmtree(tmp_dir)


def test_jinja_template():
    tmp_dir, path = write_config("""\
{% set n = 3 %}
data:
  identities: {{ n }}
""")
    assert config.load(path)['data.identities'] == 3

    with open(path, 'w') as fo:
        fo.write("data:\n  identities: {{ undefined_name }}\n")
    with pytest.raises(UnableToParse):
        config.load(path)
    shutil.rmtree(tmp_dir)


def test_bad_files():
    tmp_dir, path = write_config("- just\n- a list\n")
    with pytest.raises(ConfigError):
        config.load(path)
    with open(path, 'w') as fo:
        fo.write("data: [unclosed\n")
    with pytest.raises(UnableToParse):
        config.load(path)
    shutil.rmtree(tmp_dir)
    with pytest.raises(ConfigError):
        config.load(path)


def test_overrides():
    info = config.load(overrides=[('train.lr', '0.5'), ('model.arch', 'tbe'),
                                  ('paths.checkpoint', '123'),
                                  ('train.stage_epochs', '{trunk: 1}')])
    assert info['train.lr'] == 0.5
    assert info['model.arch'] == 'tbe'
    assert info['paths.checkpoint'] == '123'
    assert info['train.stage_epochs'] == {'trunk': 1}
    with pytest.raises(ConfigError):
        config.apply_overrides({}, [('train.learning_rate', '1')])


def test_verify_errors():
    bad = [
        {'model.arch': 'resnet'},
        {'model.scale': 'huge'},
        {'data.identities': 1},
        {'data.geometry': [8, 8, 1]},
        {'data.geometry': [48, 40]},
        {'train.batch_size': 'many'},
        {'train.sampling': 'random'},
        {'train.lr': True},
        {'eval.fusion': 'median'},
        {'eval.threads': 0},
        {'loss.alpha_triplet': -1.0},
        {'unknown.key': 1},
    ]
    for info in bad:
        with pytest.raises(ConfigError) as exc:
            config.verify(info)
        key = next(iter(info))
        assert exc.value.key in (key, 'loss')


def test_verify_nested_keys():
    with pytest.raises(ConfigError) as exc:
        config.verify({'data.degradations': {'noise_sd': 0.9}})
    assert exc.value.key == 'data.degradations.noise_sd'
    with pytest.raises(ConfigError) as exc:
        config.verify({'model.arch': 'cfr', 'model.overrides': {'hiden': 64}})
    assert exc.value.key == 'model.overrides.hiden'
    # accepted names depend on the architecture
    with pytest.raises(ConfigError):
        config.verify({'model.arch': 'ccm', 'model.overrides': {'n_branches': 2}})

    full = config.verify({'data.degradations': {'noise_std': 0.05},
                          'model.arch': 'tbe', 'model.overrides': {'n_branches': 2}})
    assert config.degradations(full)['noise_std'] == 0.05
    assert full['model.overrides'] == {'n_branches': 2}


def test_environment_workdir():
    old = os.environ.get('STV_WORKDIR')
    os.environ['STV_WORKDIR'] = '/tmp/stv-env'
    try:
        assert config.load()['paths.workdir'] == '/tmp/stv-env'
        assert config.load(cli_workdir='cli')['paths.workdir'] == 'cli'
    finally:
        if old is None:
            del os.environ['STV_WORKDIR']
        else:
            os.environ['STV_WORKDIR'] = old


def test_derived_configs():
    info = config.load(overrides=[('train.epochs', 2), ('train.stage_epochs', {'mdr_tl': 0})])
    cfg = config.train_config(info)
    assert isinstance(cfg, TrainConfig)
    assert cfg.epochs_for('mdr_tl') == 0
    assert cfg.epochs_for('trunk') == 2
    assert cfg.tmask_fractions is None
    assert config.matcher_kind(info, 'ccm') == 'ccm'
    assert config.matcher_kind(info, 'tbe') == 'cosine'
    assert config.degradations(info)['videos_per_identity'] == 4


def test_run_config_sections():
    info = config.load(overrides=[('eval.trials', '3')])
    assert isinstance(info, config.RunConfig)
    ev = info.section('eval')
    assert ev['trials'] == 3
    assert sorted(ev) == ['fusion', 'matcher', 'seed', 'threads', 'trials']
    assert info.loss.alpha_triplet == 0.2
    assert info.train.batch_size == 16
    with pytest.raises(ConfigError):
        info.section('optimizer')


def test_echo_lines():
    lines = config.echo_lines({'model.arch': 'cfr', 'data.geometry': [48, 40, 1]})
    assert lines == ['data.geometry: [48, 40, 1]', 'model.arch: cfr']


def test_generate_doc():
    doc = config.generate_doc()
    for key in config.DEFAULTS:
        assert '### `%s`' % key in doc
    assert doc.index('## `data`') < doc.index('## `paths`')


def main():
    test_defaults()
    test_parse_sections()
    test_empty_file()
    test_jinja_template()
    test_bad_files()
    test_overrides()
    test_verify_errors()
    test_verify_nested_keys()
    test_environment_workdir()
    test_derived_configs()
    test_run_config_sections()
    test_echo_lines()
    test_generate_doc()


if __name__ == '__main__':
    main()
