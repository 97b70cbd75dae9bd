import os
import shutil
import tempfile

import numpy as np
import pytest

from stv.data import generate_synthetic_dataset
from stv.exceptions import ConfigError, ShapeError, SpecError, TrainingDivergedError
from stv.networks import Network, build_spec, build_tbe_lite
from stv.tensor import Tensor
from stv.trainer import (ARCH_SCHEDULES, Stage, StagePlan, TrainConfig, balanced_pairs,
                         run_schedule, run_stage, schedule_plan, sgd_momentum_step,
                         training_pool, write_run_report)


def tiny_dataset():
    return generate_synthetic_dataset(5, 3, degradations={'videos_per_identity': 2})


def tiny_config(**kwargs):
    kwargs.setdefault('epochs', 1)
    kwargs.setdefault('batch_size', 4)
    kwargs.setdefault('blur_copies', 1)
    kwargs.setdefault('augment_ops', ['mirror'])
    return TrainConfig(**kwargs)


def networks_for(arch, n_classes=3):
    if arch == 'cfr':
        return {'autoencoder': Network(build_spec('cfr'), 0),
                'classifier': Network(build_spec('cfr_classifier'), 1)}
    overrides = {'n_classes': n_classes} if arch in ('tbe', 'haarnet') else {}
    return {'net': Network(build_spec(arch, **overrides), 0)}


def test_sgd_momentum_step():
    w = Tensor([1.0, 2.0], requires_grad=True)
    b = Tensor([4.0], requires_grad=True)
    params = {'w': w, 'b': b}
    state = sgd_momentum_step(params, {'w': [1.0, 1.0]}, {}, 0.1, 0.9, 0.0)
    assert np.allclose(w.numpy(), [0.9, 1.9])
    assert np.allclose(state['w'], [1.0, 1.0])
    # no gradient: only momentum and decay move the parameter
    assert np.allclose(b.numpy(), [4.0])
    sgd_momentum_step(params, {'w': [1.0, 1.0]}, state, 0.1, 0.9, 0.0)
    assert np.allclose(w.numpy(), [0.71, 1.71])

    decay = {'b': Tensor([2.0], requires_grad=True)}
    sgd_momentum_step(decay, {}, {}, 0.5, 0.0, 0.5)
    assert np.allclose(decay['b'].numpy(), [1.5])

    with pytest.raises(ShapeError):
        sgd_momentum_step(params, {'w': [1.0, 1.0, 1.0]}, {}, 0.1, 0.9, 0.0)


def test_train_config_validation():
    cfg = TrainConfig(epochs=3, stage_epochs={'trunk': 1})
    assert cfg.epochs_for('trunk') == 1
    assert cfg.epochs_for('finetune') == 3
    for bad in ({'lr': 0}, {'momentum': 1.0}, {'weight_decay': -1}, {'batch_size': 0},
                {'epochs': -1}, {'stage_epochs': {'trunk': -2}}, {'sampling': 'random'}):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)


def test_schedule_plans():
    cfg = tiny_config()
    names = [s.name for s in schedule_plan('tbe_stagewise', cfg)]
    assert names == ['trunk', 'branches', 'finetune', 'mdr_tl']
    haar = list(schedule_plan('haarnet_stagewise', cfg))
    assert haar[0].name == 'trunk' and haar[-1].loss == 'haarnet'
    cfr = list(schedule_plan('cfr_autoencoder_then_classifier', cfg))
    assert [s.net for s in cfr] == ['autoencoder', 'classifier']
    assert sorted(ARCH_SCHEDULES) == ['ccm', 'cfr', 'haarnet', 'tbe']
    with pytest.raises(SpecError):
        schedule_plan('alternating', cfg)
    with pytest.raises(SpecError):
        Stage('x', ['*'], 'hinge', 1)


def test_partition_is_disjoint_and_complete():
    net = build_tbe_lite(seed=0, n_classes=3)
    stage = Stage('trunk', ['shared', 'trunk', 'aux.trunk'], 'softmax', 1, 'logits.trunk')
    trainable, frozen = StagePlan([stage]).partition(stage, net)
    assert trainable and frozen
    assert not set(trainable) & set(frozen)
    assert set(trainable) | set(frozen) == set(net.unique_parameters())
    with pytest.raises(SpecError):
        StagePlan([]).partition(Stage('bad', ['nowhere*'], 'softmax', 1), net)


def test_frozen_parameters_do_not_move():
    ds = tiny_dataset()
    net = build_tbe_lite(seed=0, n_classes=3)
    stage = Stage('trunk', ['shared', 'trunk', 'aux.trunk'], 'softmax', 2, 'logits.trunk')
    trainable, frozen = StagePlan([stage]).partition(stage, net)
    before = dict((k, t.numpy().copy()) for k, t in net.unique_parameters().items())
    result = run_stage(net, ds, stage, tiny_config())
    assert len(result.trace) == 2
    assert result.n_trainable == len(trainable)
    for name in frozen:
        assert np.array_equal(net.unique_parameters()[name].numpy(), before[name])
    assert any(not np.array_equal(net.unique_parameters()[name].numpy(), before[name])
               for name in trainable)


def test_divergence_aborts():
    net = build_tbe_lite(seed=0, n_classes=3)
    name = next(k for k in net.unique_parameters() if k.startswith('aux.trunk'))
    param = net.unique_parameters()[name]
    param.assign(np.full(param.data.shape, np.nan))
    stage = Stage('trunk', ['shared', 'trunk', 'aux.trunk'], 'softmax', 1, 'logits.trunk')
    with pytest.raises(TrainingDivergedError) as exc:
        run_stage(net, tiny_dataset(), stage, tiny_config())
    assert exc.value.iteration == 0
    assert exc.value.loss_kind == 'softmax'


def test_training_pool_adds_blurred_stills():
    ds = tiny_dataset()
    cfg = tiny_config(blur_copies=2)
    images, labels = training_pool(ds, cfg)
    assert len(images) == 9
    images, labels = training_pool(ds, cfg, with_blur=True)
    assert len(images) == len(labels) == 9 + 3 * 2
    assert labels[-2:].tolist() == [2, 2]


def test_balanced_pairs():
    ds = tiny_dataset()
    auto = Network(build_spec('cfr'), 0)
    stills, videos, y = balanced_pairs(ds, auto, 3)
    assert len(y) == 2 * len(ds.video_labels)
    assert y.tolist()[:4] == [0, 1, 0, 1]
    assert stills.shape == videos.shape
    with pytest.raises(SpecError):
        balanced_pairs(ds, None, 3)


def test_every_schedule_runs():
    ds = tiny_dataset()
    cfg = tiny_config()
    for arch, kind in sorted(ARCH_SCHEDULES.items()):
        result = run_schedule(kind, networks_for(arch), ds, cfg)
        assert result.kind == kind
        assert result.iterations > 0
        for st in result.stages:
            assert len(st.trace) == 1
            assert np.isfinite(st.trace[0])
        if arch in ('tbe', 'haarnet'):
            assert result.mined is not None


def test_schedule_rejects_wrong_networks():
    ds = tiny_dataset()
    cfg = tiny_config()
    with pytest.raises(SpecError):
        run_schedule('tbe_stagewise', networks_for('ccm'), ds, cfg)
    with pytest.raises(SpecError):
        run_schedule('cfr_autoencoder_then_classifier',
                     {'autoencoder': Network(build_spec('cfr'), 0)}, ds, cfg)
    with pytest.raises(SpecError):
        run_schedule('unknown', networks_for('ccm'), ds, cfg)


def test_write_run_report():
    tmp_dir = tempfile.mkdtemp()
    ds = tiny_dataset()
    result = run_schedule('ccm_pretrain_finetune', networks_for('ccm'), ds, tiny_config())
    report, trace = write_run_report(os.path.join(tmp_dir, 'out'), 'ccm', result,
                                     {'model.arch': 'ccm'})
    with open(report) as fi:
        text = fi.read()
    assert 'schedule: ccm_pretrain_finetune\n' in text
    assert 'stage.pretrain.loss: ccm_triplet\n' in text
    assert text.endswith('model.arch: ccm\n')
    with open(trace) as fi:
        rows = fi.read().splitlines()
    assert rows[0] == 'stage,loss_kind,epoch,loss'
    assert [r.split(',')[0] for r in rows[1:]] == ['pretrain', 'finetune']
    shutil.rmtree(tmp_dir)


def main():
    test_sgd_momentum_step()
    test_train_config_validation()
    test_schedule_plans()
    test_partition_is_disjoint_and_complete()
    test_frozen_parameters_do_not_move()
    test_divergence_aborts()
    test_training_pool_adds_blurred_stills()
    test_balanced_pairs()
    test_every_schedule_runs()
    test_schedule_rejects_wrong_networks()
    test_write_run_report()


if __name__ == '__main__':
    main()
