# (c) 2016 Anaconda, Inc. / https://anaconda.com
# All Rights Reserved
#
# stv is distributed under the terms of the BSD 3-clause license.
# Consult LICENSE.txt or http://opensource.org/licenses/BSD-3-Clause.
"""
SGD with momentum, stage-wise training and the four training schedules.

A ``Stage`` names the parameter groups it trains (glob patterns over the
``group`` of each layer), the loss it minimizes and how many epochs it
runs.  Every parameter outside the trainable set is frozen for the stage.
"""
from __future__ import absolute_import, division, print_function

import logging
from collections import OrderedDict, namedtuple
from fnmatch import fnmatch
from os.path import join

import numpy as np

from . import data as D
from .exceptions import ConfigError, SamplingError, ShapeError, SpecError, TrainingDivergedError
from .losses import (EmbeddingBatch, LossConfig, ccm_triplet_loss_tensor, haarnet_loss, mdr_tl,
                     softmax_cross_entropy, triplet_loss, weighted_tmask_mse)
from .networks import HAARNET_BRANCHES, ccm_feature_maps, forward_embed
from .sampling import RoiEmbeddings, build_triplet_batch, mine_hard_triplets
from .tensor import Tensor, backward, getitem, no_grad
from .utils import derive_seed, makedirs

logger = logging.getLogger(__name__)

LOSS_KINDS = ('softmax', 'triplet', 'haarnet', 'mdr_tl', 'ccm_triplet', 'tmask_mse',
              'pair_softmax')
SCHEDULES = {
    'haarnet_stagewise': 'haarnet',
    'tbe_stagewise': 'tbe',
    'ccm_pretrain_finetune': 'ccm',
    'cfr_autoencoder_then_classifier': 'cfr',
}
ARCH_SCHEDULES = dict((arch, kind) for kind, arch in SCHEDULES.items())


class TrainConfig(object):
    """
    Optimizer settings, epoch counts and loss selection of one training
    run.  ``stage_epochs`` overrides ``epochs`` for individual stages.
    """

    def __init__(self, lr=0.01, momentum=0.9, weight_decay=1e-4, batch_size=16, epochs=10,
                 stage_epochs=None, seed=0, loss=None, mining_policy='hardest',
                 mining_margin=0.2, sampling='uniform', blur_copies=2,
                 augment_ops=('mirror', 'rotate', 'shear', 'translate'), tmask_fractions=None):
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.batch_size = int(batch_size)
        self.epochs = int(epochs)
        self.stage_epochs = dict(stage_epochs or {})
        self.seed = int(seed)
        self.loss = loss or LossConfig()
        self.mining_policy = mining_policy
        self.mining_margin = float(mining_margin)
        self.sampling = sampling
        self.blur_copies = int(blur_copies)
        self.augment_ops = list(augment_ops)
        self.tmask_fractions = tmask_fractions
        self.validate()

    def validate(self):
        if not self.lr > 0:
            raise ConfigError('train.lr', "must be > 0, got %r" % self.lr)
        if not 0 <= self.momentum < 1:
            raise ConfigError('train.momentum', "must be in [0, 1), got %r" % self.momentum)
        if self.weight_decay < 0:
            raise ConfigError('train.weight_decay', "must be >= 0")
        if self.batch_size < 1:
            raise ConfigError('train.batch_size', "must be >= 1")
        if self.epochs < 0 or any(int(v) < 0 for v in self.stage_epochs.values()):
            raise ConfigError('train.epochs', "epoch counts must be >= 0")
        if self.sampling not in ('uniform', 'hard'):
            raise ConfigError('train.sampling', "must be uniform or hard")
        self.loss.validate()

    def epochs_for(self, stage_name):
        return int(self.stage_epochs.get(stage_name, self.epochs))


class Stage(namedtuple('Stage', 'name trainable loss epochs output net')):
    """
    ``trainable`` holds group glob patterns, ``output`` the network output
    the loss reads (logits role for softmax stages), ``net`` the key of the
    network in the schedule's network map.
    """
    __slots__ = ()

    def __new__(cls, name, trainable, loss, epochs, output=None, net='net'):
        if loss not in LOSS_KINDS:
            raise SpecError("stage %s: unknown loss kind '%s'" % (name, loss))
        return super(Stage, cls).__new__(cls, name, tuple(trainable), loss, int(epochs),
                                         output, net)


class StagePlan(object):

    def __init__(self, stages):
        self.stages = list(stages)

    def __iter__(self):
        return iter(self.stages)

    def __len__(self):
        return len(self.stages)

    def partition(self, stage, net):
        """(trainable, frozen): disjoint name -> Tensor maps covering every parameter."""
        groups = set(l.group for l in net.spec.layers)
        for pat in stage.trainable:
            if not any(fnmatch(g, pat) for g in groups):
                raise SpecError("stage %s: no layer group of %s matches '%s'"
                                % (stage.name, net.spec.name, pat))
        trainable = net.parameters_in_groups(stage.trainable)
        frozen = OrderedDict((k, t) for k, t in net.unique_parameters().items()
                             if k not in trainable)
        return trainable, frozen


StageResult = namedtuple('StageResult', 'name loss epochs trace n_trainable n_frozen')


def sgd_momentum_step(params, grads, state, lr, momentum, weight_decay):
    """
    v <- momentum * v + grad + weight_decay * param; param <- param - lr * v.
    Parameters without a gradient entry get a zero gradient.  Returns the
    updated velocity map.
    """
    for name, p in params.items():
        g = grads.get(name)
        g = np.zeros(p.data.shape) if g is None else np.asarray(g, dtype=np.float64)
        v = state.get(name)
        v = np.zeros(p.data.shape) if v is None else v
        if g.shape != p.data.shape:
            raise ShapeError('sgd_momentum_step', p.data.shape, g.shape, detail=name)
        if v.shape != p.data.shape:
            raise ShapeError('sgd_momentum_step', p.data.shape, v.shape, detail=name)
        v = momentum * v + g + weight_decay * p.data
        p.assign(p.data - lr * v)
        state[name] = v
    return state


class _Run(object):
    """Mutable bookkeeping shared by the stages of one schedule."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.iteration = 0
        self.mined = None


def _batches(n, size, rng):
    order = rng.permutation(n)
    return [order[i:i + size] for i in range(0, n, size)]


def _check_finite(loss, run, stage):
    value = loss.item()
    if not np.isfinite(value):
        raise TrainingDivergedError(run.iteration, stage.loss, value)
    return value


def _finite_logits(logits, run, stage):
    if not np.all(np.isfinite(logits.data)):
        raise TrainingDivergedError(run.iteration, stage.loss, float('nan'))
    return logits


def _step(loss, trainable, velocity, run, stage):
    value = _check_finite(loss, run, stage)
    leaf_grads = backward(loss)
    grads = dict((name, leaf_grads.get(t)) for name, t in trainable.items())
    for t in leaf_grads:
        t.zero_grad()
    cfg = run.cfg
    sgd_momentum_step(trainable, grads, velocity, cfg.lr, cfg.momentum, cfg.weight_decay)
    run.iteration += 1
    return value


def training_pool(dataset, cfg, with_blur=False):
    """Stills and videos (plus blurred still copies) with identity labels."""
    images, labels = dataset.pool()
    if with_blur and cfg.blur_copies:
        extra, extra_labels = [], []
        for ident in dataset.identities:
            seed = derive_seed(cfg.seed, 7919 + ident.id)
            for roi in D.blurred_copies(ident.still, seed, n=cfg.blur_copies):
                extra.append(roi)
                extra_labels.append(ident.id)
        images = np.concatenate([images, np.stack(extra)])
        labels = np.concatenate([labels, np.array(extra_labels, dtype=np.int64)])
    return images, labels.astype(np.int64)


def _softmax_epoch(net, stage, pool, trainable, velocity, run, rng):
    images, labels = pool
    losses = []
    for idx in _batches(len(labels), run.cfg.batch_size, rng):
        logits = net.forward({'x': Tensor(images[idx])}, [stage.output])[stage.output]
        _finite_logits(logits, run, stage)
        losses.append(_step(softmax_cross_entropy(logits, labels[idx]), trainable, velocity,
                            run, stage))
    return losses


def _pool_embeddings(net, images):
    with no_grad():
        return forward_embed(net, Tensor(images)).numpy()


def _embedding_loss(kind, triplets, batch, cfg):
    if kind == 'haarnet':
        return haarnet_loss(triplets, batch, cfg)
    if kind == 'mdr_tl':
        return mdr_tl(triplets, batch, cfg)
    return triplet_loss(triplets, batch, cfg)


def _triplet_epoch(net, stage, pool, trainable, velocity, run, rng):
    images, labels = pool
    cfg = run.cfg
    emb = _pool_embeddings(net, images)
    mined = mine_hard_triplets(emb, labels, cfg.mining_policy, cfg.mining_margin)
    run.mined = mined
    logger.info("%s: %d %s triplets mined", stage.name, len(mined), cfg.mining_policy)
    if not mined:
        return [0.0]
    mined = np.array(mined, dtype=np.int64)
    losses = []
    for chunk in _batches(len(mined), cfg.batch_size, rng):
        trip = mined[np.sort(chunk)]
        members, local = np.unique(trip, return_inverse=True)
        out = net.forward({'x': Tensor(images[members])}, ['embedding'])['embedding']
        batch = EmbeddingBatch(out, labels[members])
        loss = _embedding_loss(stage.loss, local.reshape(trip.shape), batch, cfg.loss)
        losses.append(_step(loss, trainable, velocity, run, stage))
    return losses


def _ccm_scores(net, stills, positives, negatives):
    out = net.forward({'t': Tensor(stills), 'p': Tensor(positives), 'n': Tensor(negatives)},
                      ['s_tp', 's_tn', 's_np'])
    return [getitem(out[k], (slice(None), 0)) for k in ('s_tp', 's_tn', 's_np')]


def ccm_roi_embeddings(net, dataset):
    """L2-normalized flattened branch maps, for hard triplet sampling with a CCM network."""
    def embed(rois):
        with no_grad():
            m = ccm_feature_maps(net, Tensor(rois)).numpy()
        flat = m.reshape(len(m), -1)
        return flat / np.maximum(np.linalg.norm(flat, axis=1, keepdims=True), 1e-12)
    return RoiEmbeddings(embed(dataset.stills), embed(dataset.videos))


def augmented_stills(dataset, cfg, epoch):
    """One augmented copy of every still per op, per epoch."""
    out = []
    for ident in dataset.identities:
        seed = derive_seed(derive_seed(cfg.seed, epoch + 1), ident.id)
        out.append(D.augment_still(ident.still, cfg.augment_ops, seed))
    return out


def _ccm_epoch(net, stage, dataset, trainable, velocity, run, rng, epoch):
    cfg = run.cfg
    n_batches = max(1, len(dataset.video_labels) // cfg.batch_size)
    losses = []
    if stage.name == 'finetune':
        aug = augmented_stills(dataset, cfg, epoch)
        k = dataset.n_identities
        stills, positives, negatives = [], [], []
        for _ in range(n_batches * cfg.batch_size):
            a = int(rng.integers(k))
            other = int(rng.integers(k - 1))
            other += other >= a
            stills.append(dataset.identities[a].still)
            positives.append(aug[a][int(rng.integers(len(aug[a])))])
            negatives.append(aug[other][int(rng.integers(len(aug[other])))])
        stills, positives, negatives = np.stack(stills), np.stack(positives), np.stack(negatives)
        for idx in _batches(len(stills), cfg.batch_size, rng):
            scores = _ccm_scores(net, stills[idx], positives[idx], negatives[idx])
            losses.append(_step(ccm_triplet_loss_tensor(*scores), trainable, velocity, run,
                                stage))
        return losses
    embeddings = ccm_roi_embeddings(net, dataset) if cfg.sampling == 'hard' else None
    for b in range(n_batches):
        batch = build_triplet_batch(dataset, cfg.batch_size, cfg.sampling, embeddings,
                                    seed=derive_seed(cfg.seed, (epoch << 12) + b))
        scores = _ccm_scores(net, batch.stills, batch.positives, batch.negatives)
        losses.append(_step(ccm_triplet_loss_tensor(*scores), trainable, velocity, run, stage))
    return losses


def _tmask_epoch(net, stage, dataset, trainable, velocity, run, rng, mask):
    videos = dataset.videos
    targets = dataset.stills[dataset.video_labels]
    losses = []
    for idx in _batches(len(videos), run.cfg.batch_size, rng):
        recon = net.forward({'x': Tensor(videos[idx])}, ['reconstruction'])['reconstruction']
        losses.append(_step(weighted_tmask_mse(recon, Tensor(targets[idx]), mask), trainable,
                            velocity, run, stage))
    return losses


def balanced_pairs(dataset, encoder, seed):
    """
    One matching and one non-matching (still, video) embedding pair per
    video ROI; label 0 is "match".
    """
    if encoder is None:
        raise SpecError("pair classifier training needs the trained autoencoder")
    stills = _pool_embeddings(encoder, dataset.stills)
    videos = _pool_embeddings(encoder, dataset.videos)
    labels = dataset.video_labels
    rng = np.random.default_rng(seed)
    k = dataset.n_identities
    s_rows, v_rows, y = [], [], []
    for v, lab in enumerate(labels):
        other = int(rng.integers(k - 1))
        other += other >= lab
        s_rows += [lab, other]
        v_rows += [v, v]
        y += [0, 1]
    return stills[s_rows], videos[v_rows], np.array(y, dtype=np.int64)


def _pair_epoch(net, stage, pairs, trainable, velocity, run, rng):
    stills, videos, y = pairs
    losses = []
    for idx in _batches(len(y), run.cfg.batch_size, rng):
        logits = net.forward({'still': Tensor(stills[idx]), 'video': Tensor(videos[idx])},
                             ['logits'])['logits']
        _finite_logits(logits, run, stage)
        losses.append(_step(softmax_cross_entropy(logits, y[idx]), trainable, velocity, run,
                            stage))
    return losses


def run_stage(net, dataset, stage, cfg, plan=None, run=None, encoder=None, index=0):
    """
    Train the stage's parameter groups for ``stage.epochs`` epochs and
    return a ``StageResult`` with the mean loss of every epoch.
    """
    plan = plan or StagePlan([stage])
    run = run or _Run(cfg)
    trainable, frozen = plan.partition(stage, net)
    rng = np.random.default_rng(derive_seed(cfg.seed, index + 1))
    net.context.reseed(derive_seed(cfg.seed, 1000 + index))
    net.train()
    logger.info("stage %s: %s loss, %d epochs, %d trainable / %d frozen tensors",
                stage.name, stage.loss, stage.epochs, len(trainable), len(frozen))
    velocity = {}
    trace = []
    pool = pairs = mask = None
    if stage.loss in ('softmax', 'triplet', 'haarnet', 'mdr_tl'):
        pool = training_pool(dataset, cfg, with_blur=net.spec.arch == 'tbe')
    elif stage.loss == 'pair_softmax':
        pairs = balanced_pairs(dataset, encoder, derive_seed(cfg.seed, 31 + index))
    elif stage.loss == 'tmask_mse':
        mask = D.make_tmask(dataset.geometry.rows, dataset.geometry.cols, cfg.tmask_fractions,
                            cfg.loss)
    for epoch in range(stage.epochs):
        if stage.loss == 'softmax':
            losses = _softmax_epoch(net, stage, pool, trainable, velocity, run, rng)
        elif stage.loss in ('triplet', 'haarnet', 'mdr_tl'):
            losses = _triplet_epoch(net, stage, pool, trainable, velocity, run, rng)
        elif stage.loss == 'ccm_triplet':
            losses = _ccm_epoch(net, stage, dataset, trainable, velocity, run, rng, epoch)
        elif stage.loss == 'tmask_mse':
            losses = _tmask_epoch(net, stage, dataset, trainable, velocity, run, rng, mask)
        else:
            losses = _pair_epoch(net, stage, pairs, trainable, velocity, run, rng)
        trace.append(float(np.mean(losses)))
        logger.info("stage %s epoch %d/%d: loss %.6f", stage.name, epoch + 1, stage.epochs,
                    trace[-1])
    net.eval()
    return StageResult(stage.name, stage.loss, stage.epochs, trace, len(trainable), len(frozen))


def schedule_plan(kind, cfg):
    """The ordered stages of one schedule kind."""
    e = cfg.epochs_for
    if kind == 'haarnet_stagewise':
        stages = [Stage('trunk', ['shared', 'trunk', 'aux.trunk'], 'softmax', e('trunk'),
                        'logits.trunk')]
        for group, _, _ in HAARNET_BRANCHES:
            stages.append(Stage(group, [group, 'aux.' + group], 'softmax', e(group),
                                'logits.' + group))
        stages.append(Stage('finetune', ['*'], 'softmax', e('finetune'), 'logits.full'))
        stages.append(Stage('triplet', ['shared', 'trunk', 'branch*', 'head'], 'haarnet',
                            e('triplet'), 'embedding'))
    elif kind == 'tbe_stagewise':
        stages = [Stage('trunk', ['shared', 'trunk', 'aux.trunk'], 'softmax', e('trunk'),
                        'logits.trunk'),
                  Stage('branches', ['branch*', 'aux.branch*'], 'softmax', e('branches'),
                        None),
                  Stage('finetune', ['*'], 'softmax', e('finetune'), 'logits.full'),
                  Stage('mdr_tl', ['shared', 'trunk', 'branch*', 'head'], 'mdr_tl',
                        e('mdr_tl'), 'embedding')]
    elif kind == 'ccm_pretrain_finetune':
        stages = [Stage('pretrain', ['*'], 'ccm_triplet', e('pretrain'), 'match'),
                  Stage('finetune', ['*'], 'ccm_triplet', e('finetune'), 'match')]
    elif kind == 'cfr_autoencoder_then_classifier':
        stages = [Stage('autoencoder', ['*'], 'tmask_mse', e('autoencoder'), 'reconstruction',
                        net='autoencoder'),
                  Stage('classifier', ['*'], 'pair_softmax', e('classifier'), 'logits',
                        net='classifier')]
    else:
        raise SpecError("unknown schedule '%s' (use %s)" % (kind, ', '.join(sorted(SCHEDULES))))
    return StagePlan(stages)


def _expand(stage, net):
    # the TBE branch stage trains every branch separately against its own aux head
    if stage.output is not None:
        return [stage]
    out = []
    for role in net.spec.outputs:
        if role.startswith('logits.branch'):
            group = role[len('logits.'):]
            out.append(Stage(group, [group, 'aux.' + group], stage.loss, stage.epochs, role,
                             stage.net))
    return out


ScheduleResult = namedtuple('ScheduleResult', 'kind nets stages iterations mined')


def run_schedule(kind, nets, dataset, cfg):
    """
    Run every stage of ``kind`` in order on ``nets`` (role -> Network;
    ``net`` for single-network schedules, ``autoencoder`` and
    ``classifier`` for CFR).
    """
    arch = SCHEDULES.get(kind)
    if arch is None:
        raise SpecError("unknown schedule '%s' (use %s)" % (kind, ', '.join(sorted(SCHEDULES))))
    if not isinstance(nets, dict):
        nets = {'net': nets}
    main = nets.get('autoencoder' if arch == 'cfr' else 'net')
    if main is None or main.spec.arch != arch:
        raise SpecError("schedule %s needs a %s network, got %s"
                        % (kind, arch, main.spec.arch if main is not None else 'none'))
    if arch == 'cfr' and 'classifier' not in nets:
        raise SpecError("schedule %s needs a classifier network" % kind)
    if dataset.n_identities < 2:
        raise SamplingError("training needs at least 2 identities")
    plan = schedule_plan(kind, cfg)
    run = _Run(cfg)
    results = []
    index = 0
    for planned in plan:
        net = nets[planned.net]
        for stage in _expand(planned, net):
            results.append(run_stage(net, dataset, stage, cfg, plan, run,
                                     encoder=nets.get('autoencoder'), index=index))
            index += 1
    return ScheduleResult(kind, nets, results, run.iteration,
                          len(run.mined) if run.mined is not None else None)


def write_run_report(directory, name, result, fields=None):
    """
    ``<name>.report.txt`` holds ``key: value`` lines, ``<name>.trace.csv``
    the per-epoch losses of every stage.
    """
    makedirs(directory)
    lines = OrderedDict()
    lines['schedule'] = result.kind
    lines['iterations'] = result.iterations
    if result.mined is not None:
        lines['mined_triplets'] = result.mined
    for st in result.stages:
        lines['stage.%s.loss' % st.name] = st.loss
        lines['stage.%s.epochs' % st.name] = st.epochs
        lines['stage.%s.final_loss' % st.name] = st.trace[-1] if st.trace else ''
    for key, value in (fields or {}).items():
        lines[key] = value
    report = join(directory, name + '.report.txt')
    with open(report, 'w') as fo:
        for key, value in lines.items():
            fo.write('%s: %s\n' % (key, value))
    trace = join(directory, name + '.trace.csv')
    with open(trace, 'w') as fo:
        fo.write('stage,loss_kind,epoch,loss\n')
        for st in result.stages:
            for epoch, value in enumerate(st.trace, 1):
                fo.write('%s,%s,%d,%.12g\n' % (st.name, st.loss, epoch, value))
    return report, trace
