# (c) 2016 Anaconda, Inc. / https://anaconda.com
# All Rights Reserved
#
# stv is distributed under the terms of the BSD 3-clause license.
# Consult LICENSE.txt or http://opensource.org/licenses/BSD-3-Clause.
"""
Still-to-video rank-1 evaluation.  Every probe is scored against every
gallery still; the highest score wins and ties go to the lowest gallery
index.  Dispersion comes from repeated trials on 80% probe subsets.
"""
from __future__ import absolute_import, division, print_function

import logging
from collections import OrderedDict, namedtuple
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .exceptions import EvaluationError
from .networks import ccm_feature_maps, ccm_match, complexity_of, forward_embed
from .tensor import Tensor, no_grad
from .utils import derive_seed

logger = logging.getLogger(__name__)

RESAMPLE_FRACTION = 0.8
FUSION_POLICIES = ('mean', 'max')
CSV_COLUMNS = ('system', 'rank1_mean', 'rank1_std', 'n_ops', 'n_params', 'n_layers')

# full-scale systems as published; not reproducible here, shown for context
PUBLISHED = (
    ('CCM-CNN', 0.8953, 0.009, 33.3e6, 2.4e6, 30),
    ('TBE-CNN', 0.9061, 0.006, 12.8e9, 46.4e6, 144),
    ('HaarNet', 0.9140, 0.010, 3.5e9, 13.1e6, 56),
    ('CFR-CNN', 0.8729, 0.009, 3.75e6, 1.2e6, 7),
)


class Gallery(object):
    """
    Reference stills, one per identity.  ``entries`` is ``[K, d]`` for
    embeddings or ``[K, C, H, W]`` for CCM feature maps.
    """

    def __init__(self, ids, entries, kind='embedding'):
        self.ids = [int(i) for i in ids]
        self.entries = np.asarray(entries, dtype=np.float64)
        self.kind = kind
        if kind not in ('embedding', 'feature_map', 'image'):
            raise EvaluationError("unknown gallery kind '%s'" % kind)
        if len(set(self.ids)) != len(self.ids):
            raise EvaluationError("gallery ids must be unique")
        if len(self.ids) != len(self.entries):
            raise EvaluationError("%d gallery ids for %d entries"
                                  % (len(self.ids), len(self.entries)))
        if kind == 'embedding' and self.entries.ndim != 2:
            raise EvaluationError("embedding gallery entries must be [K, d]")
        self._index = dict((k, i) for i, k in enumerate(self.ids))

    def __len__(self):
        return len(self.ids)

    def index_of(self, identity):
        try:
            return self._index[int(identity)]
        except KeyError:
            raise EvaluationError("probe identity %r is not in the gallery" % identity)


class Trajectory(namedtuple('Trajectory', 'rois true_id')):
    """Representations of one tracked individual, in temporal order."""
    __slots__ = ()

    def __new__(cls, rois, true_id):
        rois = list(rois)
        if not rois:
            raise EvaluationError("a trajectory needs at least one ROI")
        return super(Trajectory, cls).__new__(cls, rois, int(true_id))


class EvalReport(namedtuple('EvalReport', 'rank1_mean rank1_std n_trials n_probes confusion '
                                          'trial_scores')):
    """
    ``confusion[i, j]`` counts probes of gallery index ``i`` predicted as
    gallery index ``j`` over the full probe set.
    """
    __slots__ = ()

    def as_lines(self, prefix=''):
        return ['%srank1_mean: %.6f' % (prefix, self.rank1_mean),
                '%srank1_std: %.6f' % (prefix, self.rank1_std),
                '%sn_trials: %d' % (prefix, self.n_trials),
                '%sn_probes: %d' % (prefix, self.n_probes)]

    def same_as(self, other):
        return (self.rank1_mean == other.rank1_mean and self.rank1_std == other.rank1_std and
                self.n_trials == other.n_trials and
                np.array_equal(self.confusion, other.confusion) and
                list(self.trial_scores) == list(other.trial_scores))


# ----- matchers: callables (gallery, probe representation) -> [K] scores

def cosine_matcher(gallery, probe):
    g = gallery.entries
    p = np.asarray(probe, dtype=np.float64).ravel()
    norms = np.linalg.norm(g, axis=1) * np.linalg.norm(p)
    return g.dot(p) / np.maximum(norms, 1e-12)


class CcmMatcher(object):
    """Match probability of the CCM head for the (still map, probe map) pair."""

    def __init__(self, net):
        self.net = net
        # eval mode for the lifetime of the matcher
        net.eval()

    def __call__(self, gallery, probe):
        probe = np.asarray(probe, dtype=np.float64)
        tiled = np.repeat(probe[None], len(gallery), axis=0)
        with no_grad():
            match, _ = ccm_match(Tensor(gallery.entries), Tensor(tiled), self.net)
        return match.numpy().copy()


def make_matcher(kind, net=None):
    if kind == 'cosine':
        return cosine_matcher
    if kind == 'ccm':
        if net is None or net.spec.arch != 'ccm':
            raise EvaluationError("the ccm matcher needs a CCM network")
        return CcmMatcher(net)
    raise EvaluationError("unknown matcher '%s' (use cosine or ccm)" % kind)


def accumulate_trajectory(scores, policy='mean'):
    """Element-wise mean or max of per-frame score vectors."""
    if policy not in FUSION_POLICIES:
        raise EvaluationError("unknown fusion policy '%s'" % policy)
    scores = [np.asarray(s, dtype=np.float64) for s in scores]
    if not scores:
        raise EvaluationError("cannot fuse an empty trajectory")
    if any(s.shape != scores[0].shape or s.ndim != 1 for s in scores):
        raise EvaluationError("ragged score vectors: %s" % [s.shape for s in scores])
    stack = np.stack(scores)
    return stack.mean(axis=0) if policy == 'mean' else stack.max(axis=0)


def _probe_scores(gallery, probe, matcher, fusion):
    if isinstance(probe, Trajectory):
        return accumulate_trajectory([matcher(gallery, r) for r in probe.rois], fusion)
    return np.asarray(matcher(gallery, probe[0]), dtype=np.float64)


def _true_id(probe):
    return probe.true_id if isinstance(probe, Trajectory) else probe[1]


def score_probes(gallery, probes, matcher, fusion='mean', threads=1):
    """``[n_probes, K]`` score matrix; threaded scoring is merged by probe index."""
    def score(probe):
        s = _probe_scores(gallery, probe, matcher, fusion)
        if s.shape != (len(gallery),):
            raise EvaluationError("matcher returned %s scores for a gallery of %d"
                                  % (s.shape, len(gallery)))
        return s

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(score, probes))
    else:
        rows = [score(p) for p in probes]
    return np.stack(rows)


def rank1_from_scores(scores, truth, trials=1, seed=0):
    """
    Rank-1 accuracy of a score matrix against true gallery indices,
    as (mean, population std, per-trial accuracies, confusion).
    """
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.int64)
    n, k = scores.shape
    # np.argmax returns the first maximum: ties go to the lowest gallery index
    pred = np.argmax(scores, axis=1)
    correct = pred == truth
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (truth, pred), 1)
    m = max(1, int(np.floor(RESAMPLE_FRACTION * n + 0.5)))
    accs = []
    for t in range(trials):
        rng = np.random.default_rng(derive_seed(seed, t))
        subset = rng.choice(n, size=m, replace=False)
        accs.append(float(np.mean(correct[subset])))
    return float(np.mean(accs)), float(np.std(accs)), accs, confusion


def rank1_eval(gallery, probes, matcher, trials=1, seed=0, fusion='mean', threads=1):
    """
    ``probes`` is a list of ``(representation, true_id)`` pairs or of
    ``Trajectory`` objects, whose frame scores are fused with
    ``accumulate_trajectory`` before the argmax.
    """
    if len(gallery) < 2:
        raise EvaluationError("the gallery needs at least 2 identities")
    probes = list(probes)
    if not probes:
        raise EvaluationError("no probes to evaluate")
    if trials < 1:
        raise EvaluationError("trials must be >= 1")
    truth = [gallery.index_of(_true_id(p)) for p in probes]
    scores = score_probes(gallery, probes, matcher, fusion, threads)
    mean, std, accs, confusion = rank1_from_scores(scores, truth, trials, seed)
    logger.info("rank-1 %.4f +- %.4f over %d trials of %d probes", mean, std, trials,
                len(probes))
    return EvalReport(mean, std, trials, len(probes), confusion, accs)


# ----- gallery / probe construction from a dataset

def representations(net, rois, role='p'):
    """Embeddings (cosine matching) or CCM branch maps of a batch of ROIs."""
    rois = np.asarray(rois, dtype=np.float64)
    with no_grad():
        if net.spec.arch == 'ccm':
            return ccm_feature_maps(net, Tensor(rois), role).numpy()
        return forward_embed(net, Tensor(rois)).numpy()


def build_gallery(net, dataset):
    kind = 'feature_map' if net.spec.arch == 'ccm' else 'embedding'
    return Gallery(range(dataset.n_identities), representations(net, dataset.stills, 't'), kind)


def build_probes(net, dataset, trajectories=False):
    reps = representations(net, dataset.videos, 'p')
    labels = dataset.video_labels
    if not trajectories:
        return [(r, int(k)) for r, k in zip(reps, labels)]
    return [Trajectory([reps[i] for i in np.flatnonzero(labels == k)], k)
            for k in range(dataset.n_identities)]


def evaluate_network(net, dataset, matcher='cosine', trials=5, seed=0, fusion='mean',
                     threads=1):
    """Per-frame and trajectory-fused rank-1 reports of ``net`` on ``dataset``."""
    m = make_matcher(matcher, net)
    gallery = build_gallery(net, dataset)
    frames = rank1_eval(gallery, build_probes(net, dataset), m, trials, seed, fusion, threads)
    tracks = rank1_eval(gallery, build_probes(net, dataset, trajectories=True), m, trials,
                        seed, fusion, threads)
    return OrderedDict([('frame', frames), ('trajectory', tracks)])


# ----- comparison table

def _human(n):
    for unit, size in (('B', 1e9), ('M', 1e6), ('K', 1e3)):
        if n >= size:
            return '%.3g%s' % (n / size, unit)
    return '%d' % n


def table1_rows(nets, names=None, evals=None):
    names = names or [net.spec.name for net in nets]
    evals = evals or {}
    rows = []
    for name, net in zip(names, nets):
        c = complexity_of(net)
        ev = evals.get(name)
        rows.append((name, ev.rank1_mean if ev else None, ev.rank1_std if ev else None,
                     c.n_operations, c.n_parameters, c.n_layers))
    for row in PUBLISHED:
        rows.append(('published: ' + row[0],) + row[1:])
    return rows


def table1_report(nets, names=None, evals=None):
    """
    Aligned text table and CSV comparing the complexity (and, where
    given, rank-1) of ``nets`` with the published full-scale systems.
    """
    rows = table1_rows(nets, names, evals)

    def fmt(v, human=False):
        if v is None:
            return '-'
        if human:
            return _human(v)
        return '%.4f' % v if isinstance(v, float) else str(v)

    cells = [list(CSV_COLUMNS)]
    for r in rows:
        cells.append([r[0], fmt(r[1]), fmt(r[2]), fmt(r[3], True), fmt(r[4], True), str(r[5])])
    widths = [max(len(c[i]) for c in cells) for i in range(len(CSV_COLUMNS))]
    text = '\n'.join('  '.join(c.ljust(w) if i == 0 else c.rjust(w)
                               for i, (c, w) in enumerate(zip(row, widths))).rstrip()
                     for row in cells) + '\n'
    csv_lines = [','.join(CSV_COLUMNS)]
    for r in rows:
        csv_lines.append(','.join('' if v is None else ('%.12g' % v if isinstance(v, float)
                                                        else str(v)) for v in r))
    return text, '\n'.join(csv_lines) + '\n'
