# (c) 2016 Anaconda, Inc. / https://anaconda.com
# All Rights Reserved
#
# stv is distributed under the terms of the BSD 3-clause license.
# Consult LICENSE.txt or http://opensource.org/licenses/BSD-3-Clause.

from __future__ import absolute_import, division, print_function

import logging
from collections import namedtuple

import numpy as np

from .exceptions import SamplingError

logger = logging.getLogger(__name__)

STRATEGIES = ('uniform', 'hard')
POLICIES = ('hardest', 'semi_hard')
UNIT_NORM_TOL = 1e-6


class Triplet(namedtuple('Triplet', 'still positive negative label negative_label')):
    """A still anchor, a video of the same identity and a video of another one."""
    __slots__ = ()


class TripletBatch(object):

    def __init__(self, triplets):
        self.triplets = list(triplets)
        if not self.triplets:
            raise SamplingError("a triplet batch needs L >= 1")
        for i, t in enumerate(self.triplets):
            if t.label == t.negative_label:
                raise SamplingError("triplet %d: negative has the anchor's label %d"
                                    % (i, t.label))

    def __len__(self):
        return len(self.triplets)

    def __iter__(self):
        return iter(self.triplets)

    @property
    def stills(self):
        return np.stack([t.still for t in self.triplets])

    @property
    def positives(self):
        return np.stack([t.positive for t in self.triplets])

    @property
    def negatives(self):
        return np.stack([t.negative for t in self.triplets])

    @property
    def labels(self):
        return np.array([t.label for t in self.triplets], dtype=np.int64)

    @property
    def negative_labels(self):
        return np.array([t.negative_label for t in self.triplets], dtype=np.int64)


class RoiEmbeddings(namedtuple('RoiEmbeddings', 'stills videos')):
    """Embeddings of a dataset's stills ``[K, d]`` and videos ``[V, d]``, in dataset order."""
    __slots__ = ()


def _video_groups(dataset):
    labels = dataset.video_labels
    return [np.flatnonzero(labels == k) for k in range(dataset.n_identities)]


def _uniform(dataset, L, rng):
    videos = dataset.videos
    groups = _video_groups(dataset)
    k_count = dataset.n_identities
    out = []
    for _ in range(L):
        k = int(rng.integers(k_count))
        other = int(rng.integers(k_count - 1))
        if other >= k:
            other += 1
        p = int(rng.choice(groups[k]))
        n = int(rng.choice(groups[other]))
        out.append(Triplet(dataset.identities[k].still, videos[p], videos[n], k, other))
    return out


def _hard(dataset, L, embeddings, rng):
    stills = np.asarray(embeddings.stills, dtype=np.float64)
    vids = np.asarray(embeddings.videos, dtype=np.float64)
    labels = dataset.video_labels
    if vids.shape[0] != len(labels) or stills.shape[0] != dataset.n_identities:
        raise SamplingError("hard sampling needs embeddings for every still and video ROI "
                            "(got %d stills, %d videos)" % (stills.shape[0], vids.shape[0]))
    videos = dataset.videos
    dist = np.sum((stills[:, None, :] - vids[None, :, :]) ** 2, axis=-1)
    order = rng.permutation(dataset.n_identities)
    out = []
    for i in range(L):
        k = int(order[i % len(order)])
        same = labels == k
        p = int(np.argmax(np.where(same, dist[k], -np.inf)))
        n = int(np.argmin(np.where(same, np.inf, dist[k])))
        out.append(Triplet(dataset.identities[k].still, videos[p], videos[n], k,
                           int(labels[n])))
    return out


def build_triplet_batch(dataset, L, strategy='uniform', embeddings=None, seed=0):
    """
    Assemble ``L`` (still, positive video, negative video) triplets.

    ``uniform`` draws identities and videos uniformly; ``hard`` cycles
    over anchor stills in a seeded order and pairs each with its farthest
    same-identity video and its nearest other-identity video in
    ``embeddings`` (a ``RoiEmbeddings``).
    """
    if dataset.n_identities < 2:
        raise SamplingError("triplets need at least 2 identities")
    if L < 1:
        raise SamplingError("batch size L must be >= 1, got %r" % L)
    rng = np.random.default_rng(seed)
    if strategy == 'uniform':
        triplets = _uniform(dataset, L, rng)
    elif strategy == 'hard':
        if embeddings is None:
            raise SamplingError("hard triplet sampling needs ROI embeddings")
        triplets = _hard(dataset, L, embeddings, rng)
    else:
        raise SamplingError("unknown sampling strategy '%s' (use %s)"
                            % (strategy, ', '.join(STRATEGIES)))
    return TripletBatch(triplets)


def pairwise_sq_distances(emb):
    sq = np.sum(emb * emb, axis=1)
    d = sq[:, None] + sq[None, :] - 2.0 * emb.dot(emb.T)
    return np.maximum(d, 0.0)


def mine_hard_triplets(embeddings, labels, policy='hardest', margin=0.2):
    """
    Mine (anchor, positive, negative) index triples over a labelled set
    of unit-norm embeddings, using squared Euclidean distances.

    hardest
        per anchor, its farthest positive and nearest negative
    semi_hard
        per anchor-positive pair, the nearest negative with
        ``d_ap < d_an < d_ap + margin``; pairs without one are skipped

    Ties resolve to the lowest index.
    """
    emb = np.asarray(getattr(embeddings, 'data', embeddings), dtype=np.float64)
    labels = np.asarray(labels)
    if emb.ndim != 2 or len(labels) != emb.shape[0]:
        raise SamplingError("need [n, d] embeddings with one label each")
    if len(np.unique(labels)) < 2:
        raise SamplingError("hard mining needs at least 2 classes")
    norms = np.linalg.norm(emb, axis=1)
    if np.max(np.abs(norms - 1.0)) > UNIT_NORM_TOL:
        raise SamplingError("hard mining expects unit-norm embeddings")
    if policy not in POLICIES:
        raise SamplingError("unknown mining policy '%s' (use %s)" % (policy, ', '.join(POLICIES)))

    dist = pairwise_sq_distances(emb)
    same = labels[:, None] == labels[None, :]
    n = len(labels)
    out = []
    for a in range(n):
        pos = np.flatnonzero(same[a] & (np.arange(n) != a))
        neg = np.flatnonzero(~same[a])
        if len(pos) == 0:
            continue
        if policy == 'hardest':
            p = pos[np.argmax(dist[a, pos])]
            out.append((a, int(p), int(neg[np.argmin(dist[a, neg])])))
            continue
        for p in pos:
            d_ap = dist[a, p]
            d_an = dist[a, neg]
            ok = (d_an > d_ap) & (d_an < d_ap + margin)
            if np.any(ok):
                cand = neg[ok]
                out.append((a, int(p), int(cand[np.argmin(d_an[ok])])))
    logger.debug("mined %d %s triplets from %d embeddings", len(out), policy, n)
    return out
