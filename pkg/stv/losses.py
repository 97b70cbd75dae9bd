# (c) 2016 Anaconda, Inc. / https://anaconda.com
# All Rights Reserved
#
# stv is distributed under the terms of the BSD 3-clause license.
# Consult LICENSE.txt or http://opensource.org/licenses/BSD-3-Clause.

"""
Loss functions on unit-norm embeddings, CCM similarity scores and
reconstructions.

Class statistics (means, spreads) are computed with constant averaging
matrices, so every loss is a composition of recorded tensor ops and the
gradient comes from ``backward``.  ``std_dev_loss_grad_analytic`` computes
the standard-deviation gradient in closed form as an independent check.
"""
from __future__ import absolute_import, division, print_function

from collections import namedtuple

import numpy as np

from .exceptions import LossConfigError, LossInputError, ShapeError, SingularGradientError
from .tensor import (DTYPE, Tensor, add, getitem, hinge_clamp, matmul, record, reshape,
                     scale, shift, sqrt, square, sub, tensor_mean, tensor_sum)

UNIT_NORM_TOL = 1e-6
SINGULAR_SIGMA = 1e-12


class LossConfig(namedtuple('LossConfig', [
        'alpha_triplet', 'beta_mean', 'gamma_std', 'delta1', 'delta2', 'delta3',
        'tmask_alpha', 'tmask_beta'])):
    """
    Margins and weights of every loss.  ``alpha_triplet``/``beta_mean``/
    ``gamma_std`` are the triplet, mean-distance and standard-deviation
    margins; ``delta1..3`` weight the three terms of the composite loss;
    ``tmask_alpha``/``tmask_beta`` weight reconstruction pixels inside and
    outside the T region.
    """
    __slots__ = ()

    def __new__(cls, alpha_triplet=0.2, beta_mean=0.5, gamma_std=0.2, delta1=1.0,
                delta2=0.5, delta3=0.25, tmask_alpha=1.0, tmask_beta=0.25):
        self = super(LossConfig, cls).__new__(
            cls, float(alpha_triplet), float(beta_mean), float(gamma_std), float(delta1),
            float(delta2), float(delta3), float(tmask_alpha), float(tmask_beta))
        self.validate()
        return self

    def validate(self):
        for name in self._fields:
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise LossConfigError("%s must be a finite value >= 0, got %r" % (name, value))
        if self.delta1 <= 0:
            raise LossConfigError("delta1 must be > 0")
        if self.delta2 > 0 and self.delta3 > 0 and not self.gamma_std < self.beta_mean:
            raise LossConfigError("gamma_std (%g) must be smaller than beta_mean (%g) when "
                                  "both regularizers are active"
                                  % (self.gamma_std, self.beta_mean))

    def replace(self, **kwargs):
        return LossConfig(**dict(self._asdict(), **kwargs))


class EmbeddingBatch(object):
    """L2-normalized representations ``[n, d]`` with one class label per row."""

    def __init__(self, embeddings, labels):
        if not isinstance(embeddings, Tensor):
            embeddings = Tensor(embeddings)
        if embeddings.ndim != 2:
            raise ShapeError('EmbeddingBatch', embeddings.data.shape, detail='expected [n, d]')
        n, d = embeddings.data.shape
        if d < 2:
            raise LossInputError("embedding dimension must be >= 2, got %d" % d)
        labels = np.asarray(labels)
        if labels.shape != (n,) or not np.issubdtype(labels.dtype, np.integer):
            raise LossInputError("need %d integer labels, got %r" % (n, labels.shape))
        norms = np.linalg.norm(embeddings.data, axis=1)
        worst = float(np.max(np.abs(norms - 1.0)))
        if worst > UNIT_NORM_TOL:
            raise LossInputError("embeddings are not unit-norm (max deviation %.3g)" % worst)
        self.embeddings = embeddings
        self.labels = labels.astype(np.int64)

    def __len__(self):
        return len(self.labels)

    @property
    def classes(self):
        return np.unique(self.labels)

    def averaging_matrix(self):
        """``[C, n]`` matrix whose product with the embeddings gives class means."""
        classes = self.classes
        onehot = (self.labels[None, :] == classes[:, None]).astype(DTYPE)
        return onehot / onehot.sum(axis=1, keepdims=True)

    def class_means(self):
        return matmul(Tensor(self.averaging_matrix()), self.embeddings)


class ScoreTriple(namedtuple('ScoreTriple', ['s_tp', 's_tn', 's_np'])):
    __slots__ = ()

    def __new__(cls, s_tp, s_tn, s_np):
        values = (float(s_tp), float(s_tn), float(s_np))
        for name, v in zip(cls._fields, values):
            if not 0.0 <= v <= 1.0:
                raise LossInputError("%s score %r outside [0, 1]" % (name, v))
        return super(ScoreTriple, cls).__new__(cls, *values)


def _zero_like_loss(terms):
    # keeps the graph connected so backward() still reaches the leaves
    return scale(tensor_sum(terms), 0.0)


def triplet_loss(triplets, batch, cfg):
    """
    (1/2N) sum over triplets of [|f(a)-f(p)|^2 - |f(a)-f(n)|^2 + alpha]_+
    """
    triplets = np.asarray(triplets, dtype=np.int64)
    if triplets.size == 0:
        raise LossInputError("triplet_loss: empty triplet list")
    if triplets.ndim != 2 or triplets.shape[1] != 3:
        raise LossInputError("triplet_loss: expected (anchor, positive, negative) index triples")
    n = len(batch)
    if triplets.min() < 0 or triplets.max() >= n:
        raise LossInputError("triplet_loss: index out of range for a batch of %d" % n)
    emb = batch.embeddings
    fa = getitem(emb, triplets[:, 0])
    fp = getitem(emb, triplets[:, 1])
    fn = getitem(emb, triplets[:, 2])
    d_ap = tensor_sum(square(sub(fa, fp)), axis=1)
    d_an = tensor_sum(square(sub(fa, fn)), axis=1)
    terms = hinge_clamp(shift(sub(d_ap, d_an), cfg.alpha_triplet))
    return scale(tensor_sum(terms), 1.0 / (2 * len(triplets)))


def nearest_other_means(means):
    """Index of the nearest other class mean for every class (ties: lowest index)."""
    m = means.data if isinstance(means, Tensor) else np.asarray(means)
    diff = m[:, None, :] - m[None, :, :]
    dist = np.sum(diff * diff, axis=-1)
    np.fill_diagonal(dist, np.inf)
    return np.argmin(dist, axis=1)


def mean_distance_loss(batch, cfg):
    """
    (1/2P) sum over classes of max(0, beta - |mu_c - mu_c^n|^2), with
    mu_c^n the nearest other class mean and P the number of violated
    classes.
    """
    classes = batch.classes
    c = len(classes)
    if c < 2:
        raise LossInputError("mean_distance_loss needs >= 2 classes, got %d" % c)
    means = batch.class_means()
    nearest = nearest_other_means(means)
    select = np.eye(c, dtype=DTYPE)
    select[np.arange(c), nearest] -= 1.0
    gaps = matmul(Tensor(select), means)
    sq = tensor_sum(square(gaps), axis=1)
    terms = hinge_clamp(shift(scale(sq, -1.0), cfg.beta_mean))
    violated = int(np.count_nonzero(terms.data > 0))
    if violated == 0:
        return _zero_like_loss(terms)
    return scale(tensor_sum(terms), 1.0 / (2 * violated))


def class_sigmas(batch):
    """Per-class spread sqrt((1/N_c) sum_j |f(x_cj) - mu_c|^2) as a ``[C]`` tensor."""
    avg = batch.averaging_matrix()
    classes = batch.classes
    member = np.searchsorted(classes, batch.labels)
    centering = np.eye(len(batch), dtype=DTYPE) - avg[member]
    centered = matmul(Tensor(centering), batch.embeddings)
    sq = reshape(tensor_sum(square(centered), axis=1), (len(batch), 1))
    var = reshape(matmul(Tensor(avg), sq), (len(classes),))
    # rounding residue of identical rows is flushed to an exact zero spread,
    # where sqrt takes subgradient 0
    keep = var.data > SINGULAR_SIGMA ** 2
    var = record('flush_zero', (var,), np.where(keep, var.data, 0.0), lambda g: (g * keep,))
    return sqrt(var)


def std_dev_loss(batch, cfg):
    """
    (1/M) sum over classes of max(0, gamma - sigma_c), with M the number of
    violated classes.
    """
    sigma = class_sigmas(batch)
    terms = hinge_clamp(shift(scale(sigma, -1.0), cfg.gamma_std))
    violated = int(np.count_nonzero(terms.data > 0))
    if violated == 0:
        if np.any(terms.data > 0):
            raise LossInputError("std_dev_loss: positive term with no violated class")
        return _zero_like_loss(terms)
    return scale(tensor_sum(terms), 1.0 / violated)


def std_dev_loss_grad_analytic(batch, cfg):
    """
    Closed-form gradient of ``std_dev_loss`` with respect to the embeddings:
    -(1/M) sum_c w_c (f(x_ci) - mu_c) / (N_c sigma_c), w_c = 1 on violated
    classes.
    """
    f = batch.embeddings.data
    classes = batch.classes
    member = np.searchsorted(classes, batch.labels)
    counts = np.bincount(member, minlength=len(classes)).astype(DTYPE)
    means = np.zeros((len(classes), f.shape[1]), dtype=DTYPE)
    np.add.at(means, member, f)
    means /= counts[:, None]
    centered = f - means[member]
    sigma = np.sqrt(np.bincount(member, weights=np.sum(centered * centered, axis=1),
                                minlength=len(classes)) / counts)
    violated = cfg.gamma_std - sigma > 0
    grad = np.zeros_like(f)
    m = int(np.count_nonzero(violated))
    if m == 0:
        return Tensor(grad)
    singular = violated & (sigma <= SINGULAR_SIGMA)
    if np.any(singular):
        raise SingularGradientError("std_dev_loss gradient undefined: class %s has zero spread"
                                    % classes[np.argmax(singular)])
    rows = violated[member]
    coef = -1.0 / (m * counts[member] * np.where(rows, sigma[member], 1.0))
    grad[rows] = (coef[:, None] * centered)[rows]
    return Tensor(grad)


def haarnet_loss(triplets, batch, cfg):
    """delta1 * triplet + delta2 * mean distance + delta3 * std deviation."""
    total = scale(triplet_loss(triplets, batch, cfg), cfg.delta1)
    if cfg.delta2 > 0:
        total = add(total, scale(mean_distance_loss(batch, cfg), cfg.delta2))
    if cfg.delta3 > 0:
        total = add(total, scale(std_dev_loss(batch, cfg), cfg.delta3))
    return total


def mdr_tl(triplets, batch, cfg):
    return haarnet_loss(triplets, batch, cfg.replace(delta3=0.0))


def ccm_triplet_loss(scores):
    """(1/L) sum sqrt((1 - s_tp)^2 + s_tn^2 + s_np^2) over ``ScoreTriple``s."""
    scores = [s if isinstance(s, ScoreTriple) else ScoreTriple(*s) for s in scores]
    if not scores:
        raise LossInputError("ccm_triplet_loss: empty score list")
    arr = np.array(scores, dtype=DTYPE)
    return ccm_triplet_loss_tensor(Tensor(arr[:, 0]), Tensor(arr[:, 1]), Tensor(arr[:, 2]))


def ccm_triplet_loss_tensor(s_tp, s_tn, s_np):
    """Differentiable form on ``[L]`` score tensors produced by the matching head."""
    for t in (s_tp, s_tn, s_np):
        if t.ndim != 1 or t.data.shape != s_tp.data.shape:
            raise ShapeError('ccm_triplet_loss', s_tp.data.shape, t.data.shape)
        if np.any(t.data < 0) or np.any(t.data > 1):
            raise LossInputError("ccm_triplet_loss: score outside [0, 1]")
    miss = shift(scale(s_tp, -1.0), 1.0)
    radicand = add(add(square(miss), square(s_tn)), square(s_np))
    return tensor_mean(sqrt(radicand))


def weighted_tmask_mse(reconstruction, target, mask):
    """
    sum over pixels (and channels) of tau_ij * (X_ij - Xhat_ij)^2.  Accepts
    ``[H, W]``, ``[C, H, W]`` or a ``[B, C, H, W]`` batch, which is averaged
    over B.
    """
    grid = np.asarray(getattr(mask, 'grid', mask), dtype=DTYPE)
    if reconstruction.data.shape != target.data.shape:
        raise ShapeError('weighted_tmask_mse', reconstruction.data.shape, target.data.shape)
    shape = reconstruction.data.shape
    if reconstruction.ndim not in (2, 3, 4) or shape[-2:] != grid.shape:
        raise ShapeError('weighted_tmask_mse', shape, grid.shape, detail='mask grid')
    tau = np.broadcast_to(grid, shape)
    xd, td = reconstruction.data, target.data
    diff = xd - td
    out = np.sum(tau * diff * diff)
    inputs = [reconstruction, target]
    norm = 1.0
    if reconstruction.ndim == 4:
        norm = 1.0 / shape[0]

    def vjp(g):
        d = 2.0 * norm * g * tau * diff
        return (d, -d)
    return record('tmask_mse', inputs, out * norm, vjp)


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood; gradient (softmax - onehot) / n."""
    squeeze = logits.ndim == 1
    z = logits.data[None, :] if squeeze else logits.data
    if z.ndim != 2:
        raise ShapeError('softmax_cross_entropy', logits.data.shape, detail='expected [n, C]')
    n, c = z.shape
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if labels.shape != (n,):
        raise LossInputError("softmax_cross_entropy: %d labels for %d rows" % (len(labels), n))
    if labels.min() < 0 or labels.max() >= c:
        raise LossInputError("softmax_cross_entropy: label outside [0, %d)" % c)
    if not np.all(np.isfinite(z)):
        raise LossInputError("softmax_cross_entropy: non-finite logits")
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))
    log_p = shifted - log_norm
    rows = np.arange(n)
    loss = -np.mean(log_p[rows, labels])
    prob = np.exp(log_p)

    def vjp(g):
        d = prob.copy()
        d[rows, labels] -= 1.0
        d *= g / n
        return (d[0] if squeeze else d,)
    return record('softmax_cross_entropy', (logits,), loss, vjp)
