# (c) 2016 Anaconda, Inc. / https://anaconda.com
# All Rights Reserved
#
# stv is distributed under the terms of the BSD 3-clause license.
# Consult LICENSE.txt or http://opensource.org/licenses/BSD-3-Clause.

"""
Finite-difference verification of the recorded gradients, and the seeded
suite run by ``stv gradcheck`` over every loss and every layer.
"""
from __future__ import absolute_import, division, print_function

from collections import namedtuple
import logging

import numpy as np

from . import layers as L
from . import losses
from .exceptions import GradientCheckError
from .tensor import (Tensor, backward, concat, hadamard_mul, l2_normalize, no_grad,
                     relu, softmax, tensor_sum)
from .utils import derive_seed

logger = logging.getLogger(__name__)

LOSS_TOLERANCE = 1e-6
LAYER_TOLERANCE = 1e-5
ANALYTIC_TOLERANCE = 1e-8
DEFAULT_EPS = 1e-4
DENOMINATOR_FLOOR = 1e-8

CheckResult = namedtuple('CheckResult', ['name', 'kind', 'max_error', 'tolerance', 'passed'])


def _evaluate(f):
    with no_grad():
        return f().item()


def finite_difference_check(f, params, eps=DEFAULT_EPS):
    """
    Compare the gradients ``backward`` assigns to ``params`` with
    fourth-order central differences of ``f`` (a zero-argument callable
    returning a scalar Tensor).  Returns the maximum over all parameter
    entries of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    Parameter values and ``.grad`` slots are restored afterwards.
    """
    if not 0.0 < eps <= 1e-2:
        raise GradientCheckError("step %r outside (0, 1e-2]" % eps)
    params = list(params)
    for p in params:
        if not p.requires_grad or not p.is_leaf:
            raise GradientCheckError("parameters must be leaf tensors with requires_grad")

    first = f()
    second = f()
    if not np.array_equal(first.data, second.data):
        raise GradientCheckError("function is not deterministic: %r != %r"
                                 % (first.item(), second.item()))
    saved = [p.grad for p in params]
    for p in params:
        p.grad = None
    try:
        grads = backward(first)
    finally:
        for p, g in zip(params, saved):
            p.grad = g

    worst = 0.0
    for p in params:
        analytic = grads.get(p)
        if analytic is None:
            analytic = np.zeros_like(p.data)
        base = p.data.copy()
        numeric = np.empty_like(base)
        try:
            for idx in np.ndindex(*base.shape):
                values = []
                for step in (-2.0, -1.0, 1.0, 2.0):
                    probe = base.copy()
                    probe[idx] += step * eps
                    p.assign(probe)
                    values.append(_evaluate(f))
                numeric[idx] = (values[0] - 8.0 * values[1] + 8.0 * values[2]
                                - values[3]) / (12.0 * eps)
        finally:
            p.assign(base)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), DENOMINATOR_FLOOR)
        err = np.abs(analytic - numeric) / denom
        worst = max(worst, float(err.max()))
    return worst


# ----- random points

def _leaf(arr):
    return Tensor(arr, requires_grad=True)


def _spaced(rng, shape, gap=0.1):
    """Distinct values at least ``gap`` apart, so max-pool ties stay out of reach."""
    n = int(np.prod(shape))
    values = rng.permutation(n) * gap + rng.uniform(0.0, 0.2 * gap, n) - n * gap / 2
    return values.reshape(shape)


def _away_from_zero(rng, shape, gap=0.2):
    return np.sign(rng.normal(size=shape) + 1e-12) * (gap + np.abs(rng.normal(size=shape)))


def _check_layer(rng, params, forward):
    r = Tensor(rng.normal(size=forward().data.shape))
    return (lambda: tensor_sum(hadamard_mul(forward(), r))), params


def _batch_params(rng, classes=3, per_class=5, dim=16):
    raw = _leaf(rng.normal(size=(classes * per_class, dim)))
    labels = np.repeat(np.arange(classes), per_class)
    return raw, labels


# every term violated everywhere on the unit sphere keeps the losses smooth
SUITE_LOSS_CONFIG = dict(alpha_triplet=4.5, beta_mean=5.0, gamma_std=1.5,
                         delta1=1.0, delta2=0.5, delta3=0.25)


def _embedding_loss(name):
    def build(rng):
        cfg = losses.LossConfig(**SUITE_LOSS_CONFIG)
        raw, labels = _batch_params(rng, dim=8)
        n = len(labels)
        triplets = [(a, (a + 1) % 5 + 5 * (a // 5), (a + 5) % n) for a in range(n)]

        def f():
            batch = losses.EmbeddingBatch(l2_normalize(raw), labels)
            if name == 'triplet_loss':
                return losses.triplet_loss(triplets, batch, cfg)
            if name == 'mean_distance_loss':
                return losses.mean_distance_loss(batch, cfg)
            if name == 'std_dev_loss':
                return losses.std_dev_loss(batch, cfg)
            if name == 'mdr_tl':
                return losses.mdr_tl(triplets, batch, cfg)
            return losses.haarnet_loss(triplets, batch, cfg)
        return f, [raw]
    return build


def _ccm_triplet(rng):
    s = [_leaf(rng.uniform(0.1, 0.9, 6)) for _ in range(3)]
    return (lambda: losses.ccm_triplet_loss_tensor(*s)), s


def _tmask_mse(rng):
    recon = _leaf(rng.normal(size=(2, 1, 6, 5)))
    target = Tensor(rng.normal(size=(2, 1, 6, 5)))
    grid = rng.choice([1.0, 0.25], size=(6, 5))
    return (lambda: losses.weighted_tmask_mse(recon, target, grid)), [recon]


def _cross_entropy(rng):
    logits = _leaf(rng.normal(size=(4, 3)))
    labels = rng.integers(0, 3, 4)
    return (lambda: losses.softmax_cross_entropy(logits, labels)), [logits]


LOSS_CHECKS = [
    ('triplet_loss', _embedding_loss('triplet_loss')),
    ('mean_distance_loss', _embedding_loss('mean_distance_loss')),
    ('std_dev_loss', _embedding_loss('std_dev_loss')),
    ('haarnet_loss', _embedding_loss('haarnet_loss')),
    ('mdr_tl', _embedding_loss('mdr_tl')),
    ('ccm_triplet_loss', _ccm_triplet),
    ('weighted_tmask_mse', _tmask_mse),
    ('softmax_cross_entropy', _cross_entropy),
]


def _conv(rng):
    x = _leaf(rng.normal(size=(2, 2, 7, 7)))
    p = L.conv_params(2, 3, 3, stride=2, padding=1, rng=rng)
    p.bias.assign(rng.normal(size=3))
    return _check_layer(rng, [x, p.weight, p.bias], lambda: L.conv2d(x, p))


def _deconv(rng):
    x = _leaf(rng.normal(size=(2, 3, 3, 4)))
    p = L.deconv_params(3, 2, 4, stride=2, padding=1, rng=rng)
    return _check_layer(rng, [x, p.weight, p.bias], lambda: L.deconv2d(x, p))


def _maxpool(rng):
    x = _leaf(_spaced(rng, (2, 2, 6, 7)))
    return _check_layer(rng, [x], lambda: L.maxpool2d(x, 3, 2, padding=1)[0])


def _maxunpool(rng):
    _, idx = L.maxpool2d(Tensor(_spaced(rng, (1, 2, 6, 6))), 2, 2)
    y = _leaf(rng.normal(size=idx.shape))
    return _check_layer(rng, [y], lambda: L.maxunpool2d(y, idx, (1, 2, 6, 6)))


def _batchnorm_train(rng):
    x = _leaf(rng.normal(size=(2, 3, 4, 4)))
    p = L.batchnorm_params(3)
    p.weight.assign(rng.uniform(0.5, 1.5, 3))
    p.bias.assign(rng.normal(size=3))
    return _check_layer(rng, [x, p.weight, p.bias],
                        lambda: L.batchnorm2d(x, p, mode='train', update_stats=False))


def _batchnorm_eval(rng):
    x = _leaf(rng.normal(size=(2, 3, 4, 4)))
    p = L.batchnorm_params(3)
    p.running_mean = rng.normal(size=3)
    p.running_var = rng.uniform(0.5, 2.0, 3)
    return _check_layer(rng, [x, p.weight, p.bias], lambda: L.batchnorm2d(x, p, mode='eval'))


def _dropout(rng):
    x = _leaf(rng.normal(size=(2, 3, 4, 4)))
    seed = int(rng.integers(0, 2 ** 31))
    return _check_layer(rng, [x], lambda: L.dropout(x, 0.5, rng=seed))


def _fully_connected(rng):
    x = _leaf(rng.normal(size=(3, 2, 2, 2)))
    p = L.fc_params(8, 4, rng=rng)
    p.bias.assign(rng.normal(size=4))
    return _check_layer(rng, [x, p.weight, p.bias], lambda: L.fully_connected(x, p))


def _relu(rng):
    x = _leaf(_away_from_zero(rng, (3, 5)))
    return _check_layer(rng, [x], lambda: relu(x))


def _l2norm(rng):
    x = _leaf(rng.normal(size=(3, 5)))
    return _check_layer(rng, [x], lambda: l2_normalize(x))


def _softmax(rng):
    x = _leaf(rng.normal(size=(2, 4)))
    return _check_layer(rng, [x], lambda: softmax(x))


def _concat(rng):
    a = _leaf(rng.normal(size=(1, 2, 3, 3)))
    b = _leaf(rng.normal(size=(1, 1, 3, 3)))
    return _check_layer(rng, [a, b], lambda: concat([a, b], axis=1))


def _haar(pattern):
    def build(rng):
        x = _leaf(rng.normal(size=(1, 2, 6, 6)))
        return _check_layer(rng, [x],
                            lambda: L.haar_split_merge(L.haar_split(x, pattern), pattern))
    return build


def _inception(rng):
    x = _leaf(_spaced(rng, (1, 4, 6, 6)))
    p = L.inception_params(4, 8, rng=rng)
    params = [x] + [t for _, t in p.named_parameters()]
    return _check_layer(rng, params, lambda: L.inception_lite(x, p))


def _crop(rng):
    x = _leaf(rng.normal(size=(1, 2, 7, 6)))
    return _check_layer(rng, [x], lambda: L.center_crop(x, 4, 3))


LAYER_CHECKS = [
    ('conv2d', _conv),
    ('deconv2d', _deconv),
    ('maxpool2d', _maxpool),
    ('maxunpool2d', _maxunpool),
    ('batchnorm2d[train]', _batchnorm_train),
    ('batchnorm2d[eval]', _batchnorm_eval),
    ('dropout', _dropout),
    ('fully_connected', _fully_connected),
    ('relu', _relu),
    ('l2norm', _l2norm),
    ('softmax', _softmax),
    ('concat', _concat),
    ('subtract_merge[two_rect_horizontal]', _haar('two_rect_horizontal')),
    ('subtract_merge[two_rect_vertical]', _haar('two_rect_vertical')),
    ('subtract_merge[four_rect_checker]', _haar('four_rect_checker')),
    ('inception_lite', _inception),
    ('crop', _crop),
]


def std_gradient_cross_check(rng):
    """Max elementwise gap between the closed-form and recorded std-loss gradients."""
    cfg = losses.LossConfig(**SUITE_LOSS_CONFIG)
    raw, labels = _batch_params(rng)
    emb = Tensor(l2_normalize(raw).data, requires_grad=True)
    batch = losses.EmbeddingBatch(emb, labels)
    auto = backward(losses.std_dev_loss(batch, cfg))[emb]
    analytic = losses.std_dev_loss_grad_analytic(batch, cfg).data
    return float(np.max(np.abs(auto - analytic)))


def run_gradient_suite(seed=0, points=20, eps=DEFAULT_EPS):
    """
    Check every loss and every layer at ``points`` seeded random points.
    Returns one CheckResult per check, holding the worst error seen.
    """
    results = []
    for kind, checks, tol in (('loss', LOSS_CHECKS, LOSS_TOLERANCE),
                              ('layer', LAYER_CHECKS, LAYER_TOLERANCE)):
        for name, build in checks:
            worst = 0.0
            for point in range(points):
                rng = np.random.default_rng(derive_seed(seed, point))
                f, params = build(rng)
                worst = max(worst, finite_difference_check(f, params, eps))
            logger.info("gradcheck %-40s max error %.3e", name, worst)
            results.append(CheckResult(name, kind, worst, tol, worst < tol))
    worst = 0.0
    for point in range(points):
        rng = np.random.default_rng(derive_seed(seed, point))
        worst = max(worst, std_gradient_cross_check(rng))
    results.append(CheckResult('std_dev_loss[analytic]', 'loss', worst, ANALYTIC_TOLERANCE,
                               worst < ANALYTIC_TOLERANCE))
    return results


def format_results(results):
    lines = []
    for r in results:
        lines.append('%-4s  %-6s %-40s max error %.3e  (tolerance %.0e)'
                     % ('PASS' if r.passed else 'FAIL', r.kind, r.name, r.max_error,
                        r.tolerance))
    return '\n'.join(lines)
