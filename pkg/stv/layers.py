# (c) 2016 Anaconda, Inc. / https://anaconda.com
# All Rights Reserved
#
# stv is distributed under the terms of the BSD 3-clause license.
# Consult LICENSE.txt or http://opensource.org/licenses/BSD-3-Clause.

"""
Forward/backward layers shared by the four architectures.

Spatial tensors are ``[batch, channels, rows, cols]``.  Convolution-like
layers work on sliding-window views (``im2col`` without the copy) and record
one fused tape node each.
"""
from __future__ import absolute_import, division, print_function

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import DegenerateInputError, GeometryError, LayerConfigError, ShapeError
from .tensor import DTYPE, Tensor, concat, getitem, record

KINDS = ('conv2d', 'maxpool2d', 'maxunpool2d', 'deconv2d', 'batchnorm2d', 'dropout',
         'fully_connected', 'relu', 'l2norm', 'softmax', 'concat', 'subtract_merge',
         'inception_lite')

BN_MOMENTUM = 0.9
BN_EPS = 1e-5
DROPOUT_P = 0.3

HAAR_SIGNS = {
    'two_rect_horizontal': (1.0, -1.0),
    'two_rect_vertical': (1.0, -1.0),
    'four_rect_checker': (1.0, -1.0, 1.0, -1.0),
}


class TrainingContext(object):
    """
    Mutable per-network state used in train mode: the dropout generator and
    whether batchnorm running statistics are updated.
    """

    def __init__(self, seed=0, mode='train'):
        self.seed = int(seed)
        self.rng = np.random.default_rng(self.seed)
        self.mode = mode
        self.update_stats = True

    @property
    def training(self):
        return self.mode == 'train'

    def reseed(self, seed):
        self.seed = int(seed)
        self.rng = np.random.default_rng(self.seed)


class LayerParams(object):
    """
    One layer: its kind, parameter tensors and hyperparameters.  Batchnorm
    layers also own their running statistics; inception layers own one
    ``conv2d`` LayerParams per parallel path.
    """

    def __init__(self, kind, weight=None, bias=None, **hyper):
        if kind not in KINDS:
            raise LayerConfigError("unknown layer kind '%s'" % kind)
        self.kind = kind
        self.weight = weight
        self.bias = bias
        self.hyper = hyper
        self.paths = hyper.pop('paths', None)
        self.running_mean = None
        self.running_var = None
        self._validate()
        if kind == 'batchnorm2d':
            c = weight.shape[0]
            self.running_mean = np.zeros(c, dtype=DTYPE)
            self.running_var = np.ones(c, dtype=DTYPE)

    def _validate(self):
        h = self.hyper
        if self.kind in ('conv2d', 'deconv2d'):
            if self.weight is None or self.weight.ndim != 4:
                raise LayerConfigError("%s needs a rank-4 weight" % self.kind)
            k = h.setdefault('kernel', self.weight.shape[2])
            if self.weight.shape[2] != k or self.weight.shape[3] != k:
                raise LayerConfigError("%s weight %s does not match kernel %d"
                                       % (self.kind, self.weight.shape, k))
            h.setdefault('stride', 1)
            h.setdefault('padding', 0)
            if h['stride'] < 1 or h['padding'] < 0:
                raise LayerConfigError("%s: stride must be >= 1 and padding >= 0" % self.kind)
            out_ch = self.weight.shape[0] if self.kind == 'conv2d' else self.weight.shape[1]
            if self.bias is not None and self.bias.shape != [out_ch]:
                raise LayerConfigError("%s bias %s does not match %d output channels"
                                       % (self.kind, self.bias.shape, out_ch))
        elif self.kind == 'fully_connected':
            if self.weight is None or self.weight.ndim != 2:
                raise LayerConfigError("fully_connected needs a rank-2 weight")
            if self.bias is not None and self.bias.shape != [self.weight.shape[0]]:
                raise LayerConfigError("fully_connected bias %s does not match weight %s"
                                       % (self.bias.shape, self.weight.shape))
        elif self.kind == 'batchnorm2d':
            if self.weight is None or self.bias is None or self.weight.shape != self.bias.shape:
                raise LayerConfigError("batchnorm2d needs matching gamma/beta vectors")
            h.setdefault('eps', BN_EPS)
            h.setdefault('momentum', BN_MOMENTUM)
            if h['eps'] <= 0:
                raise LayerConfigError("batchnorm2d epsilon must be > 0")
            if not 0.0 <= h['momentum'] < 1.0:
                raise LayerConfigError("batchnorm2d momentum must be in [0, 1)")
        elif self.kind == 'dropout':
            _check_drop_probability(h.setdefault('p', DROPOUT_P))
        elif self.kind == 'inception_lite':
            if not self.paths or sorted(self.paths) != ['p1', 'p3', 'p5', 'pp']:
                raise LayerConfigError("inception_lite needs paths p1, p3, p5 and pp")

    @property
    def out_channels(self):
        if self.kind == 'conv2d':
            return self.weight.shape[0]
        if self.kind == 'deconv2d':
            return self.weight.shape[1]
        if self.kind == 'inception_lite':
            return sum(self.paths[k].out_channels for k in ('p1', 'p3', 'p5', 'pp'))
        raise LayerConfigError("%s has no channel count" % self.kind)

    def named_parameters(self, prefix=''):
        if self.kind == 'inception_lite':
            for key in ('p1', 'p3', 'p5', 'pp'):
                for item in self.paths[key].named_parameters(prefix + key + '.'):
                    yield item
            return
        if self.kind == 'batchnorm2d':
            yield prefix + 'gamma', self.weight
            yield prefix + 'beta', self.bias
            return
        if self.weight is not None:
            yield prefix + 'weight', self.weight
        if self.bias is not None:
            yield prefix + 'bias', self.bias

    def n_parameters(self):
        return sum(t.size for _, t in self.named_parameters())


# ----- parameter factories (He-normal initialisation)

def conv_params(cin, cout, kernel, stride=1, padding=0, rng=None):
    rng = rng if rng is not None else np.random.default_rng(0)
    std = np.sqrt(2.0 / (cin * kernel * kernel))
    w = Tensor(rng.normal(0.0, std, (cout, cin, kernel, kernel)), requires_grad=True)
    b = Tensor(np.zeros(cout), requires_grad=True)
    return LayerParams('conv2d', w, b, kernel=kernel, stride=stride, padding=padding)


def deconv_params(cin, cout, kernel, stride=1, padding=0, rng=None):
    rng = rng if rng is not None else np.random.default_rng(0)
    std = np.sqrt(2.0 / (cin * kernel * kernel))
    w = Tensor(rng.normal(0.0, std, (cin, cout, kernel, kernel)), requires_grad=True)
    b = Tensor(np.zeros(cout), requires_grad=True)
    return LayerParams('deconv2d', w, b, kernel=kernel, stride=stride, padding=padding)


def fc_params(n_in, n_out, rng=None):
    rng = rng if rng is not None else np.random.default_rng(0)
    std = np.sqrt(2.0 / n_in)
    w = Tensor(rng.normal(0.0, std, (n_out, n_in)), requires_grad=True)
    b = Tensor(np.zeros(n_out), requires_grad=True)
    return LayerParams('fully_connected', w, b)


def batchnorm_params(channels, eps=BN_EPS, momentum=BN_MOMENTUM):
    return LayerParams('batchnorm2d',
                       Tensor(np.ones(channels), requires_grad=True),
                       Tensor(np.zeros(channels), requires_grad=True),
                       eps=eps, momentum=momentum)


def inception_split(out_channels, paths=None):
    """Channels per parallel path: explicit ``paths`` or an even 4-way split."""
    if paths is not None:
        paths = tuple(int(c) for c in paths)
        if len(paths) != 4 or min(paths) < 1:
            raise LayerConfigError("inception_lite paths must be four positive widths")
        return paths
    if out_channels % 4:
        raise LayerConfigError("inception_lite channel count %d is not divisible by 4"
                               % out_channels)
    return (out_channels // 4,) * 4


def inception_params(cin, out_channels=None, paths=None, rng=None):
    rng = rng if rng is not None else np.random.default_rng(0)
    c1, c3, c5, cp = inception_split(out_channels, paths)
    return LayerParams('inception_lite', paths={
        'p1': conv_params(cin, c1, 1, rng=rng),
        'p3': conv_params(cin, c3, 3, padding=1, rng=rng),
        'p5': conv_params(cin, c5, 5, padding=2, rng=rng),
        'pp': conv_params(cin, cp, 1, rng=rng),
    })


# ----- geometry

def conv_output_extent(size, kernel, stride, padding):
    span = size + 2 * padding - kernel
    if span < 0:
        raise GeometryError("kernel %d exceeds padded extent %d" % (kernel, size + 2 * padding))
    if span % stride:
        raise GeometryError("non-integral output extent (%d + 2*%d - %d)/%d + 1"
                            % (size, padding, kernel, stride))
    return span // stride + 1


def pool_output_extent(size, window, stride, padding=0):
    span = size + 2 * padding - window
    if span < 0:
        raise GeometryError("pool window %d exceeds extent %d" % (window, size + 2 * padding))
    return span // stride + 1


def deconv_output_extent(size, kernel, stride, padding):
    out = (size - 1) * stride + kernel - 2 * padding
    if out < 1:
        raise GeometryError("deconvolution output extent %d < 1" % out)
    return out


def _windows(xp, k, s):
    return sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]


def _pad(x, p, value=0.0):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), mode='constant', constant_values=value)


def _conv_forward(x, w, s, p):
    win = _windows(_pad(x, p), w.shape[2], s)
    return np.einsum('bchwij,ocij->bohw', win, w, optimize=True)


def _conv_input_grad(g, w, in_shape, s, p):
    """Adjoint of ``_conv_forward`` w.r.t. its input (also the deconv forward)."""
    b, c, h, wd = in_shape
    k = w.shape[2]
    ho, wo = g.shape[2], g.shape[3]
    dxp = np.zeros((b, c, h + 2 * p, wd + 2 * p), dtype=DTYPE)
    dwin = np.einsum('bohw,ocij->bchwij', g, w, optimize=True)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += dwin[..., i, j]
    return dxp[:, :, p:p + h, p:p + wd]


def _conv_weight_grad(g, x, k, s, p):
    win = _windows(_pad(x, p), k, s)
    return np.einsum('bohw,bchwij->ocij', g, win, optimize=True)


def _require_rank4(op, x):
    if x.ndim != 4:
        raise ShapeError(op, x.data.shape, detail='expected [batch, channels, rows, cols]')


# ----- layers

def conv2d(x, params):
    _require_rank4('conv2d', x)
    w = params.weight
    k, s, p = params.hyper['kernel'], params.hyper['stride'], params.hyper['padding']
    if x.shape[1] != w.shape[1]:
        raise ShapeError('conv2d', x.data.shape, w.data.shape, detail='input channels')
    conv_output_extent(x.shape[2], k, s, p)
    conv_output_extent(x.shape[3], k, s, p)
    xd, wd = x.data, w.data
    out = _conv_forward(xd, wd, s, p)
    inputs = [x, w]
    if params.bias is not None:
        out = out + params.bias.data[None, :, None, None]
        inputs.append(params.bias)

    def vjp(g):
        grads = [_conv_input_grad(g, wd, xd.shape, s, p), _conv_weight_grad(g, xd, k, s, p)]
        if len(inputs) == 3:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)
    return record('conv2d', inputs, out, vjp)


def deconv2d(x, params):
    """Transposed convolution; weight is ``[in_channels, out_channels, k, k]``."""
    _require_rank4('deconv2d', x)
    w = params.weight
    k, s, p = params.hyper['kernel'], params.hyper['stride'], params.hyper['padding']
    if x.shape[1] != w.shape[0]:
        raise ShapeError('deconv2d', x.data.shape, w.data.shape, detail='input channels')
    if p >= k:
        raise GeometryError("deconv2d padding %d must be smaller than kernel %d" % (p, k))
    b, _, h, wd_ = x.data.shape
    ho = deconv_output_extent(h, k, s, p)
    wo = deconv_output_extent(wd_, k, s, p)
    xd, wd = x.data, w.data
    out = _conv_input_grad(xd, wd, (b, w.shape[1], ho, wo), s, p)
    inputs = [x, w]
    if params.bias is not None:
        out = out + params.bias.data[None, :, None, None]
        inputs.append(params.bias)

    def vjp(g):
        grads = [_conv_forward(g, wd, s, p), _conv_weight_grad(xd, g, k, s, p)]
        if len(inputs) == 3:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)
    return record('deconv2d', inputs, out, vjp)


def maxpool2d(x, window, stride=None, padding=0):
    """
    Max pooling with floor output extents.  Returns the pooled tensor and the
    argmax of every window as a flat ``row * cols + col`` position in the
    unpadded input (first maximum wins on ties).
    """
    _require_rank4('maxpool2d', x)
    s = stride or window
    if padding > window // 2:
        raise GeometryError("pool padding %d exceeds half the window %d" % (padding, window))
    b, c, h, w = x.data.shape
    ho = pool_output_extent(h, window, s, padding)
    wo = pool_output_extent(w, window, s, padding)
    xp = _pad(x.data, padding, value=-np.inf)
    win = _windows(xp, window, s)[:, :, :ho, :wo]
    flat = win.reshape(b, c, ho, wo, window * window)
    arg = np.argmax(flat, axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    rows = (np.arange(ho) * s)[:, None] + arg // window - padding
    cols = (np.arange(wo) * s)[None, :] + arg % window - padding
    indices = (rows * w + cols).astype(np.int64)
    offsets = _plane_offsets(b, c, h * w)

    def vjp(g):
        dx = np.bincount((indices + offsets).ravel(), weights=g.ravel(), minlength=b * c * h * w)
        return (dx.reshape(b, c, h, w),)
    return record('maxpool2d', (x,), out, vjp), indices


def maxunpool2d(x, indices, target_shape):
    """Scatter-add pooled values back to their argmax positions, zeros elsewhere."""
    _require_rank4('maxunpool2d', x)
    indices = np.asarray(indices)
    if indices.shape != tuple(x.data.shape):
        raise ShapeError('maxunpool2d', x.data.shape, indices.shape, detail='indices')
    target = tuple(target_shape)
    h, w = target[-2], target[-1]
    b, c = x.data.shape[:2]
    if len(target) == 4 and tuple(target[:2]) != (b, c):
        raise ShapeError('maxunpool2d', x.data.shape, target, detail='target batch/channels')
    if indices.size and (indices.min() < 0 or indices.max() >= h * w):
        raise ShapeError('maxunpool2d', indices.shape, target, detail='indices out of range')
    flat_idx = (indices + _plane_offsets(b, c, h * w)).ravel()
    out = np.bincount(flat_idx, weights=x.data.ravel(), minlength=b * c * h * w)

    def vjp(g):
        return (g.ravel()[flat_idx].reshape(indices.shape),)
    return record('maxunpool2d', (x,), out.reshape(b, c, h, w), vjp)


def _plane_offsets(b, c, plane):
    return (np.arange(b * c, dtype=np.int64) * plane).reshape(b, c, 1, 1)


def batchnorm2d(x, params, mode='train', update_stats=True):
    _require_rank4('batchnorm2d', x)
    gamma, beta = params.weight, params.bias
    if x.shape[1] != gamma.shape[0]:
        raise ShapeError('batchnorm2d', x.data.shape, gamma.data.shape, detail='channels')
    eps = params.hyper['eps']
    xd = x.data
    g_ = gamma.data[None, :, None, None]
    b_ = beta.data[None, :, None, None]
    if mode == 'eval':
        inv_std = 1.0 / np.sqrt(params.running_var + eps)[None, :, None, None]
        xhat = (xd - params.running_mean[None, :, None, None]) * inv_std

        def vjp_eval(g):
            return (g * g_ * inv_std, np.sum(g * xhat, axis=(0, 2, 3)), g.sum(axis=(0, 2, 3)))
        return record('batchnorm2d', (x, gamma, beta), g_ * xhat + b_, vjp_eval)

    m = xd.shape[0] * xd.shape[2] * xd.shape[3]
    if m < 2:
        raise DegenerateInputError("batchnorm2d: train mode needs batch*rows*cols >= 2, got %d"
                                   % m)
    mean = xd.mean(axis=(0, 2, 3))
    var = xd.var(axis=(0, 2, 3))
    inv_std = (1.0 / np.sqrt(var + eps))[None, :, None, None]
    xhat = (xd - mean[None, :, None, None]) * inv_std
    if update_stats:
        mom = params.hyper['momentum']
        params.running_mean = mom * params.running_mean + (1.0 - mom) * mean
        params.running_var = mom * params.running_var + (1.0 - mom) * var * m / (m - 1)

    def vjp(g):
        dxhat = g * g_
        s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
        s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        dx = inv_std / m * (m * dxhat - s1 - xhat * s2)
        return (dx, np.sum(g * xhat, axis=(0, 2, 3)), g.sum(axis=(0, 2, 3)))
    return record('batchnorm2d', (x, gamma, beta), g_ * xhat + b_, vjp)


def _check_drop_probability(p):
    if not 0.0 <= p < 1.0:
        raise LayerConfigError("dropout probability %r not in [0, 1)" % p)


def dropout(x, p, rng=None, mode='train'):
    """Inverted dropout; ``rng`` is a seed or a ``numpy.random.Generator``."""
    _check_drop_probability(p)
    if mode == 'eval' or p == 0.0:
        return x
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(0 if rng is None else rng)
    keep = (rng.random(x.data.shape) >= p) / (1.0 - p)
    return record('dropout', (x,), x.data * keep, lambda g: (g * keep,))


def fully_connected(x, params):
    w = params.weight
    n_out, n_in = w.data.shape
    if x.ndim == 1:
        xd = x.data[None, :]
    else:
        xd = x.data.reshape(x.data.shape[0], -1)
    if xd.shape[1] != n_in:
        raise ShapeError('fully_connected', x.data.shape, w.data.shape, detail='inner dimension')
    wd = w.data
    out = xd @ wd.T
    inputs = [x, w]
    if params.bias is not None:
        out = out + params.bias.data
        inputs.append(params.bias)
    in_shape = x.data.shape

    def vjp(g):
        g2 = g.reshape(-1, n_out)
        grads = [(g2 @ wd).reshape(in_shape), g2.T @ xd]
        if len(inputs) == 3:
            grads.append(g2.sum(axis=0))
        return tuple(grads)
    if x.ndim == 1:
        out = out[0]
    return record('fully_connected', inputs, out, vjp)


def crop(x, top, left, rows, cols):
    _require_rank4('crop', x)
    h, w = x.shape[2], x.shape[3]
    if top < 0 or left < 0 or rows < 1 or cols < 1 or top + rows > h or left + cols > w:
        raise GeometryError("crop box (%d, %d, %d, %d) outside %dx%d map"
                            % (top, left, rows, cols, h, w))
    return getitem(x, (slice(None), slice(None), slice(top, top + rows),
                       slice(left, left + cols)))


def center_crop(x, rows, cols):
    h, w = x.shape[2], x.shape[3]
    return crop(x, (h - rows) // 2, (w - cols) // 2, rows, cols)


def haar_split(x, pattern):
    """
    Cut a map into the rectangles of a Haar pattern, white regions first:
    left/right halves, top/bottom halves, or the four quadrants ordered
    top-left, top-right, bottom-right, bottom-left.  Odd extents drop the
    middle row/column so every region has the same shape.
    """
    _require_rank4('haar_split', x)
    h, w = x.shape[2], x.shape[3]
    hh, hw = h // 2, w // 2
    if pattern == 'two_rect_horizontal':
        if hw < 1:
            raise GeometryError("map width %d too small to split" % w)
        return [crop(x, 0, 0, h, hw), crop(x, 0, w - hw, h, hw)]
    if pattern == 'two_rect_vertical':
        if hh < 1:
            raise GeometryError("map height %d too small to split" % h)
        return [crop(x, 0, 0, hh, w), crop(x, h - hh, 0, hh, w)]
    if pattern == 'four_rect_checker':
        if hh < 1 or hw < 1:
            raise GeometryError("map %dx%d too small to split in quadrants" % (h, w))
        return [crop(x, 0, 0, hh, hw), crop(x, 0, w - hw, hh, hw),
                crop(x, h - hh, w - hw, hh, hw), crop(x, h - hh, 0, hh, hw)]
    raise LayerConfigError("unknown Haar pattern '%s'" % pattern)


def haar_split_merge(maps, pattern):
    """Matrix-valued Haar response: white maps added, black maps subtracted."""
    try:
        signs = HAAR_SIGNS[pattern]
    except KeyError:
        raise LayerConfigError("unknown Haar pattern '%s'" % pattern)
    maps = list(maps)
    if len(maps) != len(signs):
        raise ShapeError('haar_split_merge', (len(maps),), (len(signs),), detail='arity')
    ref = maps[0].data.shape
    for m in maps[1:]:
        if m.data.shape != ref:
            raise ShapeError('haar_split_merge', ref, m.data.shape)
    out = np.zeros(ref, dtype=DTYPE)
    for sign, m in zip(signs, maps):
        out = out + sign * m.data
    return record('subtract_merge', tuple(maps), out,
                  lambda g: tuple(sign * g for sign in signs))


def inception_lite(x, params):
    """Channel concat of 1x1, 3x3, 5x5 and 3x3-maxpool->1x1 paths."""
    paths = params.paths
    pooled, _ = maxpool2d(x, 3, stride=1, padding=1)
    outs = [conv2d(x, paths['p1']), conv2d(x, paths['p3']), conv2d(x, paths['p5']),
            conv2d(pooled, paths['pp'])]
    return concat(outs, axis=1)
