# (c) 2016 Anaconda, Inc. / https://anaconda.com
# All Rights Reserved
#
# stv is distributed under the terms of the BSD 3-clause license.
# Consult LICENSE.txt or http://opensource.org/licenses/BSD-3-Clause.

"""
Declarative network specifications, their parameter-bound networks, and the
builders of the four architectures (CCM, TBE-lite, HaarNet-lite, CFR).

A ``NetworkSpec`` is an ordered list of ``LayerSpec`` nodes.  Each node
names its inputs (spec inputs or earlier nodes), an optional ``share``
target whose parameters it aliases, and a ``group`` used by stage plans.
The whole shape chain is inferred (and validated) when a ``NetworkSpec`` is
created, before any parameter is allocated.
"""
from __future__ import absolute_import, division, print_function

from collections import OrderedDict, namedtuple
from contextlib import contextmanager
from fnmatch import fnmatch
import logging

import numpy as np

from . import layers as L
from .exceptions import GeometryError, LayerConfigError, ShapeError, SpecError
from .tensor import (as_tensor, concat, getitem, hadamard_mul, l2_normalize, relu,
                     reshape, softmax)
from .utils import dump_yaml, sha256_text, yaml

logger = logging.getLogger(__name__)

SPEC_KINDS = ('conv2d', 'deconv2d', 'maxpool2d', 'maxunpool2d', 'batchnorm2d', 'dropout',
              'relu', 'fully_connected', 'l2norm', 'softmax', 'concat', 'subtract_merge',
              'inception_lite', 'crop', 'haar_region', 'hadamard', 'flatten', 'reshape')
PARAMETERIZED = frozenset(['conv2d', 'deconv2d', 'fully_connected', 'batchnorm2d',
                           'inception_lite'])
# layers counted by the complexity accountant
COUNTED_KINDS = frozenset(['conv2d', 'deconv2d', 'fully_connected', 'inception_lite',
                           'maxpool2d', 'maxunpool2d', 'subtract_merge', 'hadamard', 'concat'])
HAAR_ARITY = {'two_rect_horizontal': 2, 'two_rect_vertical': 2, 'four_rect_checker': 4}

ComplexityReport = namedtuple('ComplexityReport', ['n_operations', 'n_parameters', 'n_layers'])


class LayerSpec(namedtuple('LayerSpec', ['name', 'kind', 'inputs', 'attrs', 'group', 'share'])):
    __slots__ = ()

    def __new__(cls, name, kind, inputs, attrs=None, group='main', share=None):
        if kind not in SPEC_KINDS:
            raise SpecError("layer '%s': unknown kind '%s'" % (name, kind))
        if isinstance(inputs, str):
            inputs = [inputs]
        return super(LayerSpec, cls).__new__(cls, str(name), kind, list(inputs),
                                             dict(attrs or {}), str(group), share)

    def dependencies(self):
        deps = list(self.inputs)
        if self.kind == 'maxunpool2d':
            deps.append(self.attrs['indices'])
        return deps

    def to_dict(self):
        d = OrderedDict([('name', self.name), ('kind', self.kind), ('inputs', self.inputs)])
        if self.attrs:
            d['attrs'] = dict(self.attrs)
        d['group'] = self.group
        if self.share:
            d['share'] = self.share
        return dict(d)


def _prod(shape):
    return int(np.prod(shape)) if len(shape) else 1


def _map_shape(layer, shape):
    if len(shape) != 3:
        raise SpecError("layer '%s' (%s) needs a [channels, rows, cols] input, got %s"
                        % (layer.name, layer.kind, list(shape)))
    return shape


def _region_box(pattern, region, rows, cols):
    hh, hw = rows // 2, cols // 2
    boxes = {
        'two_rect_horizontal': [(0, 0, rows, hw), (0, cols - hw, rows, hw)],
        'two_rect_vertical': [(0, 0, hh, cols), (rows - hh, 0, hh, cols)],
        'four_rect_checker': [(0, 0, hh, hw), (0, cols - hw, hh, hw),
                              (rows - hh, cols - hw, hh, hw), (rows - hh, 0, hh, hw)],
    }
    if pattern not in boxes:
        raise SpecError("unknown Haar pattern '%s'" % pattern)
    if not 0 <= region < len(boxes[pattern]):
        raise SpecError("pattern %s has no region %r" % (pattern, region))
    return boxes[pattern][region]


def _crop_box(attrs, rows, cols):
    r, c = attrs['rows'], attrs['cols']
    top = attrs.get('top', (rows - r) // 2)
    left = attrs.get('left', (cols - c) // 2)
    if top < 0 or left < 0 or r < 1 or c < 1 or top + r > rows or left + c > cols:
        raise GeometryError("crop box (%d, %d, %d, %d) outside %dx%d map"
                            % (top, left, r, c, rows, cols))
    return top, left, r, c


def _infer_layer(layer, shapes):
    """Output shape, parameter shapes and multiply-accumulates of one layer."""
    ins = [shapes[i] for i in layer.inputs]
    a = layer.attrs
    kind = layer.kind
    params = OrderedDict()
    macs = 0
    if kind not in ('concat', 'subtract_merge', 'hadamard') and len(ins) != 1:
        raise SpecError("layer '%s' (%s) takes one input, got %d" % (layer.name, kind, len(ins)))
    if kind == 'conv2d':
        c, h, w = _map_shape(layer, ins[0])
        f, k = a['filters'], a['kernel']
        s, p = a.get('stride', 1), a.get('padding', 0)
        out = (f, L.conv_output_extent(h, k, s, p), L.conv_output_extent(w, k, s, p))
        params['weight'] = (f, c, k, k)
        params['bias'] = (f,)
        macs = _prod(out) * c * k * k
    elif kind == 'deconv2d':
        c, h, w = _map_shape(layer, ins[0])
        f, k = a['filters'], a['kernel']
        s, p = a.get('stride', 1), a.get('padding', 0)
        out = (f, L.deconv_output_extent(h, k, s, p), L.deconv_output_extent(w, k, s, p))
        params['weight'] = (c, f, k, k)
        params['bias'] = (f,)
        macs = h * w * c * f * k * k
    elif kind == 'maxpool2d':
        c, h, w = _map_shape(layer, ins[0])
        win, s, p = a['window'], a.get('stride', a['window']), a.get('padding', 0)
        out = (c, L.pool_output_extent(h, win, s, p), L.pool_output_extent(w, win, s, p))
    elif kind == 'maxunpool2d':
        src = a['indices']
        if src not in shapes['__pools__']:
            raise SpecError("layer '%s': unpool indices must come from an earlier maxpool2d, "
                            "got '%s'" % (layer.name, src))
        pooled, target = shapes['__pools__'][src]
        if tuple(ins[0]) != tuple(pooled):
            raise SpecError("layer '%s': decoder shape %s does not match encoder pool %s"
                            % (layer.name, list(ins[0]), list(pooled)))
        out = target
    elif kind == 'batchnorm2d':
        out = _map_shape(layer, ins[0])
        params['gamma'] = (out[0],)
        params['beta'] = (out[0],)
    elif kind in ('dropout', 'relu'):
        out = ins[0]
    elif kind in ('l2norm', 'softmax'):
        out = ins[0]
        if len(out) != 1:
            raise SpecError("layer '%s' (%s) needs a flat input" % (layer.name, kind))
    elif kind == 'flatten':
        out = (_prod(ins[0]),)
    elif kind == 'reshape':
        out = tuple(a['shape'])
        if _prod(out) != _prod(ins[0]):
            raise SpecError("layer '%s': cannot reshape %s to %s"
                            % (layer.name, list(ins[0]), list(out)))
    elif kind == 'fully_connected':
        n_in = _prod(ins[0])
        out = (a['units'],)
        params['weight'] = (a['units'], n_in)
        params['bias'] = (a['units'],)
        macs = n_in * a['units']
    elif kind == 'inception_lite':
        c, h, w = _map_shape(layer, ins[0])
        try:
            widths = L.inception_split(a.get('filters'), a.get('paths'))
        except LayerConfigError as e:
            raise SpecError("layer '%s': %s" % (layer.name, e))
        for key, width, k in zip(('p1', 'p3', 'p5', 'pp'), widths, (1, 3, 5, 1)):
            params[key + '.weight'] = (width, c, k, k)
            params[key + '.bias'] = (width,)
            macs += h * w * width * c * k * k
        out = (sum(widths), h, w)
    elif kind == 'crop':
        c, h, w = _map_shape(layer, ins[0])
        _, _, r, cc = _crop_box(a, h, w)
        out = (c, r, cc)
    elif kind == 'haar_region':
        c, h, w = _map_shape(layer, ins[0])
        _, _, r, cc = _region_box(a['pattern'], a['region'], h, w)
        if r < 1 or cc < 1:
            raise GeometryError("map %dx%d too small for pattern %s" % (h, w, a['pattern']))
        out = (c, r, cc)
    elif kind in ('subtract_merge', 'hadamard'):
        arity = HAAR_ARITY.get(a.get('pattern')) if kind == 'subtract_merge' else 2
        if arity is None:
            raise SpecError("layer '%s': unknown Haar pattern %r" % (layer.name, a.get('pattern')))
        if len(ins) != arity:
            raise SpecError("layer '%s' takes %d inputs, got %d" % (layer.name, arity, len(ins)))
        if any(tuple(s) != tuple(ins[0]) for s in ins):
            raise SpecError("layer '%s': input shapes differ %s"
                            % (layer.name, [list(s) for s in ins]))
        out = ins[0]
        if kind == 'hadamard':
            macs = _prod(out)
    elif kind == 'concat':
        if not ins:
            raise SpecError("layer '%s': nothing to concatenate" % layer.name)
        if all(len(s) == 1 for s in ins):
            out = (sum(s[0] for s in ins),)
        elif all(len(s) == 3 for s in ins) and len(set(tuple(s[1:]) for s in ins)) == 1:
            out = (sum(s[0] for s in ins),) + tuple(ins[0][1:])
        else:
            raise SpecError("layer '%s': cannot concatenate %s"
                            % (layer.name, [list(s) for s in ins]))
    return tuple(int(d) for d in out), params, int(macs)


class NetworkSpec(object):
    """
    Ordered layer graph with named inputs and outputs.  ``outputs`` maps
    roles (``embedding``, ``match``, ``reconstruction``, ``logits.*``...)
    to node names.  Creating a spec infers every node shape; an invalid
    spec raises SpecError or GeometryError.
    """

    def __init__(self, name, arch, inputs, layers, outputs, embedding_dim=None,
                 n_classes=None, shared_prefix=0):
        self.name = name
        self.arch = arch
        self.inputs = OrderedDict((k, tuple(int(d) for d in v)) for k, v in inputs.items())
        self.layers = [l if isinstance(l, LayerSpec) else LayerSpec(**l) for l in layers]
        self.outputs = OrderedDict(outputs)
        self.embedding_dim = embedding_dim
        self.n_classes = n_classes
        self.shared_prefix = int(shared_prefix)
        self._by_name = OrderedDict()
        self._validate()

    def _validate(self):
        shapes = dict(self.inputs)
        pools = {}
        shapes['__pools__'] = pools
        self.shapes = OrderedDict()
        self.param_shapes = OrderedDict()
        self.macs = OrderedDict()
        for layer in self.layers:
            if layer.name in shapes or layer.name in self._by_name:
                raise SpecError("duplicate node name '%s'" % layer.name)
            for dep in layer.dependencies():
                if dep not in shapes:
                    raise SpecError("layer '%s' reads '%s' before it is defined"
                                    % (layer.name, dep))
            try:
                out, params, macs = _infer_layer(layer, shapes)
            except GeometryError as e:
                raise GeometryError("layer '%s': %s" % (layer.name, e))
            if layer.share:
                owner = self._by_name.get(layer.share)
                if owner is None or owner.kind != layer.kind:
                    raise SpecError("layer '%s' shares '%s', which is not an earlier %s layer"
                                    % (layer.name, layer.share, layer.kind))
                if owner.share:
                    raise SpecError("layer '%s' shares an alias; share the owner '%s'"
                                    % (layer.name, owner.share))
                if self.param_shapes.get(owner.name) != params:
                    raise SpecError("layer '%s' cannot share '%s': parameter shapes differ"
                                    % (layer.name, layer.share))
            shapes[layer.name] = out
            if layer.kind == 'maxpool2d':
                pools[layer.name] = (out, shapes[layer.inputs[0]])
            self.shapes[layer.name] = out
            self.macs[layer.name] = macs
            if layer.kind in PARAMETERIZED and not layer.share:
                self.param_shapes[layer.name] = params
            self._by_name[layer.name] = layer
        for role, node in self.outputs.items():
            if node not in self.shapes and node not in self.inputs:
                raise SpecError("output '%s' names unknown node '%s'" % (role, node))
        self._check_haar_merges()
        if self.shared_prefix:
            prefix = self.layers[:self.shared_prefix]
            if (self.shared_prefix > len(self.layers)
                    or any(l.group != 'shared' for l in prefix)
                    or any(l.group == 'shared' for l in self.layers[self.shared_prefix:])):
                raise SpecError("shared_prefix %d does not match the leading 'shared' layers"
                                % self.shared_prefix)

    def _check_haar_merges(self):
        consumers = {}
        for layer in self.layers:
            for dep in layer.dependencies():
                consumers.setdefault(dep, []).append(layer)
        for layer in self.layers:
            if layer.kind != 'haar_region':
                continue
            stack, seen, merged = [layer.name], set(), False
            while stack and not merged:
                for nxt in consumers.get(stack.pop(), ()):
                    if nxt.kind == 'subtract_merge':
                        merged = merged or nxt.attrs.get('pattern') == layer.attrs['pattern']
                    elif nxt.name not in seen:
                        seen.add(nxt.name)
                        stack.append(nxt.name)
            if not merged:
                raise SpecError("split '%s' has no matching %s merge"
                                % (layer.name, layer.attrs['pattern']))

    def layer(self, name):
        try:
            return self._by_name[name]
        except KeyError:
            raise SpecError("no layer named '%s'" % name)

    def shape_of(self, node):
        if node in self.inputs:
            return self.inputs[node]
        return self.shapes[self.layer(node).name]

    def resolve(self, output):
        return self.outputs.get(output, output)

    def needed(self, targets, given=()):
        """Layers required to compute ``targets`` when ``given`` nodes are fed, in order."""
        given = set(given)
        need = set()
        stack = [self.resolve(t) for t in targets]
        while stack:
            node = stack.pop()
            if node in given or node in need:
                continue
            if node in self.inputs:
                raise SpecError("input '%s' is required but was not fed" % node)
            need.add(node)
            stack.extend(self.layer(node).dependencies())
        return [l for l in self.layers if l.name in need]

    def to_dict(self):
        return {
            'name': self.name,
            'arch': self.arch,
            'inputs': dict((k, list(v)) for k, v in self.inputs.items()),
            'layers': [l.to_dict() for l in self.layers],
            'outputs': dict(self.outputs),
            'embedding_dim': self.embedding_dim,
            'n_classes': self.n_classes,
            'shared_prefix': self.shared_prefix,
        }

    def to_yaml(self):
        return dump_yaml(self.to_dict())

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(d['name'], d['arch'], d['inputs'], d['layers'], d['outputs'],
                       embedding_dim=d.get('embedding_dim'), n_classes=d.get('n_classes'),
                       shared_prefix=d.get('shared_prefix', 0))
        except (KeyError, TypeError) as e:
            raise SpecError("malformed network spec: %s" % e)

    @classmethod
    def from_yaml(cls, text):
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as e:
            raise SpecError("cannot parse network spec: %s" % e)
        if not isinstance(data, dict):
            raise SpecError("network spec must be a mapping")
        return cls.from_dict(data)

    def digest(self):
        return sha256_text(self.to_yaml())


def _allocate(layer, in_shape, rng):
    a = layer.attrs
    if layer.kind == 'conv2d':
        return L.conv_params(in_shape[0], a['filters'], a['kernel'], a.get('stride', 1),
                             a.get('padding', 0), rng=rng)
    if layer.kind == 'deconv2d':
        return L.deconv_params(in_shape[0], a['filters'], a['kernel'], a.get('stride', 1),
                               a.get('padding', 0), rng=rng)
    if layer.kind == 'fully_connected':
        return L.fc_params(_prod(in_shape), a['units'], rng=rng)
    if layer.kind == 'batchnorm2d':
        return L.batchnorm_params(in_shape[0])
    return L.inception_params(in_shape[0], a.get('filters'), a.get('paths'), rng=rng)


class Network(object):
    """
    A spec with bound parameters.  ``parameters`` maps every layer's
    parameter names (aliases included) to Tensors; aliased layers map to
    the very same Tensor objects.
    """

    def __init__(self, spec, seed=0):
        self.spec = spec
        self.seed = int(seed)
        self.context = L.TrainingContext(seed)
        rng = np.random.default_rng(self.seed)
        self.layer_params = OrderedDict()
        self.parameters = OrderedDict()
        for layer in spec.layers:
            if layer.kind not in PARAMETERIZED:
                continue
            if layer.share:
                lp = self.layer_params[layer.share]
            else:
                lp = _allocate(layer, spec.shape_of(layer.inputs[0]), rng)
                for pname, t in lp.named_parameters(layer.name + '.'):
                    t.name = pname
            self.layer_params[layer.name] = lp
            for pname, t in lp.named_parameters(layer.name + '.'):
                self.parameters[pname] = t
        logger.debug("built %s: %d parameter names, %d values", spec.name,
                     len(self.parameters), self.n_parameters())

    def __repr__(self):
        return 'Network(%s, %d parameters)' % (self.spec.name, self.n_parameters())

    def unique_parameters(self):
        """Owner name -> Tensor, each distinct Tensor once, in layer order."""
        seen = set()
        out = OrderedDict()
        for t in self.parameters.values():
            if id(t) not in seen:
                seen.add(id(t))
                out[t.name] = t
        return out

    def n_parameters(self):
        return sum(t.size for t in self.unique_parameters().values())

    def parameters_in_groups(self, patterns):
        """Distinct parameter Tensors of layers whose group matches any glob pattern."""
        found = OrderedDict()
        for layer in self.spec.layers:
            if layer.kind not in PARAMETERIZED:
                continue
            if any(fnmatch(layer.group, pat) for pat in patterns):
                for _, t in self.layer_params[layer.name].named_parameters():
                    found[t.name] = t
        return found

    def state_arrays(self):
        """Batchnorm running statistics of owner layers."""
        state = OrderedDict()
        for name, lp in self.layer_params.items():
            if lp.kind == 'batchnorm2d' and not self.spec.layer(name).share:
                state[name + '.running_mean'] = lp.running_mean
                state[name + '.running_var'] = lp.running_var
        return state

    def load_state(self, state):
        for key, arr in state.items():
            layer, _, field = key.rpartition('.')
            lp = self.layer_params.get(layer)
            if lp is None or field not in ('running_mean', 'running_var'):
                raise SpecError("unknown state entry '%s'" % key)
            if np.shape(arr) != np.shape(getattr(lp, field)):
                raise ShapeError('load_state', np.shape(getattr(lp, field)), np.shape(arr))
            setattr(lp, field, np.array(arr, dtype=np.float64))

    def train(self):
        self.context.mode = 'train'

    def eval(self):
        self.context.mode = 'eval'

    @contextmanager
    def evaluating(self):
        previous = self.context.mode
        self.context.mode = 'eval'
        try:
            yield self
        finally:
            self.context.mode = previous

    def _check_feed(self, name, t):
        if name in self.spec.inputs:
            want = self.spec.inputs[name]
            if tuple(t.data.shape[1:]) != want:
                raise GeometryError("input '%s' has geometry %s, network %s expects %s"
                                    % (name, list(t.data.shape[1:]), self.spec.name, list(want)))
        else:
            want = self.spec.shape_of(name)
            if tuple(t.data.shape[1:]) != tuple(want):
                raise ShapeError('forward', t.data.shape[1:], want, detail="feed '%s'" % name)

    def forward(self, feeds, outputs):
        """
        Evaluate ``outputs`` (roles or node names) from ``feeds`` (node name
        -> batched Tensor).  Any node may be fed; only the layers the
        outputs depend on run.
        """
        values = {}
        for name, t in feeds.items():
            t = as_tensor(t)
            self._check_feed(name, t)
            values[name] = t
        targets = [self.spec.resolve(o) for o in outputs]
        pools = {}
        for layer in self.spec.needed(targets, given=values.keys()):
            values[layer.name] = self._apply(layer, [values[i] for i in layer.inputs], pools)
        return OrderedDict((o, values[t]) for o, t in zip(outputs, targets))

    def _apply(self, layer, args, pools):
        kind, a = layer.kind, layer.attrs
        ctx = self.context
        x = args[0]
        if kind == 'conv2d':
            return L.conv2d(x, self.layer_params[layer.name])
        if kind == 'deconv2d':
            return L.deconv2d(x, self.layer_params[layer.name])
        if kind == 'batchnorm2d':
            return L.batchnorm2d(x, self.layer_params[layer.name], mode=ctx.mode,
                                 update_stats=ctx.update_stats)
        if kind == 'inception_lite':
            return L.inception_lite(x, self.layer_params[layer.name])
        if kind == 'fully_connected':
            return L.fully_connected(x, self.layer_params[layer.name])
        if kind == 'maxpool2d':
            out, idx = L.maxpool2d(x, a['window'], a.get('stride', a['window']),
                                   a.get('padding', 0))
            pools[layer.name] = (idx, x.data.shape)
            return out
        if kind == 'maxunpool2d':
            idx, target = pools[a['indices']]
            return L.maxunpool2d(x, idx, target)
        if kind == 'dropout':
            return L.dropout(x, a.get('p', L.DROPOUT_P), rng=ctx.rng, mode=ctx.mode)
        if kind == 'relu':
            return relu(x)
        if kind == 'l2norm':
            return l2_normalize(x)
        if kind == 'softmax':
            return softmax(x)
        if kind == 'flatten':
            return reshape(x, (x.data.shape[0], -1))
        if kind == 'reshape':
            return reshape(x, (x.data.shape[0],) + tuple(a['shape']))
        if kind == 'crop':
            top, left, r, c = _crop_box(a, x.shape[2], x.shape[3])
            return L.crop(x, top, left, r, c)
        if kind == 'haar_region':
            top, left, r, c = _region_box(a['pattern'], a['region'], x.shape[2], x.shape[3])
            return L.crop(x, top, left, r, c)
        if kind == 'subtract_merge':
            return L.haar_split_merge(args, a['pattern'])
        if kind == 'hadamard':
            return hadamard_mul(args[0], args[1])
        if kind == 'concat':
            return concat(args, axis=1)
        raise SpecError("cannot evaluate layer kind '%s'" % kind)


# ----- builders

class _Builder(object):

    def __init__(self):
        self.layers = []

    def add(self, name, kind, inputs, group, share=None, **attrs):
        self.layers.append(LayerSpec(name, kind, inputs, attrs, group, share))
        return name

    def shape_of(self, node, inputs):
        """Inferred shape of ``node`` given the layers added so far."""
        partial = NetworkSpec('partial', 'partial', inputs, self.layers, {'node': node})
        return partial.shape_of(node)

    def conv_block(self, name, src, group, filters, kernel, padding=0, bn=True, dropout=0.0,
                   activate=True, share=None):
        """conv -> [batchnorm] -> [dropout] -> [relu]; ``share`` names the owner's prefix."""
        owner = (lambda suffix: share + suffix) if share else (lambda suffix: None)
        src = self.add(name, 'conv2d', src, group, owner(''), filters=filters, kernel=kernel,
                       padding=padding)
        if bn:
            src = self.add(name + '.bn', 'batchnorm2d', src, group, owner('.bn'))
        if dropout:
            src = self.add(name + '.drop', 'dropout', src, group, p=dropout)
        if activate:
            src = self.add(name + '.relu', 'relu', src, group)
        return src


def _resolve(defaults, scale, overrides):
    try:
        cfg = dict(defaults[scale])
    except KeyError:
        raise SpecError("unknown scale '%s' (use %s)" % (scale, ', '.join(sorted(defaults))))
    for key, value in overrides.items():
        if value is None:
            continue
        if key not in cfg:
            raise SpecError("unknown spec override '%s'" % key)
        cfg[key] = value
    return cfg


CCM_SCALES = {
    'full': dict(input_shape=(3, 120, 96), n_convs=9, filters=64, kernel=5, pool_window=3,
                 pool_stride=2, crop=(56, 44), hidden=128, dropout=0.3),
    'desk': dict(input_shape=(1, 48, 40), n_convs=5, filters=16, kernel=5, pool_window=2,
                 pool_stride=2, crop=None, hidden=32, dropout=0.3),
}


def ccm_spec(scale='desk', **overrides):
    """
    Three Siamese branches (T still, P positive, N negative) sharing one
    set of weights, and a matching head applied to the (T, P), (T, N) and
    (N, P) pairs.  Head class 0 is "match".
    """
    cfg = _resolve(CCM_SCALES, scale, overrides)
    if cfg['n_convs'] < 1:
        raise SpecError("ccm needs at least one convolution")
    b = _Builder()
    outputs = OrderedDict()
    for role in ('t', 'p', 'n'):
        src = role
        for i in range(1, cfg['n_convs'] + 1):
            name = '%s.conv%d' % (role, i)
            share = None if role == 't' else 't.conv%d' % i
            src = b.conv_block(name, src, 'branch', cfg['filters'], cfg['kernel'],
                               dropout=cfg['dropout'], activate=i < cfg['n_convs'], share=share)
            if i == 1:
                src = b.add(role + '.pool1', 'maxpool2d', src, 'branch',
                            window=cfg['pool_window'], stride=cfg['pool_stride'])
                if cfg['crop']:
                    src = b.add(role + '.crop1', 'crop', src, 'branch', rows=cfg['crop'][0],
                                cols=cfg['crop'][1])
        outputs['map_' + role] = src
    for pair in ('tp', 'tn', 'np'):
        share = (lambda n: None) if pair == 'tp' else (lambda n: 'tp.' + n)
        src = b.add(pair + '.sim', 'hadamard', [outputs['map_' + pair[0]],
                                                outputs['map_' + pair[1]]], 'head')
        src = b.add(pair + '.flat', 'flatten', src, 'head')
        src = b.add(pair + '.fc1', 'fully_connected', src, 'head', share('fc1'),
                    units=cfg['hidden'])
        src = b.add(pair + '.relu', 'relu', src, 'head')
        logits = b.add(pair + '.fc2', 'fully_connected', src, 'head', share('fc2'), units=2)
        outputs['s_' + pair] = b.add(pair + '.prob', 'softmax', logits, 'head')
    outputs['match'] = 'tp.prob'
    outputs['logits'] = 'tp.fc2'
    shape = list(cfg['input_shape'])
    return NetworkSpec('ccm-%s' % scale, 'ccm', OrderedDict([('t', shape), ('p', shape),
                                                            ('n', shape)]),
                       b.layers, outputs)


TBE_SCALES = {
    'full': dict(input_shape=(3, 120, 96), stem=64, trunk=(128, 256), branch=64,
                 n_branches=5, embedding_dim=256, n_classes=1000),
    'desk': dict(input_shape=(1, 48, 40), stem=8, trunk=(16, 16), branch=8,
                 n_branches=3, embedding_dim=64, n_classes=8),
}
# branch patches: quadrants of the shared feature map, in reading order
TBE_PATCHES = ('top_left', 'top_right', 'bottom_left', 'bottom_right')


def tbe_lite_spec(scale='desk', **overrides):
    """
    Trunk-branch ensemble: a shared stem, a trunk over the whole ROI and
    branches over fixed grid patches of the stem output, concatenated into
    one L2-normalized embedding.  Branch 0 is the trunk.
    """
    cfg = _resolve(TBE_SCALES, scale, overrides)
    nb = cfg['n_branches']
    if not 1 <= nb <= len(TBE_PATCHES) + 1:
        raise SpecError("tbe n_branches must be in [1, %d], got %r"
                        % (len(TBE_PATCHES) + 1, nb))
    b = _Builder()
    src = b.conv_block('conv1', 'x', 'shared', cfg['stem'], 3, padding=1)
    stem = b.add('pool1', 'maxpool2d', src, 'shared', window=2)
    shared_prefix = len(b.layers)
    outputs = OrderedDict()

    src = stem
    for i, width in enumerate(cfg['trunk'], 2):
        src = b.conv_block('trunk.conv%d' % i, src, 'trunk', width, 3, padding=1)
        src = b.add('trunk.pool%d' % i, 'maxpool2d', src, 'trunk', window=2)
    features = [b.add('trunk.flat', 'flatten', src, 'trunk')]
    b.add('aux.trunk.fc', 'fully_connected', features[0], 'aux.trunk', units=cfg['n_classes'])
    outputs['logits.trunk'] = 'aux.trunk.fc'

    _, rows, cols = b.shape_of(stem, {'x': cfg['input_shape']})
    for i in range(1, nb):
        group = 'branch%d' % i
        top = 0 if TBE_PATCHES[i - 1].startswith('top') else rows - rows // 2
        left = 0 if TBE_PATCHES[i - 1].endswith('left') else cols - cols // 2
        src = b.add(group + '.patch', 'crop', stem, group, top=top, left=left,
                    rows=rows // 2, cols=cols // 2)
        src = b.conv_block(group + '.conv', src, group, cfg['branch'], 3, padding=1)
        src = b.add(group + '.pool', 'maxpool2d', src, group, window=2)
        flat = b.add(group + '.flat', 'flatten', src, group)
        b.add('aux.%s.fc' % group, 'fully_connected', flat, 'aux.' + group,
              units=cfg['n_classes'])
        outputs['logits.' + group] = 'aux.%s.fc' % group
        features.append(flat)

    src = b.add('head.concat', 'concat', features, 'head') if len(features) > 1 else features[0]
    src = b.add('head.fc', 'fully_connected', src, 'head', units=cfg['embedding_dim'])
    outputs['embedding'] = outputs['match'] = b.add('embedding', 'l2norm', src, 'head')
    b.add('aux.head.fc', 'fully_connected', 'embedding', 'aux.head', units=cfg['n_classes'])
    outputs['logits.full'] = 'aux.head.fc'
    return NetworkSpec('tbe-%s' % scale, 'tbe', {'x': list(cfg['input_shape'])}, b.layers,
                       outputs, embedding_dim=cfg['embedding_dim'], n_classes=cfg['n_classes'],
                       shared_prefix=shared_prefix)


HAARNET_SCALES = {
    'full': dict(input_shape=(3, 120, 96), stem=(64, 128), trunk=(256, 256, 512, 512),
                 branch=128, embedding_dim=512, n_classes=1000),
    'desk': dict(input_shape=(1, 48, 40), stem=(8, 16), trunk=(16, 16, 16, 16),
                 branch=8, embedding_dim=64, n_classes=8),
}
HAARNET_BRANCHES = (
    ('branch1', 'two_rect_horizontal', 2),
    ('branch2', 'two_rect_vertical', 2),
    ('branch3', 'four_rect_checker', 1),
)


def haarnet_lite_spec(scale='desk', **overrides):
    """
    Trunk of inception-lite blocks plus three Haar-like branches.  All of
    them read the output of the shared conv1/conv2 stem; each branch cuts
    that map into the rectangles of its Haar pattern, runs inception-lite
    sub-branches on each rectangle, and merges them by signed subtraction.
    """
    cfg = _resolve(HAARNET_SCALES, scale, overrides)
    b = _Builder()
    src = b.conv_block('conv1', 'x', 'shared', cfg['stem'][0], 3, padding=1)
    src = b.add('pool1', 'maxpool2d', src, 'shared', window=2)
    stem = b.conv_block('conv2', src, 'shared', cfg['stem'][1], 3, padding=1)
    shared_prefix = len(b.layers)
    outputs = OrderedDict()

    src = b.add('trunk.pool1', 'maxpool2d', stem, 'trunk', window=2)
    for i, width in enumerate(cfg['trunk'], 1):
        src = b.add('trunk.inc%d' % i, 'inception_lite', src, 'trunk', filters=width)
        src = b.add('trunk.inc%d.relu' % i, 'relu', src, 'trunk')
        if i == len(cfg['trunk']) // 2:
            src = b.add('trunk.pool2', 'maxpool2d', src, 'trunk', window=2)
    features = [b.add('trunk.flat', 'flatten', src, 'trunk')]
    b.add('aux.trunk.fc', 'fully_connected', features[0], 'aux.trunk', units=cfg['n_classes'])
    outputs['logits.trunk'] = 'aux.trunk.fc'

    for group, pattern, depth in HAARNET_BRANCHES:
        subs = []
        for region in range(HAAR_ARITY[pattern]):
            name = '%s.r%d' % (group, region)
            src = b.add(name, 'haar_region', stem, group, pattern=pattern, region=region)
            src = b.add(name + '.pool', 'maxpool2d', src, group, window=2)
            for j in range(1, depth + 1):
                src = b.add('%s.inc%d' % (name, j), 'inception_lite', src, group,
                            filters=cfg['branch'])
                src = b.add('%s.inc%d.relu' % (name, j), 'relu', src, group)
            subs.append(src)
        merged = b.add(group + '.merge', 'subtract_merge', subs, group, pattern=pattern)
        flat = b.add(group + '.flat', 'flatten', merged, group)
        b.add('aux.%s.fc' % group, 'fully_connected', flat, 'aux.' + group,
              units=cfg['n_classes'])
        outputs['logits.' + group] = 'aux.%s.fc' % group
        features.append(flat)

    src = b.add('head.concat', 'concat', features, 'head')
    src = b.add('head.fc', 'fully_connected', src, 'head', units=cfg['embedding_dim'])
    outputs['embedding'] = outputs['match'] = b.add('embedding', 'l2norm', src, 'head')
    b.add('aux.head.fc', 'fully_connected', 'embedding', 'aux.head', units=cfg['n_classes'])
    outputs['logits.full'] = 'aux.head.fc'
    return NetworkSpec('haarnet-%s' % scale, 'haarnet', {'x': list(cfg['input_shape'])},
                       b.layers, outputs, embedding_dim=cfg['embedding_dim'],
                       n_classes=cfg['n_classes'], shared_prefix=shared_prefix)


CFR_SCALES = {
    'full': dict(input_shape=(3, 120, 96), filters=(32, 64, 128), embedding_dim=256,
                 hidden=128),
    'desk': dict(input_shape=(1, 48, 40), filters=(8, 16, 16), embedding_dim=64, hidden=32),
}


def cfr_autoencoder_spec(scale='desk', **overrides):
    """
    Encoder of three conv+pool stages and a fully-connected embedding; the
    decoder maps the embedding back through a fully-connected layer and
    three unpool+deconvolution stages, unpooling at the encoder's argmax
    positions.
    """
    cfg = _resolve(CFR_SCALES, scale, overrides)
    b = _Builder()
    src = 'x'
    pools = []
    channels = [cfg['input_shape'][0]]
    for i, width in enumerate(cfg['filters'], 1):
        src = b.conv_block('enc.conv%d' % i, src, 'encoder', width, 3, padding=1, bn=False)
        src = b.add('enc.pool%d' % i, 'maxpool2d', src, 'encoder', window=2)
        pools.append(src)
        channels.append(width)
    flat = b.add('enc.flat', 'flatten', src, 'encoder')
    embedding = b.add('embedding', 'fully_connected', flat, 'encoder',
                      units=cfg['embedding_dim'])

    c, h, w = b.shape_of(pools[-1], {'x': cfg['input_shape']})
    src = b.add('dec.fc', 'fully_connected', embedding, 'decoder', units=c * h * w)
    src = b.add('dec.fc.relu', 'relu', src, 'decoder')
    src = b.add('dec.reshape', 'reshape', src, 'decoder', shape=[c, h, w])
    for i in range(len(pools), 0, -1):
        src = b.add('dec.unpool%d' % i, 'maxunpool2d', src, 'decoder', indices=pools[i - 1])
        src = b.add('dec.deconv%d' % i, 'deconv2d', src, 'decoder', filters=channels[i - 1],
                    kernel=3, padding=1)
        if i > 1:
            src = b.add('dec.deconv%d.relu' % i, 'relu', src, 'decoder')
    outputs = OrderedDict([('embedding', embedding), ('match', embedding),
                           ('reconstruction', src)])
    return NetworkSpec('cfr-%s' % scale, 'cfr', {'x': list(cfg['input_shape'])}, b.layers,
                       outputs, embedding_dim=cfg['embedding_dim'])


def cfr_classifier_spec(scale='desk', **overrides):
    """Pair classifier over concatenated (still, video) embeddings; class 0 is "match"."""
    cfg = _resolve(CFR_SCALES, scale, overrides)
    d = cfg['embedding_dim']
    b = _Builder()
    src = b.add('pair.concat', 'concat', ['still', 'video'], 'classifier')
    src = b.add('cls.fc1', 'fully_connected', src, 'classifier', units=cfg['hidden'])
    src = b.add('cls.fc1.relu', 'relu', src, 'classifier')
    logits = b.add('cls.fc2', 'fully_connected', src, 'classifier', units=2)
    prob = b.add('prob', 'softmax', logits, 'classifier')
    return NetworkSpec('cfr-classifier-%s' % scale, 'cfr_classifier',
                       OrderedDict([('still', [d]), ('video', [d])]), b.layers,
                       OrderedDict([('match', prob), ('logits', logits)]), embedding_dim=d)


SPEC_BUILDERS = {
    'ccm': ccm_spec,
    'tbe': tbe_lite_spec,
    'haarnet': haarnet_lite_spec,
    'cfr': cfr_autoencoder_spec,
    'cfr_classifier': cfr_classifier_spec,
}

SCALE_TABLES = {
    'ccm': CCM_SCALES,
    'tbe': TBE_SCALES,
    'haarnet': HAARNET_SCALES,
    'cfr': CFR_SCALES,
    'cfr_classifier': CFR_SCALES,
}


def override_keys(arch, scale='desk'):
    """Names a builder accepts as overrides for ``arch`` at ``scale``."""
    try:
        return set(SCALE_TABLES[arch][scale])
    except KeyError:
        raise SpecError("unknown architecture or scale '%s/%s'" % (arch, scale))


def build_spec(arch, scale='desk', **overrides):
    try:
        builder = SPEC_BUILDERS[arch]
    except KeyError:
        raise SpecError("unknown architecture '%s' (use %s)"
                        % (arch, ', '.join(sorted(SPEC_BUILDERS))))
    return builder(scale, **overrides)


def build_ccm(seed=0, scale='desk', **overrides):
    return Network(ccm_spec(scale, **overrides), seed)


def build_tbe_lite(seed=0, scale='desk', **overrides):
    return Network(tbe_lite_spec(scale, **overrides), seed)


def build_haarnet_lite(seed=0, scale='desk', **overrides):
    return Network(haarnet_lite_spec(scale, **overrides), seed)


def build_cfr_autoencoder(seed=0, scale='desk', **overrides):
    return Network(cfr_autoencoder_spec(scale, **overrides), seed)


def build_cfr_classifier(seed=0, scale='desk', **overrides):
    return Network(cfr_classifier_spec(scale, **overrides), seed)


# ----- forward helpers

def _batched(net, roi, input_name):
    roi = as_tensor(roi)
    if roi.ndim == len(net.spec.inputs[input_name]):
        roi = reshape(roi, (1,) + tuple(roi.data.shape))
    return roi


def forward_embed(net, roi):
    """Eval-mode embedding of one ROI ``[C, H, W]`` or a batch ``[B, C, H, W]``."""
    if 'embedding' not in net.spec.outputs or 'x' not in net.spec.inputs:
        raise SpecError("network %s does not produce embeddings" % net.spec.name)
    with net.evaluating():
        return net.forward({'x': _batched(net, roi, 'x')}, ['embedding'])['embedding']


def forward_reconstruct(net, roi):
    if 'reconstruction' not in net.spec.outputs:
        raise SpecError("network %s is not an autoencoder" % net.spec.name)
    with net.evaluating():
        out = net.forward({'x': _batched(net, roi, 'x')}, ['embedding', 'reconstruction'])
    return out['embedding'], out['reconstruction']


def ccm_feature_maps(net, rois, role='t'):
    """Branch output maps of a CCM network for a batch of ROIs."""
    with net.evaluating():
        return net.forward({role: _batched(net, rois, role)}, ['map_' + role])['map_' + role]


def ccm_match(t_map, p_map, head):
    """
    Match / non-match probabilities of the CCM head for a pair of branch
    maps (single ``[C, H, W]`` maps or aligned batches).
    """
    t_map, p_map = as_tensor(t_map), as_tensor(p_map)
    if t_map.data.shape != p_map.data.shape:
        raise ShapeError('ccm_match', t_map.data.shape, p_map.data.shape)
    spec = head.spec
    t_node, p_node = spec.outputs['map_t'], spec.outputs['map_p']
    if t_map.ndim == len(spec.shape_of(t_node)):
        t_map = reshape(t_map, (1,) + tuple(t_map.data.shape))
        p_map = reshape(p_map, (1,) + tuple(p_map.data.shape))
    with head.evaluating():
        prob = head.forward({t_node: t_map, p_node: p_map}, ['match'])['match']
    return getitem(prob, (slice(None), 0)), getitem(prob, (slice(None), 1))


def complexity_of(net):
    """
    Multiply-accumulates, distinct parameters and counted layers on the
    path that matches one probe ROI against one still ROI (the ``match``
    output).  Auxiliary heads and decoders are not on that path.
    """
    spec = net.spec if isinstance(net, Network) else net
    if 'match' not in spec.outputs:
        return ComplexityReport(0, 0, 0)
    path = spec.needed([spec.outputs['match']], given=spec.inputs.keys())
    n_ops = sum(spec.macs[l.name] for l in path)
    n_layers = sum(1 for l in path if l.kind in COUNTED_KINDS)
    owners = []
    for l in path:
        if l.kind in PARAMETERIZED:
            owner = l.share or l.name
            if owner not in owners:
                owners.append(owner)
    n_params = sum(_prod(shape) for owner in owners
                   for shape in spec.param_shapes[owner].values())
    return ComplexityReport(int(n_ops), int(n_params), int(n_layers))
