# (c) 2016 Anaconda, Inc. / https://anaconda.com
# All Rights Reserved
#
# stv is distributed under the terms of the BSD 3-clause license.
# Consult LICENSE.txt or http://opensource.org/licenses/BSD-3-Clause.

"""
Dense float64 tensors with tape-based reverse-mode differentiation.

Every operation that receives at least one input with ``requires_grad`` set
records a ``Node`` (operation kind, inputs, vector-Jacobian product).  Nodes
carry a global recording sequence number, so the nodes reachable from a loss
sorted by that number form the topologically ordered tape (``Graph``) that
``backward`` walks in reverse.
"""
from __future__ import absolute_import, division, print_function

from contextlib import contextmanager
import itertools
import threading

import numpy as np

from .exceptions import (DataError, DegenerateInputError, DomainError, GraphError,
                         ShapeError)

DTYPE = np.float64
NORM_EPS = 1e-12
TENSOR_MAGIC = b'TENSOR'
TENSOR_VERSION = b'v1'

_sequence = itertools.count()
_grad_state = threading.local()


def is_grad_enabled():
    return getattr(_grad_state, 'enabled', True)


@contextmanager
def no_grad():
    """Suppress graph recording inside the block (evaluation passes)."""
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


class Node(object):
    __slots__ = ('seq', 'kind', 'inputs', 'output', 'vjp')

    def __init__(self, kind, inputs, output, vjp):
        self.seq = next(_sequence)
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.vjp = vjp

    def __repr__(self):
        return 'Node(%d, %s)' % (self.seq, self.kind)


class Tensor(object):

    __array_priority__ = 100
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=DTYPE)
        if any(d < 1 for d in arr.shape):
            raise ShapeError('tensor', arr.shape, detail='extents must be >= 1')
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None
        self.name = name

    @classmethod
    def _wrap(cls, arr, requires_grad):
        t = cls.__new__(cls)
        arr = np.ascontiguousarray(arr, dtype=DTYPE)
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.node = None
        t.name = None
        return t

    @classmethod
    def full(cls, shape, value):
        return cls(np.full(tuple(shape), value, dtype=DTYPE))

    @property
    def shape(self):
        return list(self.data.shape)

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return int(self.data.size)

    @property
    def flat(self):
        return self.data.ravel()

    @property
    def is_leaf(self):
        return self.node is None

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ShapeError('item', self.data.shape, detail='expected a single element')
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor._wrap(self.data, False)

    def assign(self, arr):
        """Rebind the values of a leaf parameter (optimizer updates, loading)."""
        arr = np.array(arr, dtype=DTYPE)
        if arr.shape != self.data.shape:
            raise ShapeError('assign', self.data.shape, arr.shape)
        arr.flags.writeable = False
        self.data = arr

    def __repr__(self):
        label = ' name=%s' % self.name if self.name else ''
        return 'Tensor(shape=%s%s, requires_grad=%s)' % (self.shape, label, self.requires_grad)

    def __len__(self):
        return self.data.shape[0]

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return shift(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return shift(self, -other)

    def __rsub__(self, other):
        return shift(scale(self, -1.0), other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return hadamard_mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None):
        return tensor_sum(self, axis)

    def mean(self, axis=None):
        return tensor_mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (list, tuple)):
            shape = shape[0]
        return reshape(self, shape)


def as_tensor(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def record(kind, inputs, out, vjp):
    """
    Wrap ``out`` as a Tensor and, when any input requires a gradient and
    recording is enabled, attach a tape node whose ``vjp`` maps the output
    gradient to one gradient (or None) per input.
    """
    needs = is_grad_enabled() and any(t.requires_grad for t in inputs)
    result = Tensor._wrap(out, needs)
    if needs:
        result.node = Node(kind, tuple(inputs), result, vjp)
    return result


class Graph(object):
    """The recorded tape reachable from one output, in recording order."""

    def __init__(self, nodes):
        self.nodes = sorted(nodes, key=lambda n: n.seq)
        self._outputs = set(id(n.output) for n in self.nodes)

    @classmethod
    def trace(cls, output):
        if output.node is None:
            return cls([])
        seen = {}
        stack = [output.node]
        while stack:
            node = stack.pop()
            if node.seq in seen:
                continue
            seen[node.seq] = node
            for t in node.inputs:
                if t.node is not None and t.node.seq not in seen:
                    stack.append(t.node)
        return cls(seen.values())

    def __contains__(self, tensor):
        return id(tensor) in self._outputs

    def __len__(self):
        return len(self.nodes)

    def leaves(self):
        found = []
        ids = set()
        for node in self.nodes:
            for t in node.inputs:
                if t.node is None and t.requires_grad and id(t) not in ids:
                    ids.add(id(t))
                    found.append(t)
        return found


def backward(loss, graph=None):
    """
    Propagate d(loss)/d(leaf) through the tape.  Leaf ``grad`` slots
    accumulate across calls; the returned dict holds this call's gradients
    keyed by leaf tensor.
    """
    if loss.data.size != 1:
        raise GraphError("backward: loss must be a scalar, got shape %s" % loss.shape)
    if graph is None:
        graph = Graph.trace(loss)
    if loss.node is None:
        if not loss.requires_grad:
            raise GraphError("backward: loss is not part of a recorded graph")
        grad = np.ones_like(loss.data)
        _accumulate_leaf(loss, grad)
        return {loss: grad}
    if loss not in graph:
        raise GraphError("backward: loss is not a node of the supplied graph")

    grads = {id(loss): np.ones_like(loss.data)}
    leaf_grads = {}
    leaf_order = []
    for node in reversed(graph.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        input_grads = node.vjp(g)
        for inp, gi in zip(node.inputs, input_grads):
            if gi is None or not inp.requires_grad:
                continue
            gi = np.asarray(gi, dtype=DTYPE).reshape(inp.data.shape)
            if inp.node is None:
                if id(inp) in leaf_grads:
                    leaf_grads[id(inp)] = leaf_grads[id(inp)] + gi
                else:
                    leaf_grads[id(inp)] = gi
                    leaf_order.append(inp)
            elif id(inp) in grads:
                grads[id(inp)] = grads[id(inp)] + gi
            else:
                grads[id(inp)] = gi

    result = {}
    for leaf in leaf_order:
        g = leaf_grads[id(leaf)]
        _accumulate_leaf(leaf, g)
        result[leaf] = g
    return result


def _accumulate_leaf(leaf, g):
    if leaf.grad is None:
        leaf.grad = np.array(g, dtype=DTYPE)
    else:
        leaf.grad = leaf.grad + g


# ----- elementwise and reductions

def _check_same(kind, a, b):
    if a.data.shape != b.data.shape:
        raise ShapeError(kind, a.data.shape, b.data.shape)


def add(a, b):
    _check_same('add', a, b)
    return record('add', (a, b), a.data + b.data, lambda g: (g, g))


def sub(a, b):
    _check_same('sub', a, b)
    return record('sub', (a, b), a.data - b.data, lambda g: (g, -g))


def hadamard_mul(a, b):
    _check_same('hadamard_mul', a, b)
    ad, bd = a.data, b.data
    return record('hadamard_mul', (a, b), ad * bd, lambda g: (g * bd, g * ad))


def scale(a, c):
    c = float(c)
    return record('scale', (a,), a.data * c, lambda g: (g * c,))


def shift(a, c):
    c = float(c)
    return record('shift', (a,), a.data + c, lambda g: (g,))


def sqrt(a):
    if np.any(a.data < 0):
        raise DomainError("sqrt: negative entry %r" % float(a.data.min()))
    out = np.sqrt(a.data)

    def vjp(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g * 0.5 / safe, 0.0),)
    return record('sqrt', (a,), out, vjp)


def square(a):
    ad = a.data
    return record('square', (a,), ad * ad, lambda g: (2.0 * ad * g,))


def relu(a, kind='relu'):
    mask = a.data > 0
    return record(kind, (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def hinge_clamp(a):
    """[x]_+ with derivative 0 at the kink."""
    return relu(a, kind='hinge_clamp')


def tensor_sum(a, axis=None):
    shape = a.data.shape
    if axis is None:
        return record('sum', (a,), np.sum(a.data), lambda g: (np.broadcast_to(g, shape),))

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape),)
    return record('sum', (a,), np.sum(a.data, axis=axis), vjp)


def tensor_mean(a, axis=None):
    shape = a.data.shape
    if axis is None:
        n = a.data.size
        return record('mean', (a,), np.mean(a.data),
                      lambda g: (np.broadcast_to(g / n, shape),))
    n = shape[axis]

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g / n, axis), shape),)
    return record('mean', (a,), np.mean(a.data, axis=axis), vjp)


_ELEMENTWISE = {
    'add': add,
    'sub': sub,
    'hadamard_mul': hadamard_mul,
    'sqrt': sqrt,
    'square': square,
    'relu': relu,
    'hinge_clamp': hinge_clamp,
    'sum': tensor_sum,
    'mean': tensor_mean,
}


def elementwise_and_reduce(kind, *inputs, **kwargs):
    """Dispatch by operation name; ``scale`` takes ``factor=``."""
    if kind == 'scale':
        return scale(inputs[0], kwargs['factor'])
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise DomainError("unknown elementwise operation '%s'" % kind)
    return fn(*inputs, **kwargs)


# ----- linear algebra and normalizations

def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError('matmul', a.data.shape, b.data.shape, detail='rank-2 operands required')
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError('matmul', a.data.shape, b.data.shape, detail='inner dimension')
    ad, bd = a.data, b.data
    return record('matmul', (a, b), ad @ bd, lambda g: (g @ bd.T, ad.T @ g))


def l2_normalize(v, eps=NORM_EPS):
    """Unit L2 norm of a vector, or of every row of a matrix."""
    if v.ndim not in (1, 2):
        raise ShapeError('l2_normalize', v.data.shape, detail='rank-1 or rank-2 required')
    vd = v.data
    norm = np.sqrt(np.sum(vd * vd, axis=-1, keepdims=True))
    if np.any(norm <= eps):
        raise DegenerateInputError("l2_normalize: vector norm %.3g <= %g" % (norm.min(), eps))
    out = vd / norm

    def vjp(g):
        dot = np.sum(out * g, axis=-1, keepdims=True)
        return ((g - out * dot) / norm,)
    return record('l2norm', (v,), out, vjp)


def softmax(v):
    """Softmax of a vector, or of every row of a matrix (max-subtracted)."""
    if v.ndim not in (1, 2):
        raise ShapeError('softmax', v.data.shape, detail='rank-1 or rank-2 required')
    if not np.all(np.isfinite(v.data)):
        raise DomainError("softmax: non-finite input")
    z = v.data - np.max(v.data, axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / np.sum(e, axis=-1, keepdims=True)

    def vjp(g):
        return (out * (g - np.sum(g * out, axis=-1, keepdims=True)),)
    return record('softmax', (v,), out, vjp)


# ----- structural plumbing

def reshape(a, shape):
    shape = tuple(int(s) for s in shape)
    src = a.data.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError('reshape', src, shape)
    return record('reshape', (a,), out, lambda g: (g.reshape(src),))


def getitem(a, key):
    if isinstance(key, Tensor):
        key = key.data.astype(np.intp)
    out = a.data[key]
    if out.ndim and any(d == 0 for d in out.shape):
        raise ShapeError('getitem', a.data.shape, out.shape, detail='empty selection')
    shape = a.data.shape

    def vjp(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, key, g)
        return (full,)
    return record('getitem', (a,), np.array(out, dtype=DTYPE), vjp)


def concat(tensors, axis=0):
    tensors = list(tensors)
    if not tensors:
        raise ShapeError('concat', (), detail='nothing to concatenate')
    ndim = tensors[0].ndim
    axis = axis % ndim
    ref = tensors[0].data.shape
    for t in tensors[1:]:
        s = t.data.shape
        if len(s) != ndim or any(s[i] != ref[i] for i in range(ndim) if i != axis):
            raise ShapeError('concat', ref, s, detail='axis %d' % axis)
    sizes = [t.data.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(tensors)))
    return record('concat', tuple(tensors),
                  np.concatenate([t.data for t in tensors], axis=axis), vjp)


# ----- tensor container (``TENSOR v1 <rank> <d0> ...`` + little-endian float64)

def write_tensor(fo, tensor):
    arr = tensor.data if isinstance(tensor, Tensor) else np.asarray(tensor, dtype=DTYPE)
    dims = ' '.join(str(d) for d in arr.shape)
    header = b' '.join([TENSOR_MAGIC, TENSOR_VERSION, str(arr.ndim).encode('ascii')])
    if dims:
        header += b' ' + dims.encode('ascii')
    fo.write(header + b'\n')
    fo.write(np.ascontiguousarray(arr, dtype='<f8').tobytes())


def read_tensor(fi):
    line = fi.readline()
    if not line.endswith(b'\n'):
        raise DataError("truncated tensor header")
    parts = line.split()
    if len(parts) < 3 or parts[0] != TENSOR_MAGIC:
        raise DataError("not a tensor record: %r" % line[:40])
    if parts[1] != TENSOR_VERSION:
        raise DataError("unsupported tensor container version %r" % parts[1].decode())
    try:
        rank = int(parts[2])
        shape = tuple(int(p) for p in parts[3:])
    except ValueError:
        raise DataError("malformed tensor header: %r" % line[:40])
    if len(shape) != rank:
        raise DataError("tensor header rank %d lists %d extents" % (rank, len(shape)))
    count = int(np.prod(shape)) if shape else 1
    raw = fi.read(8 * count)
    if len(raw) != 8 * count:
        raise DataError("truncated tensor payload: expected %d bytes, got %d"
                        % (8 * count, len(raw)))
    arr = np.frombuffer(raw, dtype='<f8').astype(DTYPE).reshape(shape)
    return Tensor(arr)


def save_tensor(path, tensor):
    with open(path, 'wb') as fo:
        write_tensor(fo, tensor)


def load_tensor(path):
    with open(path, 'rb') as fi:
        return read_tensor(fi)
