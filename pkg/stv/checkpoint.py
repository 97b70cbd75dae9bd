# (c) 2016 Anaconda, Inc. / https://anaconda.com
# All Rights Reserved
#
# stv is distributed under the terms of the BSD 3-clause license.
# Consult LICENSE.txt or http://opensource.org/licenses/BSD-3-Clause.
"""
Checkpoint layout::

    STV-CHECKPOINT <version>
    spec <sha256> <n bytes>
    <network spec YAML, n bytes>
    seed <int>
    records <count>
    <name>\\n<tensor record>      (count times: parameters, then BN statistics)
    end
"""
from __future__ import absolute_import, division, print_function

import logging

from .exceptions import (CheckpointVersionMismatch, CorruptCheckpoint, DataError,
                         ShapeError, SpecError, SpecHashMismatch)
from .networks import Network, NetworkSpec
from .tensor import read_tensor, write_tensor
from .utils import sha256_text

logger = logging.getLogger(__name__)

MAGIC = b'STV-CHECKPOINT'
VERSION = 1


def save_checkpoint(net, path):
    spec_text = net.spec.to_yaml().encode('utf-8')
    records = list(net.unique_parameters().items()) + list(net.state_arrays().items())
    with open(path, 'wb') as fo:
        fo.write(MAGIC + b' %d\n' % VERSION)
        fo.write(b'spec %s %d\n' % (net.spec.digest().encode('ascii'), len(spec_text)))
        fo.write(spec_text)
        fo.write(b'seed %d\n' % net.seed)
        fo.write(b'records %d\n' % len(records))
        for name, value in records:
            fo.write(name.encode('utf-8') + b'\n')
            write_tensor(fo, value)
        fo.write(b'end\n')
    logger.info("saved %s (%d records) to %s", net.spec.name, len(records), path)
    return path


def _field(fi, key):
    line = fi.readline()
    parts = line.split()
    if not line.endswith(b'\n') or not parts or parts[0] != key:
        raise CorruptCheckpoint("expected '%s' line, found %r" % (key.decode(), line[:40]))
    return parts[1:]


def read_checkpoint(path):
    """Return ``(spec_text, digest, seed, {name: ndarray})`` without building a network."""
    try:
        fi = open(path, 'rb')
    except (IOError, OSError) as e:
        raise CorruptCheckpoint("cannot open checkpoint %s: %s" % (path, e))
    with fi:
        head = fi.readline().split()
        if len(head) != 2 or head[0] != MAGIC:
            raise CorruptCheckpoint("%s is not a checkpoint" % path)
        if head[1] != str(VERSION).encode('ascii'):
            raise CheckpointVersionMismatch("checkpoint %s has version %s, expected %d"
                                            % (path, head[1].decode('ascii', 'replace'),
                                               VERSION))
        try:
            digest, size = _field(fi, b'spec')
            digest, size = digest.decode('ascii'), int(size)
            spec_text = fi.read(size).decode('utf-8')
            if len(spec_text.encode('utf-8')) != size:
                raise CorruptCheckpoint("truncated spec in %s" % path)
            seed = int(_field(fi, b'seed')[0])
            count = int(_field(fi, b'records')[0])
            records = {}
            for _ in range(count):
                name = fi.readline()
                if not name.endswith(b'\n'):
                    raise CorruptCheckpoint("truncated record list in %s" % path)
                records[name.strip().decode('utf-8')] = read_tensor(fi).numpy()
            if fi.readline() != b'end\n':
                raise CorruptCheckpoint("missing end marker in %s" % path)
        except (ValueError, IndexError, UnicodeDecodeError, DataError) as e:
            raise CorruptCheckpoint("corrupt checkpoint %s: %s" % (path, e))
    if sha256_text(spec_text) != digest:
        raise CorruptCheckpoint("spec text in %s does not match its recorded hash" % path)
    return spec_text, digest, seed, records


def load_checkpoint(path, spec=None):
    """
    Rebuild the saved network.  When ``spec`` is given the checkpoint must
    have been written from an identical spec.
    """
    spec_text, digest, seed, records = read_checkpoint(path)
    if spec is not None and spec.digest() != digest:
        raise SpecHashMismatch(spec.digest(), digest)
    try:
        net = Network(NetworkSpec.from_yaml(spec_text), seed)
    except (SpecError, ShapeError) as e:
        raise CorruptCheckpoint("unusable spec in %s: %s" % (path, e))
    params = net.unique_parameters()
    state = {}
    for name, arr in records.items():
        if name in params:
            if arr.shape != params[name].data.shape:
                raise CorruptCheckpoint("record %s has shape %s, expected %s"
                                        % (name, arr.shape, params[name].data.shape))
            params[name].assign(arr)
        else:
            state[name] = arr
    missing = set(params) - set(records)
    if missing:
        raise CorruptCheckpoint("checkpoint %s lacks parameters: %s"
                                % (path, ', '.join(sorted(missing))))
    try:
        net.load_state(state)
    except (SpecError, ShapeError) as e:
        raise CorruptCheckpoint(str(e))
    logger.debug("loaded %s from %s", net.spec.name, path)
    return net
