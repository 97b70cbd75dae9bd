# (c) 2016 Anaconda, Inc. / https://anaconda.com
# All Rights Reserved
#
# stv is distributed under the terms of the BSD 3-clause license.
# Consult LICENSE.txt or http://opensource.org/licenses/BSD-3-Clause.

import hashlib
import os
from os.path import normpath, islink, isfile, isdir
from os import sep, unlink
from shutil import rmtree

try:
    import yaml
except ImportError:
    import ruamel_yaml as yaml


def sha256_text(text):
    return hashlib.sha256(text.encode('utf-8')).hexdigest()


def sha256_files(paths):
    h = hashlib.new('sha256')
    for path in paths:
        with open(path, 'rb') as fi:
            while True:
                chunk = fi.read(262144)
                if not chunk:
                    break
                h.update(chunk)
    return h.hexdigest()


def derive_seed(seed, index):
    """
    per-item seed used by every parallelizable randomized operation
    """
    return (int(seed) ^ int(index)) & 0xFFFFFFFF


def dump_yaml(data):
    return yaml.safe_dump(data, default_flow_style=False, sort_keys=True)


def normalize_path(path):
    new_path = normpath(path)
    return new_path.replace(sep + sep, sep)


def makedirs(path):
    if not isdir(path):
        os.makedirs(path)
    return path


def rm_rf(path):
    """
    try to delete path, but never fail
    """
    try:
        if islink(path) or isfile(path):
            # Note that we have to check if the destination is a link because
            # exists('/path/to/dead-link') will return False, although
            # islink('/path/to/dead-link') is True.
            unlink(path)
        elif isdir(path):
            rmtree(path)
    except (OSError, IOError):
        pass


def yield_lines(path):
    with open(path) as fi:
        for line in fi:
            line = line.strip()
            if not line or line.startswith('#'):
                continue
            yield line
