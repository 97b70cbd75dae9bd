import os
import shutil
import tempfile

import numpy as np
import pytest

from stv.checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from stv.exceptions import CheckpointVersionMismatch, CorruptCheckpoint, SpecHashMismatch
from stv.networks import build_haarnet_lite, build_spec, build_tbe_lite, forward_embed
from stv.tensor import Tensor


def _roi():
    return Tensor(np.random.default_rng(4).uniform(size=(2, 1, 48, 40)))


def test_round_trip():
    tmp_dir = tempfile.mkdtemp()
    path = os.path.join(tmp_dir, 'tbe.ckpt')
    net = build_tbe_lite(seed=3)
    save_checkpoint(net, path)
    spec_text, digest, seed, records = read_checkpoint(path)
    assert digest == net.spec.digest()
    assert seed == 3
    assert set(net.unique_parameters()) <= set(records)

    back = load_checkpoint(path, net.spec)
    for name, t in net.unique_parameters().items():
        assert np.array_equal(back.unique_parameters()[name].data, t.data)
    x = _roi()
    assert np.allclose(forward_embed(back, x).numpy(), forward_embed(net, x).numpy())
    shutil.rmtree(tmp_dir)


def test_spec_hash_mismatch():
    tmp_dir = tempfile.mkdtemp()
    path = os.path.join(tmp_dir, 'haar.ckpt')
    save_checkpoint(build_haarnet_lite(seed=0), path)
    with pytest.raises(SpecHashMismatch):
        load_checkpoint(path, build_spec('haarnet', embedding_dim=32))
    shutil.rmtree(tmp_dir)


def test_corrupt_checkpoints():
    tmp_dir = tempfile.mkdtemp()
    path = os.path.join(tmp_dir, 'tbe.ckpt')
    save_checkpoint(build_tbe_lite(seed=0), path)
    with open(path, 'rb') as fi:
        raw = fi.read()

    truncated = os.path.join(tmp_dir, 'short.ckpt')
    with open(truncated, 'wb') as fo:
        fo.write(raw[:len(raw) // 2])
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(truncated)

    magic = os.path.join(tmp_dir, 'magic.ckpt')
    with open(magic, 'wb') as fo:
        fo.write(b'NOT-A-CHECKPOINT' + raw[len(b'STV-CHECKPOINT'):])
    with pytest.raises(CorruptCheckpoint):
        read_checkpoint(magic)

    version = os.path.join(tmp_dir, 'version.ckpt')
    with open(version, 'wb') as fo:
        fo.write(raw.replace(b'STV-CHECKPOINT 1\n', b'STV-CHECKPOINT 9\n', 1))
    with pytest.raises(CheckpointVersionMismatch):
        read_checkpoint(version)

    with pytest.raises(CorruptCheckpoint):
        read_checkpoint(os.path.join(tmp_dir, 'missing.ckpt'))
    shutil.rmtree(tmp_dir)


def main():
    test_round_trip()
    test_spec_hash_mismatch()
    test_corrupt_checkpoints()


if __name__ == '__main__':
    main()
