import os
import shutil
import tempfile

import numpy as np
import pytest

from stv.data import (Dataset, Identity, augment_still, blurred_copies, generate_synthetic_dataset,
                      load_dataset, make_tmask, read_manifest, save_dataset, synthesize_blur)
from stv.exceptions import AugmentationError, DataError
from stv.losses import LossConfig

SMALL = (24, 20, 1)


def small_dataset(seed=3, threads=1):
    return generate_synthetic_dataset(seed, 3, SMALL, {'videos_per_identity': 2},
                                      threads=threads)


def test_generate_is_deterministic():
    ds = small_dataset()
    assert ds.n_identities == 3
    assert ds.stills.shape == (3, 1, 24, 20)
    assert ds.videos.shape == (6, 1, 24, 20)
    assert ds.video_labels.tolist() == [0, 0, 1, 1, 2, 2]
    assert 0.0 <= ds.videos.min() and ds.videos.max() <= 1.0
    assert ds.same_as(small_dataset())
    assert ds.same_as(small_dataset(threads=2))
    assert not ds.same_as(small_dataset(seed=4))
    images, labels = ds.pool()
    assert len(images) == len(labels) == 9
    assert labels[:3].tolist() == [0, 1, 2]


def test_generate_rejects_bad_input():
    with pytest.raises(DataError):
        generate_synthetic_dataset(0, 1, SMALL)
    with pytest.raises(DataError):
        generate_synthetic_dataset(0, 2, (8, 8, 1))
    with pytest.raises(DataError):
        generate_synthetic_dataset(0, 2, (24, 20, 2))
    with pytest.raises(DataError):
        generate_synthetic_dataset(0, 2, SMALL, {'videos_per_identity': 0})


def test_dataset_validation():
    roi = np.zeros((1, 24, 20))
    with pytest.raises(DataError):
        Dataset([Identity(0, roi, [roi]), Identity(2, roi, [roi])], 0, SMALL)
    with pytest.raises(DataError):
        Dataset([Identity(0, roi, [roi]), Identity(1, roi, [])], 0, SMALL)
    with pytest.raises(DataError):
        Dataset([Identity(0, roi, [roi]), Identity(1, roi, [np.zeros((1, 20, 20))])], 0, SMALL)


def test_save_and_load_dataset():
    tmp_dir = tempfile.mkdtemp()
    ds = small_dataset()
    manifest = save_dataset(ds, tmp_dir)
    assert os.path.isfile(manifest)
    rows = read_manifest(tmp_dir)
    assert rows[0] == (0, 'still', 'still_000.pgm')
    assert len(rows) == 9
    assert load_dataset(tmp_dir).same_as(ds)

    # without the tensor containers the graymaps are read back
    os.unlink(os.path.join(tmp_dir, 'stills.tensor'))
    from_images = load_dataset(tmp_dir)
    assert np.abs(from_images.videos - ds.videos).max() <= 0.5 / 255 + 1e-12
    shutil.rmtree(tmp_dir)

    with pytest.raises(DataError):
        load_dataset(tmp_dir)


def test_augment_still():
    roi = np.random.default_rng(0).uniform(size=(1, 24, 20))
    mirrored, same = augment_still(roi, ['mirror', {'op': 'translate', 'dx': 0, 'dy': 0}], 0)
    assert np.array_equal(mirrored, roi[..., ::-1])
    assert np.array_equal(same, roi)
    ops = ['rotate', 'shear', 'translate']
    first = augment_still(roi, ops, 7)
    assert all(a.shape == roi.shape for a in first)
    assert all(np.array_equal(a, b) for a, b in zip(first, augment_still(roi, ops, 7)))
    with pytest.raises(AugmentationError):
        augment_still(roi, [{'op': 'translate', 'dx': 15, 'dy': 0}], 0)
    with pytest.raises(AugmentationError):
        augment_still(roi, ['zoom'], 0)
    with pytest.raises(AugmentationError):
        augment_still(roi, [{'dx': 1}], 0)


def test_synthesize_blur():
    roi = np.random.default_rng(2).uniform(size=(1, 24, 20))
    assert np.array_equal(synthesize_blur(roi, 'out_of_focus', radius=0), roi)
    flat = np.full((1, 24, 20), 0.3)
    assert np.allclose(synthesize_blur(flat, 'motion', length=5, angle=30), 0.3)
    blurred = synthesize_blur(roi, 'out_of_focus', radius=2)
    assert blurred.std() < roi.std()
    with pytest.raises(DataError):
        synthesize_blur(roi, 'motion', length=3)
    with pytest.raises(DataError):
        synthesize_blur(roi, 'gaussian')
    copies = blurred_copies(roi, 0, n=3)
    assert len(copies) == 3


def test_tmask():
    mask = make_tmask(64, 64)
    assert mask.region.sum() == 976
    assert np.array_equal(mask.grid, mask.grid[:, ::-1])
    assert set(np.unique(mask.grid)) == {0.25, 1.0}
    weighted = make_tmask(48, 40, cfg=LossConfig(tmask_alpha=2.0, tmask_beta=0.5))
    assert weighted.shape == (48, 40)
    assert weighted.grid[weighted.region].min() == 2.0
    assert weighted.grid[~weighted.region].max() == 0.5
    with pytest.raises(DataError):
        make_tmask(48, 40, fractions={'mouth_rows': (0.7, 0.9)})
    with pytest.raises(DataError):
        make_tmask(48, 40, fractions={'eye_rows': (0.5, 0.4)})
    with pytest.raises(DataError):
        make_tmask(2, 2)


def main():
    test_generate_is_deterministic()
    test_generate_rejects_bad_input()
    test_dataset_validation()
    test_save_and_load_dataset()
    test_augment_still()
    test_synthesize_blur()
    test_tmask()


if __name__ == '__main__':
    main()
