import numpy as np
import pytest

from stv.data import generate_synthetic_dataset
from stv.exceptions import SamplingError
from stv.sampling import (RoiEmbeddings, Triplet, TripletBatch, build_triplet_batch,
                          mine_hard_triplets, pairwise_sq_distances)

QUARTER = np.array([[1.0, 0.0], [0.8, 0.6], [0.6, 0.8], [0.0, 1.0]])


def small_dataset():
    return generate_synthetic_dataset(3, 3, (24, 20, 1), {'videos_per_identity': 2})


def _contains(stack, roi):
    return any(np.array_equal(v, roi) for v in stack)


def test_uniform_batch():
    ds = small_dataset()
    batch = build_triplet_batch(ds, 10, seed=1)
    assert len(batch) == 10
    assert batch.stills.shape == (10, 1, 24, 20)
    assert np.all(batch.labels != batch.negative_labels)
    for t in batch:
        assert np.array_equal(t.still, ds.identities[t.label].still)
        assert _contains(ds.identities[t.label].videos, t.positive)
        assert _contains(ds.identities[t.negative_label].videos, t.negative)
    again = build_triplet_batch(ds, 10, seed=1)
    assert np.array_equal(batch.labels, again.labels)
    assert np.array_equal(batch.negatives, again.negatives)


def test_hard_batch():
    ds = small_dataset()
    rng = np.random.default_rng(0)

    def unit(n):
        v = rng.normal(size=(n, 5))
        return v / np.linalg.norm(v, axis=1, keepdims=True)
    emb = RoiEmbeddings(unit(3), unit(6))
    batch = build_triplet_batch(ds, 5, 'hard', emb, seed=2)
    labels = ds.video_labels
    videos = ds.videos
    dist = np.sum((emb.stills[:, None] - emb.videos[None]) ** 2, axis=-1)
    for t in batch:
        k = t.label
        same = np.flatnonzero(labels == k)
        other = np.flatnonzero(labels != k)
        assert np.array_equal(t.positive, videos[same[np.argmax(dist[k, same])]])
        assert np.array_equal(t.negative, videos[other[np.argmin(dist[k, other])]])
    # five anchors over three identities: every identity is used
    assert set(batch.labels.tolist()) == {0, 1, 2}


def test_batch_errors():
    ds = small_dataset()
    with pytest.raises(SamplingError):
        build_triplet_batch(ds, 0)
    with pytest.raises(SamplingError):
        build_triplet_batch(ds, 4, 'hard')
    with pytest.raises(SamplingError):
        build_triplet_batch(ds, 4, 'random')
    roi = ds.stills[0]
    with pytest.raises(SamplingError):
        TripletBatch([Triplet(roi, roi, roi, 1, 1)])
    with pytest.raises(SamplingError):
        TripletBatch([])


def test_pairwise_distances():
    d = pairwise_sq_distances(QUARTER)
    assert np.allclose(np.diag(d), 0.0)
    assert np.isclose(d[0, 3], 2.0)
    assert np.isclose(d[1, 2], 0.08)


def test_mine_hardest():
    got = mine_hard_triplets(QUARTER, [0, 0, 1, 1])
    assert got == [(0, 1, 2), (1, 0, 2), (2, 3, 1), (3, 2, 1)]


def test_mine_semi_hard():
    got = mine_hard_triplets(QUARTER, [0, 0, 1, 1], policy='semi_hard', margin=0.5)
    assert got == [(0, 1, 2), (1, 0, 3), (2, 3, 0), (3, 2, 1)]
    # nothing inside a tiny margin
    assert mine_hard_triplets(QUARTER, [0, 0, 1, 1], 'semi_hard', margin=0.01) == []


def test_mine_errors():
    with pytest.raises(SamplingError):
        mine_hard_triplets(QUARTER, [0, 0, 0, 0])
    with pytest.raises(SamplingError):
        mine_hard_triplets(QUARTER * 2, [0, 0, 1, 1])
    with pytest.raises(SamplingError):
        mine_hard_triplets(QUARTER, [0, 0, 1, 1], policy='easy')
    with pytest.raises(SamplingError):
        mine_hard_triplets(QUARTER, [0, 1])


def main():
    test_uniform_batch()
    test_hard_batch()
    test_batch_errors()
    test_pairwise_distances()
    test_mine_hardest()
    test_mine_semi_hard()
    test_mine_errors()


if __name__ == '__main__':
    main()
