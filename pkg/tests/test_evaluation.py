import numpy as np
import pytest

from stv.data import generate_synthetic_dataset
from stv.evaluation import (CSV_COLUMNS, EvalReport, Gallery, Trajectory, accumulate_trajectory,
                            cosine_matcher, evaluate_network, make_matcher, rank1_eval,
                            rank1_from_scores, score_probes, table1_report)
from stv.exceptions import EvaluationError
from stv.networks import Network, build_ccm, build_spec, build_tbe_lite, complexity_of

EYE = np.eye(3)


def test_ties_go_to_lowest_index():
    scores = [[1.0, 1.0, 0.0], [0.0, 2.0, 2.0]]
    mean, std, accs, confusion = rank1_from_scores(scores, [0, 2], trials=3)
    # two probes: every trial keeps both
    assert accs == [0.5, 0.5, 0.5]
    assert mean == 0.5 and std == 0.0
    assert confusion[0, 0] == 1 and confusion[2, 1] == 1
    assert confusion.sum() == 2


def test_trials_are_reproducible():
    rng = np.random.default_rng(0)
    scores = rng.normal(size=(10, 4))
    truth = rng.integers(4, size=10)
    first = rank1_from_scores(scores, truth, trials=5, seed=3)
    again = rank1_from_scores(scores, truth, trials=5, seed=3)
    assert first[2] == again[2]
    # eight of ten probes per trial
    assert all(abs(a * 8 - round(a * 8)) < 1e-9 for a in first[2])
    assert np.isclose(first[1], np.std(first[2]))


def test_accumulate_trajectory():
    frames = [[1.0, 0.0, 3.0], [3.0, 2.0, 1.0]]
    assert accumulate_trajectory(frames).tolist() == [2.0, 1.0, 2.0]
    assert accumulate_trajectory(frames, 'max').tolist() == [3.0, 2.0, 3.0]
    with pytest.raises(EvaluationError):
        accumulate_trajectory(frames, 'median')
    with pytest.raises(EvaluationError):
        accumulate_trajectory([])
    with pytest.raises(EvaluationError):
        accumulate_trajectory([[1.0], [1.0, 2.0]])


def test_rank1_eval_per_frame_and_fused():
    gallery = Gallery([0, 1, 2], EYE)
    probes = [(EYE[0], 0), (EYE[1], 1), (EYE[0], 2)]
    report = rank1_eval(gallery, probes, cosine_matcher)
    assert report.n_probes == 3
    assert report.confusion[2, 0] == 1
    assert report.confusion.trace() == 2

    tracks = [Trajectory([EYE[2], EYE[2], EYE[0]], 2)]
    assert rank1_eval(gallery, tracks + [(EYE[1], 1)], cosine_matcher).rank1_mean == 1.0
    # max fusion ties identity 2 with identity 0, which wins
    maxed = rank1_eval(gallery, tracks, cosine_matcher, fusion='max')
    assert maxed.confusion[2, 0] == 1
    assert maxed.rank1_mean == 0.0


def test_threaded_scoring_matches_serial():
    rng = np.random.default_rng(1)
    gallery = Gallery(range(4), rng.normal(size=(4, 6)))
    probes = [(rng.normal(size=6), i % 4) for i in range(12)]
    serial = score_probes(gallery, probes, cosine_matcher)
    threaded = score_probes(gallery, probes, cosine_matcher, threads=3)
    assert np.array_equal(serial, threaded)


def test_evaluation_errors():
    with pytest.raises(EvaluationError):
        Gallery([0, 0], EYE[:2])
    with pytest.raises(EvaluationError):
        Gallery([0, 1], EYE)
    with pytest.raises(EvaluationError):
        Gallery([0, 1], EYE[:2], kind='sketch')
    gallery = Gallery([0, 1, 2], EYE)
    with pytest.raises(EvaluationError):
        gallery.index_of(7)
    with pytest.raises(EvaluationError):
        rank1_eval(Gallery([0], EYE[:1]), [(EYE[0], 0)], cosine_matcher)
    with pytest.raises(EvaluationError):
        rank1_eval(gallery, [], cosine_matcher)
    with pytest.raises(EvaluationError):
        rank1_eval(gallery, [(EYE[0], 0)], cosine_matcher, trials=0)
    with pytest.raises(EvaluationError):
        Trajectory([], 0)
    with pytest.raises(EvaluationError):
        make_matcher('euclid')
    with pytest.raises(EvaluationError):
        make_matcher('ccm', build_tbe_lite(seed=0))


def test_evaluate_network():
    ds = generate_synthetic_dataset(2, 3, degradations={'videos_per_identity': 2})
    for net, matcher in ((build_tbe_lite(seed=0, n_classes=3), 'cosine'),
                         (build_ccm(seed=0), 'ccm')):
        reports = evaluate_network(net, ds, matcher, trials=2, seed=1)
        assert list(reports) == ['frame', 'trajectory']
        assert reports['frame'].n_probes == 6
        assert reports['trajectory'].n_probes == 3
        for rep in reports.values():
            assert 0.0 <= rep.rank1_mean <= 1.0
        again = evaluate_network(net, ds, matcher, trials=2, seed=1)
        assert again['frame'].same_as(reports['frame'])


def test_table1_report():
    net = Network(build_spec('cfr'), 0)
    name = net.spec.name
    ev = EvalReport(0.75, 0.05, 3, 6, np.zeros((3, 3)), [0.7, 0.8, 0.75])
    text, csv = table1_report([net], evals={name: ev})
    lines = csv.splitlines()
    assert lines[0] == ','.join(CSV_COLUMNS)
    assert lines[1].startswith('%s,0.75,0.05,' % name)
    assert lines[1].endswith(',%d' % complexity_of(net).n_layers)
    assert len(lines) == 6
    assert 'published: CCM-CNN' in text
    assert '0.7500' in text
    bare_text, bare_csv = table1_report([net])
    assert bare_csv.splitlines()[1].startswith(name + ',,,')


def main():
    test_ties_go_to_lowest_index()
    test_trials_are_reproducible()
    test_accumulate_trajectory()
    test_rank1_eval_per_frame_and_fused()
    test_threaded_scoring_matches_serial()
    test_evaluation_errors()
    test_evaluate_network()
    test_table1_report()


if __name__ == '__main__':
    main()
