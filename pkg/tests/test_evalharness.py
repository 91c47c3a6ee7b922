import csv
import time

import numpy as np
import pytest
from hypothesis import given, strategies as st

from aerialdet.errors import ConfigError
from aerialdet.evalharness import (
    METRICS_HEADER, ConfusionMatrix, CvSplit, LabeledSample, LabeledVideo, benchmark_timing,
    build_patch_dataset, cross_validate, evaluate, format_accuracy, leave_four_out_splits, load_dataset,
    save_dataset, write_metrics_csv, write_timing_csv,
)
from aerialdet.imagecore import iou
from aerialdet.opticalflow import HsConfig, MotionMaskConfig
from aerialdet.pipeline import DetectorConfig, detect_moving_objects
from aerialdet.scenes import SceneConfig, SpriteSpec, generate_scene

DESK = DetectorConfig(HsConfig(1.0, 50, 1e-4), MotionMaskConfig(3.0, True), 2, 20, 32)

EXPECTED_SPLITS = [
    {1, 2, 3, 4}, {5, 6, 7, 8}, {9, 10, 11, 12}, {1, 3, 5, 7}, {2, 4, 6, 8},
    {1, 4, 7, 10}, {2, 5, 8, 11}, {3, 6, 9, 12}, {1, 5, 9, 12}, {1, 6, 11, 12},
]


class Echo:
    """Predicts the label hidden in the first pixel."""

    def predict(self, X):
        return (np.asarray(X)[:, 0, 0] > 0.5).astype(int)


class Constant:
    def __init__(self, value=0):
        self.value = value

    def predict(self, X):
        return np.full(len(X), self.value)


def person_dataset(per_person=6, seed=0):
    rng = np.random.default_rng(seed)
    n = 12 * per_person
    y = np.tile([0, 1], n // 2)
    X = rng.random((n, 4, 4)) * 0.4
    X[:, 0, 0] = y
    pids = np.repeat(np.arange(1, 13), per_person)
    return X, y, pids


def test_split_table_exact():
    splits = leave_four_out_splits()
    assert [set(s.test_persons) for s in splits] == EXPECTED_SPLITS
    for s in splits:
        assert len(s.test_persons) == 4 and len(s.train_persons) == 8
        assert s.test_persons | s.train_persons == set(range(1, 13))
        assert 0 not in s.test_persons | s.train_persons


def test_split_validation():
    with pytest.raises(ConfigError):
        CvSplit(frozenset({1, 2, 3}), frozenset(range(4, 13)))
    with pytest.raises(ConfigError):
        CvSplit(frozenset({1, 2, 3, 4}), frozenset(range(4, 12)))


def test_echo_and_constant_classifiers():
    X, y, _ = person_dataset()
    acc, cm = evaluate(Echo(), (X, y))
    assert format_accuracy(acc) == "100.0000" and cm.fp == cm.fn == 0
    acc, cm = evaluate(Constant(0), (X, y))
    assert format_accuracy(acc) == "50.0000"
    samples = [LabeledSample(x, int(lab), 1) for x, lab in zip(X, y)]
    assert evaluate(Echo(), samples)[0] == 100.0
    with pytest.raises(ConfigError):
        evaluate(Echo(), [])


@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=60))
def test_confusion_matrix_accounting(pairs):
    t, p = np.array(pairs).T
    cm = ConfusionMatrix.from_labels(t, p)
    assert cm.tp + cm.fp + cm.tn + cm.fn == len(pairs)
    assert cm.accuracy == 100.0 * (cm.tp + cm.tn) / len(pairs)
    assert cm.tp == int(np.sum((t == 1) & (p == 1)))


def test_sample_validation():
    with pytest.raises(ConfigError):
        LabeledSample(np.zeros((2, 2)), 2)


def test_cross_validate_protocol():
    X, y, pids = person_dataset()
    calls = []

    def trainer(Xt, yt, seed):
        calls.append(len(Xt))
        return Echo()

    rep = cross_validate(X, y, pids, trainer, method="echo")
    assert len(rep.results) == 10 and calls == [48] * 10
    assert rep.accuracies == [100.0] * 10 and rep.mean_accuracy == 100.0
    for r, split in zip(rep.results, leave_four_out_splits()):
        assert r.train_persons_seen == split.train_persons
        assert not (r.train_persons_seen & r.test_persons)
        assert r.n_test == 24


def test_cross_validate_mean_is_arithmetic():
    X, y, pids = person_dataset()
    rng = np.random.default_rng(3)

    def trainer(Xt, yt, seed):
        return Constant(int(rng.integers(2)))

    rep = cross_validate(X, y, pids, trainer)
    assert rep.mean_accuracy == pytest.approx(sum(rep.accuracies) / 10, abs=1e-12)


def test_person_zero_only_trains():
    X, y, pids = person_dataset()
    X = np.concatenate([X, X[:5]])
    y = np.concatenate([y, y[:5]])
    pids = np.concatenate([pids, np.zeros(5, dtype=int)])
    rep = cross_validate(X, y, pids, lambda a, b, s: Echo())
    assert all(0 in r.train_persons_seen and r.n_test == 24 for r in rep.results)


def test_trainer_never_sees_test_persons():
    X, y, pids = person_dataset()
    X[:, 1, 1] = pids
    splits = iter(leave_four_out_splits())

    def trainer(Xt, yt, seed):
        split = next(splits)
        assert set(Xt[:, 1, 1].astype(int)) == split.train_persons
        return Echo()

    cross_validate(X, y, pids, trainer)


def test_missing_person_coverage():
    X, y, pids = person_dataset()
    keep = pids != 7
    with pytest.raises(ConfigError):
        cross_validate(X[keep], y[keep], pids[keep], lambda a, b, s: Echo())


def test_parallel_matches_serial():
    X, y, pids = person_dataset()
    a = cross_validate(X, y, pids, lambda Xt, yt, s: Constant(s % 2))
    b = cross_validate(X, y, pids, lambda Xt, yt, s: Constant(s % 2), jobs=4)
    assert a.accuracies == b.accuracies


def test_build_patch_dataset_two_sprites():
    sprites = (SpriteSpec("human", 40, (-1, 0), 1000, (150, 100), 1), SpriteSpec("car", 30, (-1, 0), 77, (200, 10)))
    sc = generate_scene(SceneConfig(240, 150, 60, (2, 0), sprites, 0.0, 3))
    video = LabeledVideo(sc.frames, sc.truth, person_id=4)
    samples = build_patch_dataset([video], DESK, frame_stride=10)
    assert len(samples) == 10
    assert [s.label for s in samples[0::2]] + [s.label for s in samples[1::2]] in (
        [0] * 5 + [1] * 5, [1] * 5 + [0] * 5)
    assert all(s.person_id == 4 and s.patch.shape == (32, 32) for s in samples)


def test_labels_follow_iou_rule():
    sprites = (SpriteSpec("human", 40, (-1, 0), 1000, (150, 100), 1),)
    sc = generate_scene(SceneConfig(240, 150, 30, (2, 0), sprites, 0.0, 3))
    sloppy = DetectorConfig(DESK.hs, MotionMaskConfig(1.0, True), 0, 5, 32)
    samples = build_patch_dataset([LabeledVideo(sc.frames, sc.truth, 1)], sloppy, frame_stride=1)
    assert len(samples) > 0
    # relabel independently from detector output
    n = 0
    for i in range(1, 30):
        for box in detect_moving_objects(sc.frames[i - 1], sc.frames[i], sloppy):
            expect = int(any(iou(box, g.box) >= 0.5 for g in sc.truth if g.frame == i and g.kind == "human"))
            assert samples[n].label == expect
            n += 1
    assert n == len(samples)


def test_stride_validation():
    with pytest.raises(ConfigError):
        build_patch_dataset([], DESK, frame_stride=0)


def test_dataset_roundtrip(tmp_path):
    X, y, pids = person_dataset()
    save_dataset((X, y, pids), tmp_path / "d.npz")
    X2, y2, p2 = load_dataset(tmp_path / "d.npz")
    assert np.allclose(X, X2, atol=1e-7) and np.array_equal(y, y2) and np.array_equal(pids, p2)


def test_metrics_csv(tmp_path):
    X, y, pids = person_dataset()
    rep = cross_validate(X, y, pids, lambda a, b, s: Echo(), method="echo")
    write_metrics_csv(rep, tmp_path / "m.csv")
    rows = list(csv.reader(open(tmp_path / "m.csv")))
    assert tuple(rows[0]) == METRICS_HEADER
    assert ",".join(rows[0]) == "split,method,accuracy,tp,fp,tn,fn,train_s,test_s_per_sample"
    assert len(rows) == 11 and rows[1][:3] == ["1", "echo", "100.0000"]
    assert rows[1][-2:] == ["", ""]
    write_metrics_csv(rep, tmp_path / "t.csv", include_timing=True)
    assert list(csv.reader(open(tmp_path / "t.csv")))[1][-1] != ""


def test_benchmark_timing(tmp_path):
    X, y, _ = person_dataset()
    t0 = time.perf_counter()
    rows = benchmark_timing({"noop": lambda a, b, s: Constant(1)}, X, y, n_predictions=1000)
    assert time.perf_counter() - t0 < 1.0
    (row,) = rows
    assert row.method == "noop" and row.n_predictions == 1000
    assert row.train_s < 0.1 and row.test_s_per_sample < 0.1
    write_timing_csv(rows, tmp_path / "t.csv")
    assert open(tmp_path / "t.csv").readline().strip() == "method,train_s,test_s_per_sample"
    with pytest.raises(ConfigError):
        benchmark_timing({}, X, y)
