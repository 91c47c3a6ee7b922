import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from aerialdet import classifiers, elm, scnn
from aerialdet.classifiers import (
    ExternalSvmHead, FeatureMatrix, HelmHead, ScnnSvmHead, SoftmaxHead, SvmModel, hinge_objective,
    load_external_features, save_features, svm_predict, train_linear_svm,
)
from aerialdet.errors import ConfigError, DimensionError, FormatError, StateError

seeds = st.integers(0, 2**31 - 1)


def separable_2d(n, seed):
    r = np.random.default_rng(seed)
    X = r.uniform(-1, 1, size=(n, 2))
    normal = np.array([0.6, -0.8])
    margin = X @ normal + 0.1
    keep = np.abs(margin) > 0.1
    return X[keep], np.where(margin[keep] > 0, 1, -1)


# -- SVM --------------------------------------------------------------------

def test_one_dimensional_example():
    m = train_linear_svm([[-1.0], [1.0]], [-1, 1], c=1.0, epochs=50)
    assert m.w[0] > 0
    assert np.array_equal(svm_predict(m, [[-1.0], [1.0]])[0], [-1, 1])


def test_two_dimensional_separable_set():
    X, y = separable_2d(100, 0)
    m = train_linear_svm(X, y, c=10.0, epochs=50, seed=1)
    assert (svm_predict(m, X)[0] == y).mean() == 1.0


def test_identical_features_warn():
    X = np.ones((6, 3))
    y = np.array([1, -1, 1, -1, 1, -1])
    with pytest.warns(RuntimeWarning):
        m = train_linear_svm(X, y)
    assert (svm_predict(m, X)[0] == y).mean() == pytest.approx(0.5)


def test_svm_errors():
    with pytest.raises(ConfigError):
        train_linear_svm(np.ones((3, 2)), [1, 1, 1])
    with pytest.raises(ConfigError):
        train_linear_svm(np.ones((2, 2)), [0, 1])
    with pytest.raises(ConfigError):
        train_linear_svm(np.ones((2, 2)), [-1, 1], c=0.0)
    with pytest.raises(DimensionError):
        train_linear_svm(np.ones((2, 2)), [-1, 1, 1])
    with pytest.raises(DimensionError):
        svm_predict(SvmModel(np.zeros(3), 0.0, 1.0), np.ones((2, 2)))


def test_zero_model_predicts_plus_one():
    labels, margins = svm_predict(SvmModel(np.zeros(4), 0.0, 1.0), np.random.default_rng(0).normal(size=(5, 4)))
    assert np.all(labels == 1) and not margins.any()


@given(arrays(np.float64, 3, elements=st.floats(-5, 5)), arrays(np.float64, 3, elements=st.floats(-5, 5)))
def test_margin_is_linear(w, x):
    m = SvmModel(w, 0.0, 1.0)
    assert svm_predict(m, 2 * x[None])[1][0] == pytest.approx(2 * svm_predict(m, x[None])[1][0], abs=1e-9)


@given(seeds, st.floats(0.01, 100.0))
def test_labels_invariant_to_positive_rescaling(seed, k):
    r = np.random.default_rng(seed)
    w, b, X = r.normal(size=4), float(r.normal()), r.normal(size=(20, 4))
    a = svm_predict(SvmModel(w, b, 1.0), X)[0]
    s = svm_predict(SvmModel(k * w, k * b, 1.0), X)[0]
    margins = X @ w + b
    settled = np.abs(margins) > 1e-9  # exact ties may flip under rounding
    assert np.array_equal(a[settled], s[settled])


@given(seeds, st.floats(0.1, 10.0))
def test_objective_not_worse_than_zero(seed, c):
    r = np.random.default_rng(seed)
    X = r.normal(size=(30, 3))
    y = np.where(r.random(30) > 0.5, 1, -1)
    y[:2] = [1, -1]
    m = train_linear_svm(X, y, c=c, epochs=10, seed=seed % 1000)
    assert hinge_objective(m.w, m.b, X, y, c) <= hinge_objective(np.zeros(3), 0.0, X, y, c) + 1e-9


def test_svm_deterministic():
    X, y = separable_2d(60, 3)
    a, b = train_linear_svm(X, y, seed=4), train_linear_svm(X, y, seed=4)
    assert np.array_equal(a.w, b.w) and a.b == b.b


# -- feature files ----------------------------------------------------------

@given(arrays(np.float32, st.tuples(st.integers(0, 6), st.integers(1, 5)),
              elements=st.floats(-1e6, 1e6, width=32)))
def test_binary_roundtrip(tmp_path_factory, data):
    p = tmp_path_factory.mktemp("feat") / "f.bin"
    save_features(FeatureMatrix(data), p)
    fm = load_external_features(p, expected_rows=data.shape[0])
    assert fm.data.dtype == np.float32 and np.array_equal(fm.data, data) and fm.source_tag == "external"


def test_binary_layout(tmp_path):
    p = tmp_path / "f.bin"
    save_features(np.arange(6, dtype=np.float32).reshape(2, 3), p)
    raw = p.read_bytes()
    assert raw[:24] == b"FEAT" + struct.pack("<IQQ", 1, 2, 3)
    assert raw[24:] == np.arange(6, dtype="<f4").tobytes()


def test_wide_features_load(tmp_path):
    p = tmp_path / "f.bin"
    save_features(np.ones((3, 4096), np.float32), p)
    assert load_external_features(p).dim == 4096


def test_csv_features(tmp_path):
    p = tmp_path / "f.csv"
    p.write_text("dim=3\n1,2,3\n4,5,6\n")
    fm = load_external_features(p, expected_rows=2)
    assert fm.rows == 2 and fm.dim == 3 and fm.data[1, 2] == 6.0


@pytest.mark.parametrize("content", [
    b"",
    b"FEAT\x01\x00",
    b"FEAT" + struct.pack("<IQQ", 2, 1, 1) + b"\x00" * 4,
    b"FEAT" + struct.pack("<IQQ", 1, 2, 2) + b"\x00" * 4,
    b"FEAT" + struct.pack("<IQQ", 1, 1, 1) + np.array([np.inf], "<f4").tobytes(),
    b"1,2,3\n",
    b"dim=2\n1,2,3\n",
    b"dim=2\n1,x\n",
    b"dim=2\n1,nan\n",
    b"\xff\xfe\x00",
])
def test_malformed_feature_files(tmp_path, content):
    p = tmp_path / "bad"
    p.write_bytes(content)
    with pytest.raises(FormatError):
        load_external_features(p)


def test_row_count_mismatch(tmp_path):
    p = tmp_path / "f.bin"
    save_features(np.ones((3, 2), np.float32), p)
    with pytest.raises(FormatError):
        load_external_features(p, expected_rows=4)


# -- heads ------------------------------------------------------------------

def _net(side=8, seed=0):
    arch = scnn.build_architecture(side, [(2, 3), (2, 2)], 4, 2)
    return scnn.init_network(arch, scnn.SgdConfig(init_sigma=0.5, seed=seed))


def test_softmax_head_threshold():
    net = _net()
    x = np.random.default_rng(0).random((6, 8, 8))
    labels, scores = SoftmaxHead(net).classify(x)
    probs = scnn.predict_proba(net, x)[:, 1]
    assert np.array_equal(scores, probs) and np.array_equal(labels, (probs > 0.5).astype(int))
    assert SoftmaxHead(net).patch_size == 8


def test_scnn_svm_head_uses_fc_features():
    net = _net(seed=1)
    r = np.random.default_rng(1)
    x = r.random((30, 8, 8))
    y = (x.mean(axis=(1, 2)) > np.median(x.mean(axis=(1, 2)))).astype(int)
    head = classifiers.train_scnn_svm(net, x, y, c=1.0, epochs=5)
    feats = scnn.extract_fc_features(net, x)
    labels, margins = head.classify(x)
    assert np.allclose(margins, feats @ head.svm.w + head.svm.b)
    assert np.array_equal(labels, (margins >= 0).astype(int))


def test_helm_head():
    r = np.random.default_rng(2)
    X = r.random((20, 8, 8))
    y = np.arange(20) % 2
    model = elm.helm_train(X, y, elm.HelmConfig(patch_size=8, ae_hidden=(6, 6), clf_hidden=30))
    head = HelmHead(model)
    labels, scores = head.classify(X)
    raw, argmax = elm.helm_predict(model, X)
    assert np.array_equal(scores, raw[:, 1]) and np.array_equal(labels, argmax)
    assert head.patch_size == 8


def test_external_head():
    svm = SvmModel(np.array([1.0, -1.0]), 0.0, 1.0)
    head = ExternalSvmHead(svm)
    labels, _ = head.classify_features(np.array([[2.0, 1.0], [0.0, 3.0]]))
    assert np.array_equal(labels, [1, 0])
    with pytest.raises(StateError):
        head.classify(np.zeros((1, 4, 4)))
    with_extractor = ExternalSvmHead(svm, lambda p: p.reshape(len(p), -1)[:, :2])
    assert np.array_equal(with_extractor.predict(np.array([[[2.0, 1.0]], [[0.0, 3.0]]])), [1, 0])
