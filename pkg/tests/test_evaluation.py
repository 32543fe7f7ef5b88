import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pmdef.defence import adversarial_score
from pmdef.errors import DataError, ParameterError
from pmdef.evaluation import (
    CORRUPTION_PARAMS,
    DriftReport,
    accuracy_report,
    accuracy_report_to_csv,
    corrupt_dataset,
    drift_report,
    ks_two_sample,
    roc_auc,
)
from pmdef.models import Dense, Flatten, ModelSpec, Relu, Reshape, Softmax, build_model
from pmdef.training import OptimizerConfig, train_classifier
from toys import identity_ae


# ---------------------------------------------------------------------------
# roc_auc


def test_auc_perfect_separation():
    assert roc_auc([1.0, 2.0], [3.0, 4.0]).auc == 1.0


def test_auc_identical_lists():
    assert roc_auc([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]).auc == 0.5


def test_auc_hand_pair_counting():
    # normal [1,2,3], adv [2,3,4]: 7 wins + 2*(0.5 tie) over 9 pairs = 7/9... by
    # explicit enumeration: (2>1)+(2==2)/2+(3>1)+(3>2)+(3==3)/2+(4>..)*3 = 7
    curve = roc_auc([1.0, 2.0, 3.0], [2.0, 3.0, 4.0])
    assert curve.auc == 7.0 / 9.0


def test_roc_points_monotone_from_origin_to_one():
    rng = np.random.default_rng(0)
    curve = roc_auc(rng.random(40), rng.random(30) + 0.3)
    pts = curve.points
    assert pts[0] == (0.0, 0.0)
    assert pts[-1] == (1.0, 1.0)
    for (f0, t0), (f1, t1) in zip(pts, pts[1:]):
        assert f1 >= f0 and t1 >= t0
    assert 0.0 <= curve.auc <= 1.0


def test_auc_empty_input():
    with pytest.raises(DataError):
        roc_auc([], [1.0])
    with pytest.raises(DataError):
        roc_auc([1.0], [])


@given(st.integers(0, 100_000))
@settings(max_examples=100, deadline=None)
def test_auc_equals_mann_whitney_exactly(seed):
    rng = np.random.default_rng(seed)
    nn = int(rng.integers(1, 200))
    na = int(rng.integers(1, 200))
    # integer-ish scores force ties
    normal = rng.integers(0, 30, nn).astype(float)
    adv = rng.integers(0, 30, na).astype(float)
    auc = roc_auc(normal, adv).auc
    gt = 0
    ties = 0
    for a in adv:
        gt += int((a > normal).sum())
        ties += int((a == normal).sum())
    assert auc == (2 * gt + ties) / (2 * nn * na)


# ---------------------------------------------------------------------------
# ks_two_sample


def test_ks_identical_samples():
    d, p = ks_two_sample([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
    assert d == 0.0
    assert p == 1.0


def test_ks_disjoint_supports():
    d, _ = ks_two_sample([1.0, 2.0], [10.0, 11.0])
    assert d == 1.0


def test_ks_hand_case():
    d, _ = ks_two_sample([1.0, 2.0, 3.0], [2.0, 3.0, 4.0])
    # stepwise CDF comparison: the largest gap is one step of 1/3
    assert d == pytest.approx(1.0 / 3.0, abs=1e-15)


def test_ks_empty_sample():
    with pytest.raises(DataError):
        ks_two_sample([], [1.0])


def test_ks_matches_double_loop_exactly():
    rng = np.random.default_rng(5)
    for _ in range(50):
        na, nb = rng.integers(1, 60, 2)
        a = rng.normal(size=na)
        b = rng.normal(size=nb) + rng.normal() * 0.5
        d, _ = ks_two_sample(a, b)
        a_sorted, b_sorted = np.sort(a), np.sort(b)
        best = 0.0
        for v in np.concatenate([a, b]):
            fa = (a_sorted <= v).sum() / na
            fb = (b_sorted <= v).sum() / nb
            best = max(best, abs(fa - fb))
        assert d == best


@given(st.integers(0, 100_000))
@settings(max_examples=60, deadline=None)
def test_ks_symmetric_and_monotone_invariant(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=int(rng.integers(2, 40)))
    b = rng.normal(size=int(rng.integers(2, 40)))
    d_ab, p_ab = ks_two_sample(a, b)
    d_ba, p_ba = ks_two_sample(b, a)
    assert d_ab == d_ba and p_ab == p_ba
    # strictly monotone transform of both samples leaves D unchanged
    d_t, _ = ks_two_sample(np.exp(a), np.exp(b))
    assert d_t == pytest.approx(d_ab, abs=1e-12)


def test_ks_pvalue_behaviour():
    rng = np.random.default_rng(0)
    a = rng.normal(size=400)
    b = rng.normal(size=400) + 2.0
    _, p = ks_two_sample(a, b)
    assert p < 1e-6
    _, p_same = ks_two_sample(a, rng.normal(size=400))
    assert p_same > 0.01


# ---------------------------------------------------------------------------
# corrupt_dataset


def test_corruption_parameters_strictly_monotone():
    for kind, params in CORRUPTION_PARAMS.items():
        diffs = np.diff(params)
        assert (diffs > 0).all() or (diffs < 0).all(), kind


def test_corruption_deterministic():
    x = np.random.default_rng(0).random((3, 8, 8, 1))
    a = corrupt_dataset(x, "gaussian_noise", 3, seed=9)
    b = corrupt_dataset(x, "gaussian_noise", 3, seed=9)
    assert np.array_equal(a, b)
    c = corrupt_dataset(x, "gaussian_noise", 3, seed=10)
    assert not np.array_equal(a, c)


def test_noise_std_matches_parameter():
    x = np.full((2, 64, 64, 1), 0.5)  # mid-gray keeps the clip inactive
    out = corrupt_dataset(x, "gaussian_noise", 1, seed=1)
    measured = (out - x).std()
    assert abs(measured - 0.04) / 0.04 < 0.10


def test_corruption_validation():
    x = np.zeros((1, 8, 8, 1))
    with pytest.raises(ParameterError):
        corrupt_dataset(x, "fog", 1, seed=0)
    with pytest.raises(ParameterError):
        corrupt_dataset(x, "blur", 0, seed=0)
    with pytest.raises(ParameterError):
        corrupt_dataset(x, "blur", 6, seed=0)


def test_corruption_output_domain():
    x = np.random.default_rng(3).random((4, 10, 10, 1))
    for kind in CORRUPTION_PARAMS:
        for sev in (1, 5):
            out = corrupt_dataset(x, kind, sev, seed=2)
            assert out.min() >= 0.0 and out.max() <= 1.0
            assert out.shape == x.shape


def test_blur_preserves_constant_images():
    x = np.full((2, 9, 9, 1), 0.37)
    out = corrupt_dataset(x, "blur", 4, seed=0)
    assert np.allclose(out, 0.37, atol=1e-12)


# ---------------------------------------------------------------------------
# accuracy_report


@pytest.fixture(scope="module")
def small_image_classifier():
    rng = np.random.default_rng(0)
    n, size = 240, 4
    x = rng.random((n, size, size, 1)) * 0.3
    y = (np.arange(n) % 2).astype(np.int64)
    x[y == 1, 1:3, 1:3, 0] += 0.6
    x = np.clip(x, 0, 1)
    clf = build_model(
        ModelSpec("clf", (size, size, 1), (Flatten(), Dense(12), Relu(), Dense(2), Softmax())), 1
    )
    train_classifier(clf, x, y, OptimizerConfig(learning_rate=5e-3, batch_size=32, epochs=40, seed=2))
    clf.store.freeze_all()
    return clf, x, y


def test_accuracy_report_identity_ae_equals_no_defence(small_image_classifier):
    clf, x, y = small_image_classifier
    ae = identity_ae(4)
    noisy = np.clip(x + 0.2 * np.sign(np.random.default_rng(1).normal(size=x.shape)), 0, 1)
    rows = accuracy_report(clf, {"identity": ae}, {"noise": (noisy, y)}, (x, y))
    assert rows[0]["identity"] == rows[0]["no_defence"]
    assert rows[0]["no_attack"] == pytest.approx((clf.predict_class(x) == y).mean())


def test_accuracy_report_csv(tmp_path, small_image_classifier):
    clf, x, y = small_image_classifier
    rows = accuracy_report(clf, {"identity": identity_ae(4)}, {"a": (x, y)}, (x, y))
    path = tmp_path / "report.csv"
    accuracy_report_to_csv(rows, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0].split(",")[:3] == ["attack", "no_attack", "no_defence"]
    assert len(lines) == 2


# ---------------------------------------------------------------------------
# drift_report


def test_drift_severity_zero_matches_clean(small_image_classifier):
    clf, x, y = small_image_classifier
    ae = identity_ae(4)
    report = drift_report(clf, ae, x, y, kinds=("gaussian_noise",), severities=(1,), seed=3)
    row0 = report.rows[0]
    assert row0.severity == 0
    assert row0.n_harmful == 0
    assert row0.accuracy == pytest.approx((clf.predict_class(x) == y).mean())
    assert row0.ks_p is None


def test_drift_rows_partition_the_corrupted_set(small_image_classifier):
    clf, x, y = small_image_classifier
    ae = identity_ae(4)
    kinds = ("gaussian_noise", "contrast")
    report = drift_report(clf, ae, x, y, kinds=kinds, severities=(2, 5), seed=3)
    for row in report.rows[1:]:
        assert row.n_harmful + row.n_not_harmful == x.shape[0] * len(kinds)


def test_drift_empty_group_reported_absent_not_error(small_image_classifier):
    clf, x, y = small_image_classifier
    ae = identity_ae(4)
    # contrast severity 1 on this easy task flips nothing -> harmful group empty
    report = drift_report(clf, ae, x, y, kinds=("contrast",), severities=(1,), seed=3)
    row = report.rows[1]
    if row.n_harmful == 0:
        assert row.harmful_mean is None and row.ks_p is None
    assert row.n_not_harmful > 0


def test_drift_report_serialization(tmp_path, small_image_classifier):
    clf, x, y = small_image_classifier
    report = drift_report(clf, identity_ae(4), x, y, kinds=("gaussian_noise",), severities=(1, 3), seed=0)
    jpath = tmp_path / "drift.json"
    cpath = tmp_path / "drift.csv"
    report.to_json(jpath)
    report.to_csv(cpath)
    data = json.loads(jpath.read_text())
    assert [r["severity"] for r in data["rows"]] == [0, 1, 3]
    assert len(cpath.read_text().strip().splitlines()) == 4


def test_monotone_harm_over_seeds(small_image_classifier):
    clf, x, y = small_image_classifier
    accs = {sev: [] for sev in (1, 2, 3, 4, 5)}
    for seed in range(10):
        for sev in accs:
            xc = corrupt_dataset(x, "gaussian_noise", sev, seed=seed)
            accs[sev].append((clf.predict_class(xc) == y).mean())
    means = [np.mean(accs[sev]) for sev in sorted(accs)]
    inversions = sum(1 for a, b in zip(means, means[1:]) if b > a + 1e-12)
    assert inversions <= 1, means
