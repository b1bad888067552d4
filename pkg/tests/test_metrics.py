import numpy as np
import pytest

from advnorm.metrics import (MetricError, MetricReport, confusion_matrix, dsc,
                             histogram_jsd, intensity_histogram, mhd,
                             pearson_vs_y, segmentation_report)
from advnorm.volume import Volume


# ---------------------------------------------------------------------------
# DSC
# ---------------------------------------------------------------------------

def test_dsc_perfect_overlap():
    labels = np.random.default_rng(0).integers(0, 4, size=(6, 6, 6))
    assert dsc(labels, labels, 2) == 1.0


def test_dsc_disjoint_masks():
    a = np.zeros((4, 4, 4), dtype=int)
    b = np.zeros((4, 4, 4), dtype=int)
    a[0, 0, 0] = 1
    b[1, 1, 1] = 1
    assert dsc(a, b, 1) == 0.0


def test_dsc_hand_count():
    # |S|=|G|=8 with 4 overlapping voxels: 2*4 / 16 = 0.5
    a = np.zeros((4, 4, 4), dtype=int)
    b = np.zeros((4, 4, 4), dtype=int)
    a[0, 0, :4] = 1
    a[1, 0, :4] = 1
    b[1, 0, :4] = 1
    b[2, 0, :4] = 1
    assert dsc(a, b, 1) == 0.5


def test_dsc_empty_masks_convention_and_symmetry():
    a = np.zeros((3, 3, 3), dtype=int)
    assert dsc(a, a, 3) == 1.0
    b = a.copy()
    b[0, 0, 0] = 3
    assert dsc(a, b, 3) == dsc(b, a, 3) == 0.0


def test_dsc_shape_mismatch():
    with pytest.raises(MetricError):
        dsc(np.zeros((2, 2, 2)), np.zeros((3, 2, 2)), 0)


# ---------------------------------------------------------------------------
# MHD
# ---------------------------------------------------------------------------

def mhd_brute_force(mask_s, mask_g, spacing=(1.0, 1.0, 1.0)):
    """O(|S||G|) double loop oracle."""
    s = np.argwhere(mask_s) * np.asarray(spacing)
    g = np.argwhere(mask_g) * np.asarray(spacing)
    d_sg = max(min(np.linalg.norm(p - q) for q in g) for p in s)
    d_gs = max(min(np.linalg.norm(q - p) for p in s) for q in g)
    return 0.5 * (d_sg + d_gs)


def test_mhd_identical_masks():
    mask = np.zeros((5, 5, 5), dtype=bool)
    mask[1:3, 2, 2] = True
    assert mhd(mask, mask) == 0.0


def test_mhd_singleton_points():
    a = np.zeros((8, 8, 8), dtype=bool)
    b = np.zeros((8, 8, 8), dtype=bool)
    a[1, 1, 1] = True
    b[1, 4, 1] = True
    assert mhd(a, b, (1.0, 1.0, 1.0)) == pytest.approx(3.0)


def test_mhd_matches_brute_force_on_random_masks():
    rng = np.random.default_rng(4)
    for trial in range(10):
        a = rng.random((7, 7, 7)) < 0.15
        b = rng.random((7, 7, 7)) < 0.15
        if not (a.any() and b.any()):
            continue
        spacing = tuple(rng.uniform(0.5, 2.0, size=3))
        assert mhd(a, b, spacing) == pytest.approx(
            mhd_brute_force(a, b, spacing), abs=1e-9)


def test_mhd_symmetry_and_spacing():
    rng = np.random.default_rng(5)
    a = rng.random((6, 6, 6)) < 0.2
    b = rng.random((6, 6, 6)) < 0.2
    assert mhd(a, b) == pytest.approx(mhd(b, a), abs=1e-12)
    assert mhd(a, b, (2.0, 2.0, 2.0)) == pytest.approx(2 * mhd(a, b), abs=1e-9)


def test_mhd_rejects_empty_mask():
    a = np.zeros((3, 3, 3), dtype=bool)
    b = a.copy()
    b[0, 0, 0] = True
    with pytest.raises(MetricError):
        mhd(a, b)


# ---------------------------------------------------------------------------
# histogram JSD
# ---------------------------------------------------------------------------

def jsd_direct_summation(groups, bins=256):
    """Direct elementwise oracle: H(mean of histograms) - mean of entropies."""
    hists = [intensity_histogram(g, bins) for g in groups]
    mean = np.zeros(bins)
    for h in hists:
        mean += h / len(hists)
    def entropy(p):
        total = 0.0
        for v in p:
            if v > 0:
                total -= v * np.log(v)
        return total
    return entropy(mean) - sum(entropy(h) for h in hists) / len(hists)


def test_jsd_identical_groups_is_zero():
    vals = np.random.default_rng(0).random(5000)
    assert histogram_jsd([vals, vals.copy()]) == pytest.approx(0.0, abs=1e-12)


def test_jsd_disjoint_support_reaches_log2():
    lo = np.random.default_rng(1).uniform(0.0, 0.3, 4000)
    hi = np.random.default_rng(2).uniform(0.6, 0.9, 4000)
    assert histogram_jsd([lo, hi]) == pytest.approx(np.log(2), abs=1e-9)


def test_jsd_matches_direct_summation_oracle():
    rng = np.random.default_rng(3)
    a = np.clip(rng.normal(0.4, 0.1, 6000), 0, 1)
    b = np.clip(rng.normal(0.6, 0.15, 6000), 0, 1)
    assert histogram_jsd([a, b]) == pytest.approx(jsd_direct_summation([a, b]),
                                                  abs=1e-9)


def test_jsd_bounds_and_order_invariance():
    rng = np.random.default_rng(4)
    groups = [rng.random(2000), rng.random(2000) * 0.5, rng.random(2000) * 0.8]
    val = histogram_jsd(groups)
    assert 0.0 <= val <= np.log(3)
    assert histogram_jsd(groups[::-1]) == pytest.approx(val, abs=1e-12)


def test_jsd_rejects_single_group():
    with pytest.raises(MetricError):
        histogram_jsd([np.ones(10)])


# ---------------------------------------------------------------------------
# Pearson correlation vs y
# ---------------------------------------------------------------------------

def test_pearson_perfect_ramp():
    shape = (6, 10, 6)
    y = np.indices(shape)[1].astype(np.float32)
    assert pearson_vs_y(Volume(y[None])) == pytest.approx(1.0)
    assert pearson_vs_y(Volume(-y[None])) == pytest.approx(-1.0)


def test_pearson_independent_intensity_is_near_zero():
    rng = np.random.default_rng(6)
    data = rng.random((1, 22, 22, 22)).astype(np.float32)  # > 10^4 voxels
    assert abs(pearson_vs_y(Volume(data))) < 0.05


def test_pearson_affine_invariance():
    rng = np.random.default_rng(7)
    data = rng.random((1, 8, 12, 8)).astype(np.float32)
    v = Volume(data)
    rho = pearson_vs_y(v)
    affine = Volume((3.5 * data + 0.7).astype(np.float32))
    assert pearson_vs_y(affine) == pytest.approx(rho, abs=1e-5)


def test_pearson_slice_option():
    shape = (6, 10, 6)
    y = np.indices(shape)[1].astype(np.float32)
    assert pearson_vs_y(Volume(y[None]), slice_index=2) == pytest.approx(1.0)


def test_pearson_degenerate_inputs():
    flat = Volume(np.ones((1, 4, 4, 4), dtype=np.float32))
    with pytest.raises(MetricError):
        pearson_vs_y(flat)
    mask = np.zeros((4, 4, 4), dtype=bool)
    mask[0, 0, 0] = True
    with pytest.raises(MetricError):
        pearson_vs_y(flat, mask)


# ---------------------------------------------------------------------------
# confusion matrix
# ---------------------------------------------------------------------------

def test_confusion_all_correct_is_diagonal_priors():
    trues = [0, 0, 1, 2, 2, 2]
    mat = confusion_matrix(trues, trues, domains=2)
    np.testing.assert_allclose(np.diag(mat), [2 / 6, 1 / 6, 3 / 6])
    assert mat.sum() == pytest.approx(1.0)


def test_confusion_single_sample():
    mat = confusion_matrix([2], [1], domains=2)
    assert mat[1, 2] == 1.0
    assert mat.sum() == 1.0


def test_confusion_matches_counting_oracle():
    rng = np.random.default_rng(8)
    K = 3
    trues = rng.integers(0, K + 1, 500)
    preds = rng.integers(0, K + 1, 500)
    mat = confusion_matrix(preds, trues, domains=K)
    counts = np.zeros((K + 1, K + 1))
    for t, p in zip(trues, preds):
        counts[t, p] += 1
    np.testing.assert_array_equal(mat, counts / 500)


def test_confusion_rejects_out_of_range():
    with pytest.raises(MetricError):
        confusion_matrix([3], [0], domains=2)


# ---------------------------------------------------------------------------
# MetricReport round trip
# ---------------------------------------------------------------------------

def test_metric_report_csv_round_trip():
    report = MetricReport(
        per_class_dsc={"WM": 0.91, "GM": 0.85, "CSF": 0.88},
        per_class_mhd={"WM": 0.5, "GM": 0.75, "CSF": 0.33},
        mean_dsc=0.88, mean_mhd=0.5266666,
        jsd=0.123456789, pearson=-0.02,
        confusion=np.array([[0.4, 0.1, 0.0], [0.1, 0.3, 0.0], [0.05, 0.05, 0.0]]),
        discriminator_accuracy=0.44,
        extra={"jsd_raw": 0.9})
    back = MetricReport.from_csv(report.to_csv())
    assert back.per_class_dsc == report.per_class_dsc
    assert back.mean_dsc == report.mean_dsc
    assert back.jsd == report.jsd
    assert back.extra == report.extra
    np.testing.assert_array_equal(back.confusion, report.confusion)


def test_segmentation_report_perfect_prediction():
    labels = np.random.default_rng(9).integers(0, 4, size=(10, 10, 10))
    report = segmentation_report(labels, labels)
    assert report.mean_dsc == 1.0
    assert report.mean_mhd == 0.0
