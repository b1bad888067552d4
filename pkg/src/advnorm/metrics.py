"""Evaluation metrics: Dice overlap, mean Hausdorff distance, histogram JSD,
bias-field Pearson correlation, and the domain-classifier confusion matrix.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree


class MetricError(ValueError):
    pass


def dsc(pred: np.ndarray, truth: np.ndarray, class_id: int) -> float:
    """Dice similarity 2|S∩G| / (|S|+|G|) for one class; 1.0 if both empty."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise MetricError(f"shape mismatch {pred.shape} vs {truth.shape}")
    s = pred == class_id
    g = truth == class_id
    denom = int(s.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(s, g).sum()) / denom


def _directed_max_min(a: np.ndarray, b: np.ndarray) -> float:
    """max over a of the distance to the nearest point of b."""
    dists, _ = cKDTree(b).query(a, k=1)
    return float(np.max(dists))


def mhd(mask_s: np.ndarray, mask_g: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> float:
    """Mean of the two directed maximum nearest-point distances, in mm."""
    s_idx = np.argwhere(np.asarray(mask_s, dtype=bool))
    g_idx = np.argwhere(np.asarray(mask_g, dtype=bool))
    if len(s_idx) == 0 or len(g_idx) == 0:
        raise MetricError("mean Hausdorff distance requires two non-empty masks")
    sp = np.asarray(spacing, dtype=np.float64)
    a = s_idx * sp
    b = g_idx * sp
    return 0.5 * (_directed_max_min(a, b) + _directed_max_min(b, a))


def intensity_histogram(values: np.ndarray, bins: int = 256,
                        value_range=(0.0, 1.0)) -> np.ndarray:
    """Normalized histogram; values are clipped into the range so no mass is lost."""
    values = np.clip(np.asarray(values, dtype=np.float64).ravel(), *value_range)
    hist, _ = np.histogram(values, bins=bins, range=value_range)
    total = hist.sum()
    if total == 0:
        raise MetricError("empty intensity group")
    return hist / total


def _entropy(p: np.ndarray) -> float:
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)))


def histogram_jsd(groups, bins: int = 256, value_range=(0.0, 1.0)) -> float:
    """Generalized Jensen-Shannon divergence with uniform weights, natural log.

    ``groups`` is one intensity array per domain (foreground voxels only in
    the harmonization reports). 0 for identical histograms, at most log K.
    """
    groups = list(groups)
    if len(groups) < 2:
        raise MetricError("need at least two groups")
    hists = [intensity_histogram(g, bins, value_range) for g in groups]
    mean_hist = np.mean(hists, axis=0)
    return _entropy(mean_hist) - float(np.mean([_entropy(h) for h in hists]))


def pearson_vs_y(volume, mask: np.ndarray | None = None, axis: int = 1,
                 channel: int = 0, slice_index: int | None = None) -> float:
    """Sample Pearson correlation between voxel intensity and position along an
    axis (default y), over the mask. ``slice_index`` restricts to one z-slice.
    """
    data = volume.data[channel] if hasattr(volume, "data") else np.asarray(volume)
    if mask is None:
        mask = np.ones(data.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if slice_index is not None:
        plane = np.zeros_like(mask)
        plane[:, :, slice_index] = True
        mask = mask & plane
    pos = np.indices(data.shape)[axis]
    x = data[mask].astype(np.float64)
    y = pos[mask].astype(np.float64)
    if x.size < 2 or y.std() == 0:
        raise MetricError("need >= 2 masked voxels with positional variance")
    if x.std() == 0:
        raise MetricError("intensity variance is zero over the mask")
    return float(np.corrcoef(x, y)[0, 1])


def confusion_matrix(preds, trues, domains: int) -> np.ndarray:
    """(K+1)x(K+1) matrix of counts normalized by the total number of samples.

    Rows are true classes, columns predictions; classes 0..K-1 are domains and
    K is the generated class.
    """
    preds = np.asarray(preds, dtype=np.int64).ravel()
    trues = np.asarray(trues, dtype=np.int64).ravel()
    if preds.shape != trues.shape:
        raise MetricError("predictions and true classes differ in length")
    k1 = domains + 1
    if preds.size == 0:
        raise MetricError("no samples")
    for name, arr in (("prediction", preds), ("true class", trues)):
        if arr.min() < 0 or arr.max() >= k1:
            raise MetricError(f"{name} outside 0..{k1 - 1}: "
                              f"range [{arr.min()}, {arr.max()}]")
    mat = np.zeros((k1, k1), dtype=np.float64)
    for t, p in zip(trues, preds):
        mat[t, p] += 1
    return mat / preds.size


FOREGROUND_CLASSES = (1, 2, 3)  # WM, GM, CSF


@dataclass
class MetricReport:
    """Aggregated evaluation result; optional fields stay None when the
    corresponding measurement was not run."""

    per_class_dsc: dict[str, float] = field(default_factory=dict)
    per_class_mhd: dict[str, float] = field(default_factory=dict)
    mean_dsc: float | None = None
    mean_mhd: float | None = None
    jsd: float | None = None
    pearson: float | None = None
    confusion: np.ndarray | None = None
    discriminator_accuracy: float | None = None
    extra: dict[str, float] = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["key", "value"])
        for name, val in sorted(self.per_class_dsc.items()):
            writer.writerow([f"dsc_{name}", repr(float(val))])
        for name, val in sorted(self.per_class_mhd.items()):
            writer.writerow([f"mhd_{name}", repr(float(val))])
        for key in ("mean_dsc", "mean_mhd", "jsd", "pearson", "discriminator_accuracy"):
            val = getattr(self, key)
            if val is not None:
                writer.writerow([key, repr(float(val))])
        if self.confusion is not None:
            k1 = self.confusion.shape[0]
            writer.writerow(["confusion_size", str(k1)])
            for i in range(k1):
                for j in range(k1):
                    writer.writerow([f"confusion_{i}_{j}", repr(float(self.confusion[i, j]))])
        for key, val in sorted(self.extra.items()):
            writer.writerow([f"extra_{key}", repr(float(val))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "MetricReport":
        report = cls()
        rows = list(csv.reader(io.StringIO(text)))[1:]
        values = {key: val for key, val in rows if key}
        size = values.pop("confusion_size", None)
        if size is not None:
            k1 = int(size)
            mat = np.zeros((k1, k1))
            for i in range(k1):
                for j in range(k1):
                    mat[i, j] = float(values.pop(f"confusion_{i}_{j}"))
            report.confusion = mat
        for key, val in values.items():
            num = float(val)
            if key.startswith("dsc_"):
                report.per_class_dsc[key[4:]] = num
            elif key.startswith("mhd_"):
                report.per_class_mhd[key[4:]] = num
            elif key.startswith("extra_"):
                report.extra[key[6:]] = num
            else:
                setattr(report, key, num)
        return report


def segmentation_report(pred_labels: np.ndarray, truth_labels: np.ndarray,
                        spacing=(1.0, 1.0, 1.0)) -> MetricReport:
    """Per-class DSC and MHD over the foreground tissue classes.

    The mean DSC/MHD aggregate the foreground classes only, matching the
    convention of per-tissue segmentation tables. MHD of a class missing from
    either mask is skipped (reported as NaN).
    """
    from .volume import CLASS_NAMES

    report = MetricReport()
    dscs, mhds = [], []
    for c in FOREGROUND_CLASSES:
        name = CLASS_NAMES[c]
        d = dsc(pred_labels, truth_labels, c)
        report.per_class_dsc[name] = d
        dscs.append(d)
        s_mask = pred_labels == c
        g_mask = truth_labels == c
        if s_mask.any() and g_mask.any():
            h = mhd(s_mask, g_mask, spacing)
            report.per_class_mhd[name] = h
            mhds.append(h)
        else:
            report.per_class_mhd[name] = float("nan")
    report.mean_dsc = float(np.mean(dscs))
    report.mean_mhd = float(np.mean(mhds)) if mhds else float("nan")
    return report
