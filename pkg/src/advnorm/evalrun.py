"""Whole-suite evaluation: segmentation metric grids, histogram divergence
before/after normalization, bias-field correlation sweeps and discriminator
confusion, with CSV emission for the report command.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .augment import BiasFieldParams, apply_bias
from .config import ExperimentConfig
from .fileio import (read_labeled_raw, read_manifest, read_nifti,
                     write_labels_raw, write_manifest, write_nifti,
                     write_volume_raw)
from .losses import AdversarialConfig
from .metrics import (MetricReport, histogram_jsd, intensity_histogram,
                      pearson_vs_y, segmentation_report)
from .nets import ModelBundle
from .synth import DomainProfile, DomainSuite, PhantomSpec, Subject, make_domain_suite, profile_presets
from .trainer import build_patch_dataset, discriminator_report, normalize_and_segment
from .volume import LabeledVolume


class EvalError(RuntimeError):
    pass


def make_suite(cfg: ExperimentConfig) -> DomainSuite:
    presets = profile_presets()
    if cfg.data.preset not in presets:
        raise EvalError(f"unknown profile preset {cfg.data.preset!r}; "
                        f"choose from {sorted(presets)}")
    template = PhantomSpec(shape=tuple(cfg.data.shape),
                           deform_amplitude=cfg.data.deform_amplitude)
    return make_domain_suite(presets[cfg.data.preset],
                             subjects_per_domain=cfg.data.subjects_per_domain,
                             spec_template=template, seed=cfg.data.seed)


def suite_to_disk(suite: DomainSuite, out_dir, fmt: str = "raw") -> Path:
    """Write every subject (raw or NIfTI format) plus a manifest; returns its path."""
    if fmt not in ("raw", "nifti"):
        raise EvalError(f"unknown volume format {fmt!r} (raw or nifti)")
    out_dir = Path(out_dir)
    rows = []
    for subject in suite.subjects:
        stem = f"{subject.subject_id}_{subject.split}"
        if fmt == "raw":
            vol_name, lab_name = f"{stem}_img.raw", f"{stem}_lab.raw"
            write_volume_raw(out_dir / f"{stem}_img", subject.image.volume)
            write_labels_raw(out_dir / f"{stem}_lab", subject.image)
        else:
            vol_name, lab_name = f"{stem}_img.nii.gz", f"{stem}_lab.nii.gz"
            write_nifti(out_dir / vol_name, subject.image.volume.data,
                        subject.image.volume.spacing)
            write_nifti(out_dir / lab_name, subject.image.labels[None],
                        subject.image.volume.spacing)
        rows.append((vol_name, lab_name, subject.domain, subject.split,
                     subject.subject_id))
    manifest = out_dir / "manifest.tsv"
    write_manifest(manifest, rows)
    return manifest


def suite_from_disk(manifest_path, profiles=None) -> DomainSuite:
    manifest_path = Path(manifest_path)
    rows = read_manifest(manifest_path)
    subjects = []
    domains = set()
    for vol_rel, lab_rel, domain, split, subject_id in rows:
        if vol_rel.endswith((".nii", ".nii.gz")):
            vol = read_nifti(manifest_path.parent / vol_rel)
            labels = read_nifti(manifest_path.parent / lab_rel).data[0]
            lv = LabeledVolume(vol, labels.astype(np.uint8))
        else:
            lv = read_labeled_raw(manifest_path.parent / vol_rel,
                                  manifest_path.parent / lab_rel)
        subjects.append(Subject(image=lv, domain=domain, split=split,
                                subject_id=subject_id))
        domains.add(domain)
    profs = profiles or [DomainProfile(name=f"domain{z}") for z in sorted(domains)]
    return DomainSuite(profiles=profs, subjects=subjects)


def _foreground_values(volume, labels, channel: int = 0) -> np.ndarray:
    return volume.data[channel][labels != 0]


def _mean_intensity_per_y(volume, mask, channel: int = 0) -> np.ndarray:
    """Mean foreground intensity at each y index (NaN where the slab is empty)."""
    data = volume.data[channel]
    out = np.full(data.shape[1], np.nan)
    for y in range(data.shape[1]):
        slab = mask[:, y, :]
        if slab.any():
            out[y] = float(data[:, y, :][slab].mean())
    return out


def evaluate_suite(bundle: ModelBundle, suite: DomainSuite, cfg: ExperimentConfig,
                   out_dir=None) -> dict:
    """Evaluate a trained bundle over one split of a suite.

    Returns a result dict with per-domain segmentation reports, raw and
    normalized histogram JSD, a bias-correlation sweep and (when a
    discriminator is present) its confusion matrix and accuracy. CSV files are
    written when ``out_dir`` is given.
    """
    tcfg = cfg.train
    split = cfg.eval.split
    subjects = suite.split(split)
    if not subjects:
        raise EvalError(f"split {split!r} is empty")
    results: dict = {"split": split, "per_domain": {}, "mode": tcfg.mode_label}
    raw_fg: dict[int, list[np.ndarray]] = {}
    norm_fg: dict[int, list[np.ndarray]] = {}
    test_alpha = float(cfg.eval.bias_alpha)
    for subject in subjects:
        lv = subject.image
        vol = lv.volume
        if test_alpha > 0:
            vol = apply_bias(vol, BiasFieldParams(alpha=test_alpha))
        pred, _, normalized = normalize_and_segment(bundle, vol, tcfg)
        report = segmentation_report(pred, lv.labels, vol.spacing)
        results["per_domain"].setdefault(subject.domain, []).append(report)
        raw_fg.setdefault(subject.domain, []).append(_foreground_values(vol, lv.labels))
        norm_fg.setdefault(subject.domain, []).append(
            _foreground_values(normalized, lv.labels))
    domain_means = {}
    for z, reports in results["per_domain"].items():
        domain_means[z] = float(np.mean([r.mean_dsc for r in reports]))
    results["mean_dsc_per_domain"] = domain_means
    results["mean_dsc"] = float(np.mean(list(domain_means.values())))

    raw_groups = [np.concatenate(raw_fg[z]) for z in sorted(raw_fg)]
    norm_groups = [np.concatenate(norm_fg[z]) for z in sorted(norm_fg)]
    if len(raw_groups) >= 2:
        results["jsd_raw"] = histogram_jsd(raw_groups, bins=cfg.eval.jsd_bins)
        results["jsd_normalized"] = histogram_jsd(norm_groups, bins=cfg.eval.jsd_bins)
    results["histograms"] = {
        "raw": {z: intensity_histogram(np.concatenate(raw_fg[z]), cfg.eval.jsd_bins)
                for z in sorted(raw_fg)},
        "normalized": {z: intensity_histogram(np.concatenate(norm_fg[z]),
                                              cfg.eval.jsd_bins)
                       for z in sorted(norm_fg)},
    }

    # bias-correlation sweep: degrade, re-normalize, compare |rho|
    slice_index = None if cfg.eval.pearson_slice < 0 else cfg.eval.pearson_slice
    sweep = []
    y_curves = []
    if cfg.eval.bias_alphas:
        for alpha in cfg.eval.bias_alphas:
            rows = []
            deg_curve, norm_curve = [], []
            for subject in subjects:
                lv = subject.image
                degraded = apply_bias(lv.volume, BiasFieldParams(alpha=float(alpha)))
                _, _, renorm = normalize_and_segment(bundle, degraded, tcfg)
                mask = lv.labels != 0
                rows.append((
                    subject.domain,
                    pearson_vs_y(degraded, mask, slice_index=slice_index),
                    pearson_vs_y(renorm, mask, slice_index=slice_index),
                ))
                deg_curve.append(_mean_intensity_per_y(degraded, mask))
                norm_curve.append(_mean_intensity_per_y(renorm, mask))
            for z in sorted({r[0] for r in rows}):
                rhos_d = [r[1] for r in rows if r[0] == z]
                rhos_n = [r[2] for r in rows if r[0] == z]
                sweep.append({"alpha": float(alpha), "domain": z,
                              "rho_degraded": float(np.mean(rhos_d)),
                              "rho_normalized": float(np.mean(rhos_n))})
            deg_mean = np.nanmean(np.stack(deg_curve), axis=0)
            norm_mean = np.nanmean(np.stack(norm_curve), axis=0)
            for y in range(len(deg_mean)):
                if np.isfinite(deg_mean[y]) and np.isfinite(norm_mean[y]):
                    y_curves.append({"alpha": float(alpha), "y": y,
                                     "degraded": float(deg_mean[y]),
                                     "normalized": float(norm_mean[y])})
    results["pearson_sweep"] = sweep
    results["y_curves"] = y_curves
    baseline_rho = {}
    for subject in subjects:
        mask = subject.image.labels != 0
        rho = pearson_vs_y(subject.image.volume, mask, slice_index=slice_index)
        baseline_rho.setdefault(subject.domain, []).append(rho)
    results["pearson_original"] = {z: float(np.mean(v))
                                   for z, v in baseline_rho.items()}

    if bundle.discriminator is not None:
        eval_patches = build_patch_dataset(
            suite, split, cfg.eval.disc_patches_per_domain, tcfg,
            seed=cfg.data.seed + 101)
        adv = AdversarialConfig(lam=max(tcfg.lam, 1e-9), domains=suite.n_domains)
        confusion, accuracy = discriminator_report(bundle, eval_patches.pools,
                                                   adv, tcfg)
        results["confusion"] = confusion
        results["disc_accuracy"] = accuracy

    if out_dir is not None:
        write_eval_outputs(results, out_dir)
    return results


# ---------------------------------------------------------------------------
# CSV emission / ingestion
# ---------------------------------------------------------------------------

def write_eval_outputs(results: dict, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    def nanmean(values):
        finite = [v for v in values if not np.isnan(v)]
        return float(np.mean(finite)) if finite else float("nan")

    for z, reports in results["per_domain"].items():
        merged = MetricReport(
            per_class_dsc={k: float(np.mean([r.per_class_dsc[k] for r in reports]))
                           for k in reports[0].per_class_dsc},
            per_class_mhd={k: nanmean([r.per_class_mhd[k] for r in reports])
                           for k in reports[0].per_class_mhd},
            mean_dsc=float(np.mean([r.mean_dsc for r in reports])),
            mean_mhd=nanmean([r.mean_mhd for r in reports]),
        )
        (out_dir / f"report_domain{z}.csv").write_text(merged.to_csv())
    with open(out_dir / "summary.csv", "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["key", "value"])
        writer.writerow(["mode", results.get("mode", "")])
        writer.writerow(["split", results["split"]])
        writer.writerow(["mean_dsc", repr(results["mean_dsc"])])
        for z, v in sorted(results["mean_dsc_per_domain"].items()):
            writer.writerow([f"mean_dsc_domain{z}", repr(v)])
        for key in ("jsd_raw", "jsd_normalized", "disc_accuracy"):
            if key in results:
                writer.writerow([key, repr(float(results[key]))])
        for z, v in sorted(results.get("pearson_original", {}).items()):
            writer.writerow([f"pearson_original_domain{z}", repr(v)])
    if results.get("pearson_sweep"):
        with open(out_dir / "pearson.csv", "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["alpha", "domain", "rho_degraded", "rho_normalized"])
            for row in results["pearson_sweep"]:
                writer.writerow([row["alpha"], row["domain"],
                                 repr(row["rho_degraded"]), repr(row["rho_normalized"])])
    if results.get("y_curves"):
        with open(out_dir / "intensity_vs_y.csv", "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["alpha", "y", "degraded", "normalized"])
            for row in results["y_curves"]:
                writer.writerow([row["alpha"], row["y"],
                                 repr(row["degraded"]), repr(row["normalized"])])
    if "confusion" in results:
        mat = results["confusion"]
        with open(out_dir / "confusion.csv", "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow([f"pred{j}" for j in range(mat.shape[1])])
            for row in mat:
                writer.writerow([repr(float(v)) for v in row])
    hists = results.get("histograms")
    if hists:
        with open(out_dir / "histograms.csv", "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["kind", "domain", "bin", "density"])
            for kind in ("raw", "normalized"):
                for z, hist in sorted(hists[kind].items()):
                    for b, v in enumerate(hist):
                        writer.writerow([kind, z, b, repr(float(v))])


def read_summary(path) -> dict:
    rows = list(csv.reader(open(path)))[1:]
    out = {}
    for key, value in rows:
        try:
            out[key] = float(value)
        except ValueError:
            out[key] = value
    return out
