"""Adversarial training loop: interleaved discriminator / segmenter / generator
updates with stratified domain batches, bias-field augmentation, learning-rate
schedules and checkpointing.

Each iteration performs ``n_steps`` discriminator updates (real patches labeled
by their domain, generator outputs labeled as the extra generated class),
followed by one joint segmenter/generator update in which the generator
descends the segmentation loss while ascending the discriminator's
generated-class loss, scaled by lambda. The discriminator keeps a faster
update schedule to stay near its optimal domain classification.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .augment import augment_batch, standardize
from .losses import (AdversarialConfig, DiceConfig, dice_loss, discriminator_nll,
                     generator_objective, one_hot)
from .metrics import confusion_matrix, segmentation_report
from .nets import ModelBundle, save_checkpoint
from .synth import DomainSuite
from .volume import (LabeledVolume, Volume, pad_to_min, patch_grid, ProbabilityMap,
                     sample_foreground_patches)


class TrainerError(RuntimeError):
    pass


class TrainingDiverged(TrainerError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 8
    n_epochs: int = 10
    n_iter: int | None = None          # derived from the patch budget when None
    n_steps: int = 3
    lam: float = 1.5
    lr_gs: float = 1e-3
    lr_d: float = 1e-4
    weight_decay: float = 1e-3
    gs_milestones: tuple[int, ...] = (50, 75)
    gs_gamma: float = 0.1
    d_plateau_patience: int = 7
    d_plateau_factor: float = 0.1
    augment_prob: float = 0.5
    train_patches_per_domain: int = 2000
    val_patches_per_domain: int = 500
    patch_size: int = 32
    stride: int = 8
    seed: int = 0
    normalizer: str = "generator"      # generator | standardize | none

    def __post_init__(self):
        if self.lr_gs <= 0 or self.lr_d <= 0:
            raise TrainerError("learning rates must be positive")
        if self.n_steps < 1:
            raise TrainerError(f"n_steps must be >= 1, got {self.n_steps}")
        if self.d_plateau_patience < 1:
            raise TrainerError("plateau patience must be >= 1")
        if self.lam < 0:
            raise TrainerError(f"lambda must be >= 0, got {self.lam}")
        if self.normalizer not in ("generator", "standardize", "none"):
            raise TrainerError(f"unknown normalizer {self.normalizer!r}")
        if not 0.0 <= self.augment_prob <= 1.0:
            raise TrainerError(f"augment_prob must lie in [0,1]")

    @property
    def adversarial(self) -> bool:
        return self.normalizer == "generator" and self.lam > 0

    @property
    def mode_label(self) -> str:
        if self.normalizer == "generator":
            return "adversarial" if self.lam > 0 else "pre-processor"
        if self.normalizer == "standardize":
            return "standardization"
        return "segmenter-only"


def gs_learning_rate(epoch: int, cfg: TrainConfig) -> float:
    """Generator/segmenter rate as a pure function of the (1-based) epoch.

    Each milestone decays the rate starting from the following epoch, i.e.
    the decay happens when the milestone epoch completes.
    """
    rate = cfg.lr_gs
    for m in cfg.gs_milestones:
        if epoch > m:
            rate *= cfg.gs_gamma
    return rate


def d_learning_rate(val_losses, cfg: TrainConfig) -> float:
    """Discriminator rate as a pure function of its validation-loss history:
    reduce-on-plateau with the configured factor and patience."""
    rate = cfg.lr_d
    best = math.inf
    streak = 0
    for loss in val_losses:
        if loss < best:
            best = loss
            streak = 0
        else:
            streak += 1
            if streak > cfg.d_plateau_patience:
                rate *= cfg.d_plateau_factor
                streak = 0
    return rate


@dataclass
class DomainSample:
    """One training example: an image patch, its labels and provenance."""

    x: np.ndarray          # (C, p, p, p) float32
    y: np.ndarray          # (p, p, p) uint8
    domain: int            # 0-based domain id; the generated class is K
    y_offset: int          # patch origin along the bias-field axis
    parent_height: int


class PatchDataset:
    """Pre-sampled foreground-centered patch pools, one per domain."""

    def __init__(self, pools: dict[int, list[DomainSample]]):
        if not pools or any(len(p) == 0 for p in pools.values()):
            raise TrainerError("every domain needs at least one sample")
        self.pools = pools

    @property
    def domains(self) -> list[int]:
        return sorted(self.pools)

    def total(self) -> int:
        return sum(len(p) for p in self.pools.values())


def build_patch_dataset(suite: DomainSuite, split: str, per_domain: int,
                        cfg: TrainConfig, seed: int) -> PatchDataset:
    """Sample the per-domain patch budget from the subjects of one split."""
    pools: dict[int, list[DomainSample]] = {}
    for z in range(suite.n_domains):
        subjects = suite.domain_split(z, split)
        if not subjects:
            raise TrainerError(f"domain {z} has no subjects in split {split!r}")
        counts = [per_domain // len(subjects)] * len(subjects)
        for i in range(per_domain - sum(counts)):
            counts[i] += 1
        pool: list[DomainSample] = []
        for s_idx, (subject, count) in enumerate(zip(subjects, counts)):
            if count == 0:
                continue
            lv = subject.image
            if cfg.normalizer == "standardize":
                lv = LabeledVolume(standardize(lv.volume), lv.labels)
            lv = pad_to_min(lv, cfg.patch_size)
            draws = sample_foreground_patches(
                lv, count, patch=cfg.patch_size,
                seed=np.random.default_rng([seed, z, s_idx]))
            for vol_patch, lab_patch, center in draws:
                origin = [int(np.clip(center[ax] - cfg.patch_size // 2, 0,
                                      lv.shape[ax] - cfg.patch_size))
                          for ax in range(3)]
                pool.append(DomainSample(
                    x=vol_patch.data, y=lab_patch, domain=z,
                    y_offset=origin[1], parent_height=lv.shape[1]))
        pools[z] = pool
    return PatchDataset(pools)


def sample_batch(dataset: PatchDataset, m: int, rng: np.random.Generator):
    """Stratified batch: floor(m/K) per domain, remainder uniform at random."""
    domains = dataset.domains
    counts = {z: m // len(domains) for z in domains}
    for _ in range(m - sum(counts.values())):
        counts[domains[rng.integers(len(domains))]] += 1
    batch: list[DomainSample] = []
    for z in domains:
        pool = dataset.pools[z]
        for _ in range(counts[z]):
            batch.append(pool[rng.integers(len(pool))])
    return batch


@dataclass
class TrainState:
    bundle: ModelBundle
    optimizers: dict
    config: TrainConfig
    adv_cfg: AdversarialConfig | None
    dice_cfg: DiceConfig
    epoch: int = 0
    history: list[dict] = field(default_factory=list)
    d_updates: int = 0
    gs_updates: int = 0
    rngs: dict = field(default_factory=dict)


def init_state(bundle: ModelBundle, cfg: TrainConfig, domains: int) -> TrainState:
    optimizers = {"segmenter": torch.optim.AdamW(
        bundle.segmenter.parameters(), lr=cfg.lr_gs, weight_decay=cfg.weight_decay)}
    if bundle.generator is not None:
        optimizers["generator"] = torch.optim.AdamW(
            bundle.generator.parameters(), lr=cfg.lr_gs, weight_decay=cfg.weight_decay)
    if bundle.discriminator is not None:
        optimizers["discriminator"] = torch.optim.AdamW(
            bundle.discriminator.parameters(), lr=cfg.lr_d,
            weight_decay=cfg.weight_decay)
    adv = (AdversarialConfig(lam=cfg.lam, domains=domains)
           if bundle.discriminator is not None else None)
    streams = np.random.SeedSequence(cfg.seed).spawn(6)
    rngs = dict(zip(("d_batch", "gs_batch", "d_augment", "gs_augment", "val", "torch"),
                    (np.random.default_rng(s) for s in streams)))
    torch.manual_seed(int(rngs["torch"].integers(2 ** 31)))
    return TrainState(bundle=bundle, optimizers=optimizers, config=cfg,
                      adv_cfg=adv, dice_cfg=DiceConfig(), rngs=rngs)


def _batch_tensors(batch, cfg: TrainConfig, rng: np.random.Generator | None):
    """Stack a batch; bias-degrade inputs (in parent-volume coordinates) when a
    stream is given."""
    xs = [s.x for s in batch]
    if rng is not None and cfg.augment_prob > 0:
        xs, _, _ = augment_batch(
            xs, [s.y_offset for s in batch], batch[0].parent_height,
            prob=cfg.augment_prob, seed=rng)
    x = torch.from_numpy(np.stack(xs).astype(np.float32))
    y = torch.from_numpy(np.stack([s.y for s in batch]).astype(np.int64))
    z = torch.tensor([s.domain for s in batch], dtype=torch.long)
    return x, y, z


def _check_finite(value: torch.Tensor, context: str):
    if not torch.isfinite(value).all():
        raise TrainingDiverged(f"non-finite loss in {context}: {value}")


def discriminator_step(state: TrainState, batch) -> float:
    """One optimizer step on D's real-domain plus generated-class NLL.

    Only the discriminator parameters change; the generator runs frozen.
    """
    cfg = state.config
    bundle = state.bundle
    if bundle.discriminator is None:
        raise TrainerError("no discriminator in this bundle")
    # real examples stay clean; the generated stream sees degraded inputs
    clean = torch.from_numpy(np.stack([s.x for s in batch]).astype(np.float32))
    x_aug, _, z = _batch_tensors(batch, cfg, state.rngs["d_augment"])
    opt = state.optimizers["discriminator"]
    opt.zero_grad(set_to_none=True)
    with torch.no_grad():
        fake = bundle.generator(x_aug) if bundle.generator is not None else x_aug
    d_real = bundle.discriminator(clean)
    d_fake = bundle.discriminator(fake)
    loss = (discriminator_nll(d_real, z)
            + discriminator_nll(d_fake, torch.full_like(z, state.adv_cfg.generated_class)))
    _check_finite(loss, "discriminator step")
    loss.backward()
    opt.step()
    state.d_updates += 1
    return float(loss.detach())


def generator_segmenter_step(state: TrainState, batch, lam: float | None = None):
    """One joint update: S descends the Dice loss; G descends the Dice loss while
    ascending D's generated-class loss (lambda-weighted). D stays frozen."""
    cfg = state.config
    bundle = state.bundle
    lam = cfg.lam if lam is None else lam
    x, y, _ = _batch_tensors(batch, cfg, state.rngs["gs_augment"])
    for name in ("generator", "segmenter"):
        if name in state.optimizers:
            state.optimizers[name].zero_grad(set_to_none=True)
    if bundle.discriminator is not None:
        bundle.discriminator.zero_grad(set_to_none=True)
    normalized = bundle.generator(x) if bundle.generator is not None else x
    probs = bundle.segmenter(normalized)
    seg = dice_loss(probs, one_hot(y, probs.shape[1]), state.dice_cfg)
    adv_value = 0.0
    if bundle.discriminator is not None and lam > 0:
        d_gen = bundle.discriminator(normalized)
        adv = discriminator_nll(
            d_gen, torch.full((x.shape[0],), state.adv_cfg.generated_class))
        total = generator_objective(seg, adv, lam)
        adv_value = float(adv.detach())
    else:
        total = seg
    _check_finite(total, "generator/segmenter step")
    total.backward()
    for name in ("generator", "segmenter"):
        if name in state.optimizers:
            state.optimizers[name].step()
    if bundle.discriminator is not None:
        bundle.discriminator.zero_grad(set_to_none=True)
    state.gs_updates += 1
    return float(seg.detach()), adv_value


def _set_rates(state: TrainState, epoch: int):
    gs = gs_learning_rate(epoch, state.config)
    for name in ("generator", "segmenter"):
        if name in state.optimizers:
            for group in state.optimizers[name].param_groups:
                group["lr"] = gs
    if "discriminator" in state.optimizers:
        d_hist = [row["val_d_loss"] for row in state.history
                  if row.get("val_d_loss") is not None]
        rate = d_learning_rate(d_hist, state.config)
        for group in state.optimizers["discriminator"].param_groups:
            group["lr"] = rate


def _validate(state: TrainState, val_set: PatchDataset) -> dict:
    """Patch-level validation: Dice loss/score, and D loss/accuracy when present."""
    cfg = state.config
    bundle = state.bundle
    bundle.eval()
    seg_losses, dscs = [], []
    d_losses, d_correct, d_total = [], 0, 0
    with torch.no_grad():
        for z in val_set.domains:
            pool = val_set.pools[z]
            for lo in range(0, len(pool), cfg.batch_size):
                chunk = pool[lo:lo + cfg.batch_size]
                x, y, zt = _batch_tensors(chunk, cfg, None)
                normalized = bundle.generator(x) if bundle.generator is not None else x
                probs = bundle.segmenter(normalized)
                seg_losses.append(float(dice_loss(probs, one_hot(y, probs.shape[1]),
                                                  state.dice_cfg)))
                pred = probs.argmax(dim=1)
                for c in (1, 2, 3):
                    inter = float(((pred == c) & (y == c)).sum())
                    denom = float((pred == c).sum() + (y == c).sum())
                    dscs.append(1.0 if denom == 0 else 2 * inter / denom)
                if bundle.discriminator is not None:
                    d_real = bundle.discriminator(x)
                    d_fake = bundle.discriminator(normalized)
                    gen_class = state.adv_cfg.generated_class
                    d_losses.append(float(
                        discriminator_nll(d_real, zt)
                        + discriminator_nll(d_fake, torch.full_like(zt, gen_class))))
                    d_correct += int((d_real.argmax(1) == zt).sum())
                    d_correct += int((d_fake.argmax(1) == gen_class).sum())
                    d_total += 2 * len(chunk)
    bundle.train()
    row = {
        "val_seg_loss": float(np.mean(seg_losses)),
        "val_dsc": float(np.mean(dscs)),
        "val_d_loss": float(np.mean(d_losses)) if d_losses else None,
        "val_d_accuracy": d_correct / d_total if d_total else None,
    }
    return row


def train(suite: DomainSuite, cfg: TrainConfig, bundle: ModelBundle,
          out_dir=None, start_epoch: int = 0,
          state: TrainState | None = None) -> TrainState:
    """Run the full training schedule and return the final state.

    Writes ``last.pt`` / ``best.pt`` checkpoints and ``history.csv`` into
    ``out_dir`` when given. Any step failure leaves the last epoch checkpoint
    intact. Deterministic for a fixed config seed on one machine.
    """
    train_set = build_patch_dataset(suite, "train", cfg.train_patches_per_domain,
                                    cfg, seed=cfg.seed + 11)
    val_set = build_patch_dataset(suite, "val", cfg.val_patches_per_domain,
                                  cfg, seed=cfg.seed + 13)
    if state is None:
        state = init_state(bundle, cfg, suite.n_domains)
    n_iter = cfg.n_iter or max(1, math.ceil(
        train_set.total() / (cfg.batch_size * cfg.n_steps)))
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    best_dsc = -1.0
    for row in state.history:
        if row.get("val_dsc") is not None:
            best_dsc = max(best_dsc, row["val_dsc"])
    bundle.train()
    for epoch in range(start_epoch + 1, cfg.n_epochs + 1):
        _set_rates(state, epoch)
        seg_losses, d_losses, adv_losses = [], [], []
        for _ in range(n_iter):
            if state.config.adversarial:
                for _ in range(cfg.n_steps):
                    batch = sample_batch(train_set, cfg.batch_size,
                                         state.rngs["d_batch"])
                    d_losses.append(discriminator_step(state, batch))
            batch = sample_batch(train_set, cfg.batch_size, state.rngs["gs_batch"])
            seg, adv = generator_segmenter_step(state, batch)
            seg_losses.append(seg)
            adv_losses.append(adv)
        row = {
            "epoch": epoch,
            "mode": cfg.mode_label,
            "lr_gs": gs_learning_rate(epoch, cfg),
            "lr_d": (state.optimizers["discriminator"].param_groups[0]["lr"]
                     if "discriminator" in state.optimizers else None),
            "train_seg_loss": float(np.mean(seg_losses)),
            "train_d_loss": float(np.mean(d_losses)) if d_losses else None,
            "train_adv_loss": float(np.mean(adv_losses)) if adv_losses else None,
        }
        row.update(_validate(state, val_set))
        state.history.append(row)
        state.epoch = epoch
        if out_dir is not None:
            extra = {"history": state.history, "seed": cfg.seed}
            save_checkpoint(out_dir / "last.pt", bundle, state.optimizers,
                            epoch=epoch, extra=extra)
            if row["val_dsc"] is not None and row["val_dsc"] > best_dsc:
                best_dsc = row["val_dsc"]
                save_checkpoint(out_dir / "best.pt", bundle, state.optimizers,
                                epoch=epoch, extra=extra)
            write_history_csv(out_dir / "history.csv", state.history)
    return state


HISTORY_COLUMNS = ("epoch", "mode", "lr_gs", "lr_d", "train_seg_loss",
                   "train_d_loss", "train_adv_loss", "val_seg_loss", "val_dsc",
                   "val_d_loss", "val_d_accuracy")


def write_history_csv(path, history) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(HISTORY_COLUMNS)
        for row in history:
            writer.writerow([("" if row.get(c) is None else row.get(c))
                             for c in HISTORY_COLUMNS])


# ---------------------------------------------------------------------------
# whole-volume evaluation
# ---------------------------------------------------------------------------

def normalize_and_segment(bundle: ModelBundle, volume: Volume, cfg: TrainConfig,
                          chunk: int = 16):
    """Run the (optional) normalizer and segmenter patchwise over a volume.

    Returns ``(pred_labels, probability map, normalized volume)``; the
    probability map averages per-voxel class probabilities over the stride
    lattice, the normalized volume averages generator outputs the same way.
    """
    vol = standardize(volume) if cfg.normalizer == "standardize" else volume
    vol = pad_to_min(vol, cfg.patch_size)
    grid = patch_grid(vol.shape, cfg.patch_size, cfg.stride)
    bundle.eval()
    prob_map = ProbabilityMap(bundle.segmenter.config.out_channels, vol.shape)
    norm_map = ProbabilityMap(vol.channels, vol.shape)
    origins = grid.origins
    with torch.no_grad():
        for lo in range(0, len(origins), chunk):
            part = origins[lo:lo + chunk]
            x = torch.from_numpy(np.stack([
                vol.data[:, o[0]:o[0] + cfg.patch_size, o[1]:o[1] + cfg.patch_size,
                         o[2]:o[2] + cfg.patch_size] for o in part]))
            normalized = bundle.generator(x) if bundle.generator is not None else x
            probs = bundle.segmenter(normalized)
            for o, p, nv in zip(part, probs.numpy(), normalized.numpy()):
                prob_map.add(o, p.astype(np.float64))
                norm_map.add(o, nv.astype(np.float64))
    bundle.train()
    normalized_volume = Volume(norm_map.finalize().astype(np.float32), vol.spacing)
    return prob_map.argmax_labels(), prob_map, normalized_volume


def evaluate_subject(bundle: ModelBundle, lv: LabeledVolume, cfg: TrainConfig):
    """Segment one subject and score it against its ground truth."""
    lv = pad_to_min(lv, cfg.patch_size)
    pred, prob_map, normalized = normalize_and_segment(bundle, lv.volume, cfg)
    report = segmentation_report(pred, lv.labels, lv.volume.spacing)
    return report, pred, normalized


def discriminator_report(bundle: ModelBundle, samples_by_domain, adv_cfg,
                         cfg: TrainConfig):
    """Accuracy and confusion of D over real and generated patches."""
    if bundle.discriminator is None:
        raise TrainerError("bundle has no discriminator")
    preds, trues = [], []
    bundle.eval()
    with torch.no_grad():
        for z, samples in sorted(samples_by_domain.items()):
            for lo in range(0, len(samples), cfg.batch_size):
                chunk = samples[lo:lo + cfg.batch_size]
                x = torch.from_numpy(np.stack([s.x for s in chunk]).astype(np.float32))
                d_real = bundle.discriminator(x).argmax(dim=1)
                preds.extend(int(p) for p in d_real)
                trues.extend([z] * len(chunk))
                gen = bundle.generator(x) if bundle.generator is not None else x
                d_fake = bundle.discriminator(gen).argmax(dim=1)
                preds.extend(int(p) for p in d_fake)
                trues.extend([adv_cfg.generated_class] * len(chunk))
    bundle.train()
    mat = confusion_matrix(preds, trues, adv_cfg.domains)
    accuracy = float(np.trace(mat))
    return mat, accuracy
