"""Training criteria: weighted soft Dice, K+1-class discriminator NLL, and the
composite generator objective combining segmentation with the realism term.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .volume import N_CLASSES

PROB_FLOOR = 1e-12


class LossError(ValueError):
    pass


@dataclass
class DiceConfig:
    eps: float = 1e-5
    weights: tuple[float, ...] = (0.22, 0.28, 0.20, 0.30)  # BG, WM, GM, CSF

    def __post_init__(self):
        if self.eps <= 0:
            raise LossError(f"eps must be positive, got {self.eps}")
        if any(w <= 0 for w in self.weights):
            raise LossError(f"class weights must be positive, got {self.weights}")


@dataclass
class AdversarialConfig:
    lam: float = 1.5
    domains: int = 2

    def __post_init__(self):
        if self.lam < 0:
            raise LossError(f"lambda must be >= 0, got {self.lam}")
        if self.domains < 2:
            raise LossError(f"need at least 2 domains, got {self.domains}")

    @property
    def generated_class(self) -> int:
        """Index of the generated class (domains are 0..K-1, generated is K)."""
        return self.domains


def one_hot(labels: torch.Tensor, n_classes: int = N_CLASSES) -> torch.Tensor:
    """(B, X, Y, Z) integer labels -> (B, C, X, Y, Z) float one-hot."""
    oh = torch.nn.functional.one_hot(labels.long(), n_classes)
    return oh.permute(0, 4, 1, 2, 3).to(torch.get_default_dtype())


def dice_loss(probs: torch.Tensor, target: torch.Tensor,
              cfg: DiceConfig | None = None) -> torch.Tensor:
    """Weighted soft Dice loss; one-hot targets.

    Accepts a single patch ``(C, ...)`` or a batch ``(B, C, ...)``; batches are
    reduced by the mean of per-sample losses.
    """
    cfg = cfg or DiceConfig()
    if probs.shape != target.shape:
        raise LossError(f"shape mismatch: probs {tuple(probs.shape)} vs "
                        f"target {tuple(target.shape)}")
    batched = probs.dim() == 5
    if not batched:
        probs, target = probs[None], target[None]
    n_classes = probs.shape[1]
    if len(cfg.weights) != n_classes:
        raise LossError(f"{len(cfg.weights)} class weights for {n_classes} classes")
    w = torch.as_tensor(cfg.weights, dtype=probs.dtype, device=probs.device)
    w = w.view(1, n_classes, *([1] * (probs.dim() - 2)))
    dims = tuple(range(1, probs.dim()))
    inter = (w * probs * target).sum(dim=dims)
    total = (w * (probs + target)).sum(dim=dims)
    loss = 1.0 - (cfg.eps + 2.0 * inter) / (cfg.eps + total)
    return loss.mean()


def discriminator_nll(d: torch.Tensor, z) -> torch.Tensor:
    """Negative log likelihood -log d_z over K+1 class probabilities.

    Accepts a single probability vector or a batch ``(B, K+1)`` with per-sample
    class indices; probabilities are floored at 1e-12 inside the log.
    """
    value, _ = discriminator_nll_flagged(d, z)
    return value


def discriminator_nll_flagged(d: torch.Tensor, z) -> tuple[torch.Tensor, bool]:
    """As :func:`discriminator_nll`, also reporting whether the floor clipped."""
    batched = d.dim() == 2
    if not batched:
        d = d[None]
    z = torch.as_tensor(z, device=d.device).reshape(-1).long()
    if z.numel() == 1 and d.shape[0] > 1:
        z = z.expand(d.shape[0])
    picked = d.gather(1, z[:, None]).squeeze(1)
    clamped = bool((picked < PROB_FLOOR).any())
    return -torch.log(picked.clamp_min(PROB_FLOOR)).mean(), clamped


def generator_objective(seg_loss: torch.Tensor, disc_generated_loss: torch.Tensor,
                        lam: float) -> torch.Tensor:
    """Composite generator criterion.

    Descending this scalar follows the segmentation loss downhill while
    ascending the discriminator's generated-class loss, i.e. the update
    direction for the generator parameters is
    ``grad(seg) - lam * grad(disc_generated)``.
    """
    return seg_loss - lam * disc_generated_loss


def total_objective(patches: torch.Tensor, labels: torch.Tensor,
                    domains: torch.Tensor, bundle, adv_cfg: AdversarialConfig,
                    dice_cfg: DiceConfig | None = None):
    """The three expectation terms of the joint objective, kept separate so the
    training loop can apply its asymmetric updates.

    Returns ``(seg_term, disc_real_term, disc_generated_term)``, each the mean
    over the batch.
    """
    if patches.shape[0] == 0:
        raise LossError("empty batch")
    if bundle.generator is not None:
        normalized = bundle.generator(patches)
    else:
        normalized = patches
    probs = bundle.segmenter(normalized)
    seg = dice_loss(probs, one_hot(labels, probs.shape[1]), dice_cfg)
    if bundle.discriminator is None:
        zero = torch.zeros((), dtype=patches.dtype)
        return seg, zero, zero
    d_real = bundle.discriminator(patches)
    d_gen = bundle.discriminator(normalized)
    real_term = discriminator_nll(d_real, domains)
    gen_term = discriminator_nll(d_gen, torch.full_like(
        torch.as_tensor(domains).reshape(-1), adv_cfg.generated_class))
    return seg, real_term, gen_term
