"""Loss terms, weights and the additional-identity schedule.

Image arguments are symmetric-range N x C x H x W tensors (generator space);
SSIM-based terms map them to unit range before scoring.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigError
from .metrics import SsimConfig, ms_ssim_torch, structure_torch
from .networks import patch_output

EXTRA_MODES = ("none", "ms_ssim", "structure", "combined")


@dataclass(frozen=True)
class LossWeights:
    adv: float = 1.0
    cyc: float = 10.0
    id: float = 10.0
    gp: float = 10.0
    domain: float = 1.0
    id_fpg: float = 10.0
    extra: float = 5.0

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if value < 0:
                raise ConfigError(f"loss weight {name} must be non-negative, got {value}")


@dataclass(frozen=True)
class ExtraLossConfig:
    mode: str = "none"
    decay_epochs: int = 20

    def __post_init__(self):
        if self.mode not in EXTRA_MODES:
            raise ConfigError(
                f"unknown extra loss mode {self.mode!r}; structure loss cannot be combined with others"
            )
        if self.decay_epochs <= 0:
            raise ConfigError("decay_epochs must be positive")

    @property
    def uses_ms_ssim(self) -> bool:
        return self.mode in ("ms_ssim", "combined")

    @property
    def uses_extra_identity(self) -> bool:
        return self.mode == "combined"

    @property
    def uses_structure(self) -> bool:
        return self.mode == "structure"


def to_unit(x: torch.Tensor) -> torch.Tensor:
    return (x + 1) / 2


# ---------------------------------------------------------------------------
# adversarial

def adversarial_loss(d_real: torch.Tensor | None, d_fake: torch.Tensor, side: str) -> torch.Tensor:
    """Least-squares GAN objective on patch maps."""
    if side == "G":
        return torch.mean((d_fake - 1) ** 2)
    if side == "D":
        return (torch.mean((d_real - 1) ** 2) + torch.mean(d_fake**2)) / 2
    raise ValueError(f"side must be 'G' or 'D', got {side!r}")


def wasserstein_loss(d_real: torch.Tensor | None, d_fake: torch.Tensor, side: str) -> torch.Tensor:
    """Critic terms used with the gradient penalty (FPG)."""
    if side == "G":
        return -d_fake.mean()
    if side == "D":
        return d_fake.mean() - d_real.mean()
    raise ValueError(f"side must be 'G' or 'D', got {side!r}")


def gradient_penalty(discriminator, real: torch.Tensor, fake: torch.Tensor, rng: torch.Generator | None = None) -> torch.Tensor:
    """(||grad of mean patch score at a random interpolate|| - 1)^2, averaged over the batch."""
    if real.shape != fake.shape:
        raise ValueError(f"shape mismatch {tuple(real.shape)} vs {tuple(fake.shape)}")
    u = torch.rand((real.shape[0],) + (1,) * (real.dim() - 1), generator=rng, dtype=real.dtype)
    x_hat = (u * real.detach() + (1 - u) * fake.detach()).requires_grad_(True)
    score = patch_output(discriminator(x_hat))
    per_image = score.reshape(score.shape[0], -1).mean(dim=1)
    if not per_image.requires_grad:
        # constant critic: gradient is identically zero
        return torch.ones((), dtype=real.dtype)
    (grad,) = torch.autograd.grad(per_image.sum(), x_hat, create_graph=True, allow_unused=True)
    if grad is None:
        return torch.ones((), dtype=real.dtype)
    norm = grad.reshape(grad.shape[0], -1).norm(dim=1)
    return torch.mean((norm - 1) ** 2)


def domain_classification_loss(logits: torch.Tensor, target_domain) -> torch.Tensor:
    if logits.dim() == 1:
        logits = logits[None]
    target = torch.as_tensor(target_domain, dtype=torch.int64).reshape(-1)
    if target.numel() == 1 and logits.shape[0] > 1:
        target = target.expand(logits.shape[0])
    if torch.any(target < 0) or torch.any(target >= logits.shape[1]):
        raise IndexError(f"target domain {target.tolist()} out of range for {logits.shape[1]} domains")
    return F.cross_entropy(logits, target)


# ---------------------------------------------------------------------------
# reconstruction-style

def _l1(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return torch.mean(torch.abs(a - b))


def cycle_loss(x: torch.Tensor, x_cycled: torch.Tensor) -> torch.Tensor:
    return _l1(x, x_cycled)


def identity_loss(y: torch.Tensor, y_mapped: torch.Tensor) -> torch.Tensor:
    return _l1(y, y_mapped)


def conditional_identity_loss(x: torch.Tensor, x_same: torch.Tensor, label, source_domain) -> torch.Tensor:
    """L1 between ``x`` and its translation into its own domain; ``label`` must be the source domain."""
    label = torch.as_tensor(label).reshape(-1)
    source = torch.as_tensor(source_domain).reshape(-1)
    if not torch.equal(label.expand_as(source) if label.numel() == 1 else label, source):
        raise ValueError("conditional identity loss requires the label to equal the source domain")
    return _l1(x, x_same)


def additional_identity_weight(epoch: int, decay_epochs: int = 20, lambda_extra: float = 5.0) -> float:
    """Linear decay from ``lambda_extra`` at epoch 0 to zero at ``decay_epochs``."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return lambda_extra * max(0.0, 1.0 - epoch / decay_epochs)


def ms_ssim_loss(x: torch.Tensor, x_cycled: torch.Tensor, cfg: SsimConfig = SsimConfig(), scales: int | None = None) -> torch.Tensor:
    return torch.mean(1 - ms_ssim_torch(to_unit(x), to_unit(x_cycled), cfg, scales))


def structure_loss(x: torch.Tensor, x_transformed: torch.Tensor, cfg: SsimConfig = SsimConfig()) -> torch.Tensor:
    return torch.mean(1 - structure_torch(to_unit(x), to_unit(x_transformed), cfg))


# ---------------------------------------------------------------------------

def total_generator_loss(
    terms: dict[str, torch.Tensor | float],
    weights: LossWeights,
    extra: ExtraLossConfig,
    epoch: int,
    architecture: str = "cyclegan",
) -> torch.Tensor | float:
    """Weighted sum of raw generator terms.

    Expected keys: ``adv``, ``cyc``, ``id`` and, for FPG, ``domain``. Extras read
    ``ms_ssim``, ``extra_id`` (combined mode) or ``structure``.
    """
    if architecture == "fpg":
        total = (weights.adv * terms.get("adv", 0.0) + weights.domain * terms.get("domain", 0.0)
                 + weights.cyc * terms.get("cyc", 0.0) + weights.id_fpg * terms.get("id", 0.0))
    else:
        total = (weights.adv * terms.get("adv", 0.0) + weights.cyc * terms.get("cyc", 0.0)
                 + weights.id * terms.get("id", 0.0))
    present = {k for k in ("ms_ssim", "extra_id", "structure") if k in terms}
    if extra.uses_structure and present & {"ms_ssim", "extra_id"}:
        raise ConfigError("structure loss is never combined with the other additional losses")
    if extra.uses_ms_ssim:
        total = total + weights.extra * terms["ms_ssim"]
    if extra.uses_extra_identity:
        w = additional_identity_weight(epoch, extra.decay_epochs, weights.extra)
        if w > 0:
            total = total + w * terms["extra_id"]
    if extra.uses_structure:
        total = total + weights.extra * terms["structure"]
    return total
