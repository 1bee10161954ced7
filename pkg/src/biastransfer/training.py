"""Training loops, learning-rate schedule, model selection and full-resolution transfer."""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .errors import DataError, SelectionGuardError, TrainingDivergedError
from .imaging import ImageTensor, RangeTag, build_pyramid, collapse_pyramid, convert_range, halve_array
from .losses import (
    ExtraLossConfig,
    LossWeights,
    adversarial_loss,
    cycle_loss,
    domain_classification_loss,
    gradient_penalty,
    identity_loss,
    ms_ssim_loss,
    structure_loss,
    total_generator_loss,
    wasserstein_loss,
)
from .metrics import SsimConfig, max_scales
from .networks import ModelBundle, patch_output, save_checkpoint

log = logging.getLogger(__name__)

NEW, TAR = "NEW", "TAR"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    lr_initial: float | None = None
    lr_steady_epochs: int = 100
    batch_size: int = 1
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    beta1: float = 0.5
    beta2: float = 0.999
    extra: ExtraLossConfig = field(default_factory=ExtraLossConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    image_size: int = 256
    base_width: int = 64
    replay_buffer: int | None = None
    n_critic: int = 5
    collapse_threshold: float = 1e-3
    collapse_probe: int = 8

    def __post_init__(self):
        if self.batch_size != 1:
            raise ValueError("training uses a batch size of one")
        if self.epochs < self.lr_steady_epochs:
            raise ValueError("epochs must be >= lr_steady_epochs")
        if self.image_size < 32 or self.image_size % 16:
            # the patch discriminator needs at least a 2 x 2 output grid
            raise ValueError(f"image_size must be a multiple of 16 and at least 32, got {self.image_size}")

    def lr_for(self, architecture: str) -> float:
        if self.lr_initial is not None:
            return self.lr_initial
        return 1e-4 if architecture == "fpg" else 5e-4

    def buffer_for(self, architecture: str) -> int:
        if self.replay_buffer is not None:
            return self.replay_buffer
        return 0 if architecture == "fpg" else 50

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """64 x 64 models, width 32, 30 epochs with the schedule scaled to 15 steady + 15 decaying."""
        base = dict(epochs=30, lr_steady_epochs=15, image_size=64, base_width=32, seeds=(0, 1))
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))


def train_config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    extra = ExtraLossConfig(**d.pop("extra", {}))
    weights = LossWeights(**d.pop("weights", {}))
    if "seeds" in d:
        d["seeds"] = tuple(d["seeds"])
    return TrainConfig(extra=extra, weights=weights, **d)


def lr_schedule(epoch: int, cfg: TrainConfig, architecture: str = "cyclegan") -> float:
    """Constant for the steady phase, then linear decay reaching zero at ``cfg.epochs``."""
    if not 0 <= epoch <= cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs}]")
    lr = cfg.lr_for(architecture)
    if epoch < cfg.lr_steady_epochs:
        return lr
    decay = cfg.epochs - cfg.lr_steady_epochs
    return lr * (1.0 - (epoch - cfg.lr_steady_epochs) / decay)


# ---------------------------------------------------------------------------
# manifests

@dataclass
class RunManifest:
    architecture: str
    extra_mode: str
    seed: int
    config_hash: str
    history: list[dict] = field(default_factory=list)
    selected_epoch: int | None = None
    best_val_loss: float | None = None
    checkpoint: str | None = None
    metric_report_ids: list[str] = field(default_factory=list)
    effective_ms_ssim_scales: int | None = None
    replay_buffer: int = 0
    mode_collapse: bool = False
    collapse_epochs: list[int] = field(default_factory=list)
    status: str = "running"
    parameter_counts: dict = field(default_factory=dict)
    best_state: dict | None = field(default=None, repr=False, compare=False)

    @property
    def val_losses(self) -> list[float]:
        return [h["val_loss"] for h in self.history]

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("best_state")
        return d

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        return path

    @classmethod
    def read(cls, path: str | Path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))


def config_hash(architecture: str, cfg: TrainConfig) -> str:
    d = cfg.to_dict()
    d.pop("seeds")
    blob = json.dumps({"architecture": architecture, "train": d}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def write_loss_log(path: str | Path, history: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "term", "value"])
        for h in history:
            for term, value in sorted(h.items()):
                if term != "epoch" and isinstance(value, (int, float)):
                    writer.writerow([h["epoch"], term, value])


# ---------------------------------------------------------------------------
# data

def model_input(img: ImageTensor, side: int) -> ImageTensor:
    """Low-pass an image down to ``side`` (the pyramid base a model sees)."""
    if img.height != img.width:
        raise DataError(f"training images must be square, got {img.height}x{img.width}")
    data = img.data
    while data.shape[0] > side:
        data = halve_array(data)
    if data.shape[0] != side:
        raise DataError(f"image side {img.height} is not {side} times a power of two")
    return ImageTensor(data, img.range_tag)


def to_model_tensor(images: Sequence[ImageTensor], side: int) -> torch.Tensor:
    """Stack images as a float32 N x C x side x side tensor in [-1, 1]."""
    if len(images) == 0:
        raise DataError("empty image set")
    arr = np.stack([
        convert_range(model_input(im, side), RangeTag.SYMMETRIC).data.transpose(2, 0, 1) for im in images
    ])
    return torch.from_numpy(arr.astype(np.float32))


@dataclass
class DomainTensors:
    train: torch.Tensor
    val: torch.Tensor

    @classmethod
    def from_images(cls, train: Sequence[ImageTensor], val: Sequence[ImageTensor], side: int) -> "DomainTensors":
        return cls(to_model_tensor(train, side), to_model_tensor(val, side))


class ImagePool:
    """History of generated images for discriminator updates."""

    def __init__(self, size: int, rng: random.Random):
        self.size = size
        self.rng = rng
        self.images: list[torch.Tensor] = []

    def query(self, image: torch.Tensor) -> torch.Tensor:
        if self.size == 0:
            return image
        image = image.detach()
        if len(self.images) < self.size:
            self.images.append(image)
            return image
        if self.rng.random() < 0.5:
            i = self.rng.randrange(self.size)
            old, self.images[i] = self.images[i], image
            return old
        return image


# ---------------------------------------------------------------------------
# validation

def _extra_scales(side: int, extra: ExtraLossConfig, ssim_cfg: SsimConfig) -> int | None:
    return max_scales(side, ssim_cfg.window) if extra.uses_ms_ssim else None


@torch.no_grad()
def validation_loss(
    bundle: ModelBundle,
    new_val: torch.Tensor,
    tar_val: torch.Tensor,
    cfg: TrainConfig,
    ssim_cfg: SsimConfig = SsimConfig(),
) -> float:
    """Generator loss NEW -> TAR on validation images, without adversarial terms.

    cycle (+ MS-SSIM on the cycle or structure on the translation, if configured)
    averaged over NEW images, plus identity averaged over TAR images. The decaying
    additional identity term is left out so values are comparable across epochs.
    """
    w, extra = cfg.weights, cfg.extra
    fwd = bundle.translator(NEW, TAR)
    back = bundle.translator(TAR, NEW)
    id_weight = w.id_fpg if bundle.architecture == "fpg" else w.id
    scales = _extra_scales(new_val.shape[-1], extra, ssim_cfg)
    total = 0.0
    for x in new_val.split(1):
        fake = fwd(x)
        rec = back(fake)
        term = w.cyc * cycle_loss(x, rec)
        if extra.uses_ms_ssim:
            term = term + w.extra * ms_ssim_loss(x.double(), rec.double(), ssim_cfg, scales)
        if extra.uses_structure:
            term = term + w.extra * structure_loss(x.double(), fake.double(), ssim_cfg)
        total += float(term) / len(new_val)
    for y in tar_val.split(1):
        total += id_weight * float(identity_loss(y, fwd(y))) / len(tar_val)
    return total


@torch.no_grad()
def output_spread(translate: Callable, images: torch.Tensor) -> float:
    """Mean per-pixel standard deviation of translations across distinct inputs."""
    outs = torch.cat([translate(x) for x in images.split(1)])
    return float(outs.std(dim=0).mean())


# ---------------------------------------------------------------------------
# training loops

def _check_finite(values: dict, manifest: RunManifest, epoch: int, out_dir: Path | None,
                  cfg: TrainConfig | None = None, spread: Callable[[], float] | None = None):
    bad = {k: v for k, v in values.items() if not math.isfinite(v)}
    if bad:
        manifest.status = "diverged"
        record = {"epoch": epoch, "diverged_terms": sorted(bad)}
        if spread is not None:
            # a collapsed generator feeds constant images to instance norms, whose
            # gradients then overflow; keep the collapse diagnosis in the manifest
            value = spread()
            record["output_std"] = value
            if cfg is not None and math.isfinite(value) and value < cfg.collapse_threshold:
                manifest.mode_collapse = True
                manifest.collapse_epochs.append(epoch)
        manifest.history.append(record)
        if out_dir is not None:
            manifest.write(out_dir / "manifest.json")
        raise TrainingDivergedError(f"non-finite loss at epoch {epoch}: {sorted(bad)}", manifest)


def _grad_norm(opt) -> float:
    sq = 0.0
    for group in opt.param_groups:
        for p in group["params"]:
            if p.grad is not None:
                sq += p.grad.detach().pow(2).sum().item()
    return math.sqrt(sq) if math.isfinite(sq) else float("nan")


def _scalar(v) -> float:
    return v.detach().item() if isinstance(v, torch.Tensor) else float(v)


def _set_lr(opts, lr):
    for opt in opts:
        for group in opt.param_groups:
            group["lr"] = lr


def _params(nets):
    return [p for n in nets for p in n.parameters()]


def _finish_epoch(manifest, bundle, cfg, data_new, data_tar, epoch, lr, sums, steps, ssim_cfg, out_dir, probe):
    val = validation_loss(bundle, data_new.val, data_tar.val, cfg, ssim_cfg)
    spread = output_spread(bundle.translator(NEW, TAR), probe)
    record = {"epoch": epoch, "lr": lr, "val_loss": val, "output_std": spread}
    record.update({f"train_{k}": v / max(steps, 1) for k, v in sums.items()})
    _check_finite({k: v for k, v in record.items() if isinstance(v, float)}, manifest, epoch, out_dir)
    manifest.history.append(record)
    if spread < cfg.collapse_threshold:
        manifest.mode_collapse = True
        manifest.collapse_epochs.append(epoch)
    if manifest.best_val_loss is None or val < manifest.best_val_loss:
        manifest.best_val_loss = val
        manifest.selected_epoch = epoch
        manifest.best_state = {
            "generators": {k: copy.deepcopy(g.state_dict()) for k, g in bundle.generators.items()},
            "discriminators": {k: copy.deepcopy(d.state_dict()) for k, d in bundle.discriminators.items()},
        }
        if out_dir is not None:
            path = save_checkpoint(out_dir / "best.pt", bundle, epoch, manifest.seed,
                                   {"val_loss": val, "config_hash": manifest.config_hash})
            manifest.checkpoint = str(path)
    log.info("epoch %d lr %.3g val %.4f spread %.4f", epoch, lr, val, spread)


def _new_manifest(bundle: ModelBundle, cfg: TrainConfig, seed: int, ssim_cfg: SsimConfig) -> RunManifest:
    return RunManifest(
        architecture=bundle.architecture,
        extra_mode=cfg.extra.mode,
        seed=seed,
        config_hash=config_hash(bundle.architecture, cfg),
        effective_ms_ssim_scales=_extra_scales(cfg.image_size, cfg.extra, ssim_cfg),
        replay_buffer=cfg.buffer_for(bundle.architecture),
        parameter_counts=bundle.parameter_counts(),
    )


def _finalize(manifest: RunManifest, out_dir: Path | None) -> RunManifest:
    manifest.status = "complete"
    if out_dir is not None:
        manifest.write(out_dir / "manifest.json")
        write_loss_log(out_dir / "losses.csv", manifest.history)
    return manifest


def train_cycle_pair(
    data_new: DomainTensors,
    data_tar: DomainTensors,
    bundle: ModelBundle,
    cfg: TrainConfig,
    seed: int = 0,
    out_dir: str | Path | None = None,
    ssim_cfg: SsimConfig = SsimConfig(),
) -> RunManifest:
    """Alternating generator/discriminator updates for (U-Net) cycleGAN, NEW <-> TAR."""
    if not bundle.is_cycle:
        raise ValueError("train_cycle_pair needs a cyclegan or unet_cyclegan bundle")
    if len(data_new.train) == 0 or len(data_tar.train) == 0:
        raise DataError("empty training set")
    out_dir = Path(out_dir) if out_dir is not None else None
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    pool_rng = random.Random(seed)
    arch = bundle.architecture
    w, extra = cfg.weights, cfg.extra
    g_ab, g_ba = bundle.generators[f"{NEW}->{TAR}"], bundle.generators[f"{TAR}->{NEW}"]
    d_a, d_b = bundle.discriminators[NEW], bundle.discriminators[TAR]
    opt_g = torch.optim.Adam(_params([g_ab, g_ba]), lr=cfg.lr_for(arch), betas=(cfg.beta1, cfg.beta2))
    opt_d = torch.optim.Adam(_params([d_a, d_b]), lr=cfg.lr_for(arch), betas=(cfg.beta1, cfg.beta2))
    pool_a = ImagePool(cfg.buffer_for(arch), pool_rng)
    pool_b = ImagePool(cfg.buffer_for(arch), pool_rng)
    manifest = _new_manifest(bundle, cfg, seed, ssim_cfg)
    scales = manifest.effective_ms_ssim_scales
    probe = data_new.val[: cfg.collapse_probe]
    spread = lambda: output_spread(g_ab, probe)
    n_steps = max(len(data_new.train), len(data_tar.train))

    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, cfg, arch)
        _set_lr([opt_g, opt_d], lr)
        order_a = rng.permutation(n_steps) % len(data_new.train)
        order_b = rng.permutation(n_steps) % len(data_tar.train)
        sums: dict[str, float] = {}
        for ia, ib in zip(order_a, order_b):
            real_a = data_new.train[ia:ia + 1]
            real_b = data_tar.train[ib:ib + 1]

            fake_b = g_ab(real_a)
            fake_a = g_ba(real_b)
            rec_a = g_ba(fake_b)
            rec_b = g_ab(fake_a)
            terms = {
                "adv": adversarial_loss(None, d_b(fake_b), "G") + adversarial_loss(None, d_a(fake_a), "G"),
                "cyc": cycle_loss(real_a, rec_a) + cycle_loss(real_b, rec_b),
                "id": identity_loss(real_b, g_ab(real_b)) + identity_loss(real_a, g_ba(real_a)),
            }
            if extra.uses_ms_ssim:
                terms["ms_ssim"] = (ms_ssim_loss(real_a, rec_a, ssim_cfg, scales)
                                    + ms_ssim_loss(real_b, rec_b, ssim_cfg, scales))
            if extra.uses_extra_identity:
                terms["extra_id"] = identity_loss(real_a, fake_b) + identity_loss(real_b, fake_a)
            if extra.uses_structure:
                terms["structure"] = structure_loss(real_a, fake_b, ssim_cfg) + structure_loss(real_b, fake_a, ssim_cfg)
            g_loss = total_generator_loss(terms, w, extra, epoch, arch)
            opt_g.zero_grad(set_to_none=True)
            g_loss.backward()
            step_vals = {k: _scalar(v) for k, v in terms.items()}
            step_vals["g_total"] = _scalar(g_loss)
            # checked before stepping so a divergence leaves the weights intact
            _check_finite({**step_vals, "g_grad": _grad_norm(opt_g)}, manifest, epoch, out_dir, cfg, spread)
            opt_g.step()

            d_loss = (adversarial_loss(d_a(real_a), d_a(pool_a.query(fake_a)), "D")
                      + adversarial_loss(d_b(real_b), d_b(pool_b.query(fake_b)), "D"))
            opt_d.zero_grad(set_to_none=True)
            d_loss.backward()
            step_vals["d_total"] = _scalar(d_loss)
            _check_finite({"d_total": step_vals["d_total"], "d_grad": _grad_norm(opt_d)},
                          manifest, epoch, out_dir, cfg, spread)
            opt_d.step()
            for k, v in step_vals.items():
                sums[k] = sums.get(k, 0.0) + v
        _finish_epoch(manifest, bundle, cfg, data_new, data_tar, epoch, lr, sums, n_steps, ssim_cfg, out_dir, probe)
    return _finalize(manifest, out_dir)


def train_fpg(
    data_per_domain: dict[str, DomainTensors],
    bundle: ModelBundle,
    cfg: TrainConfig,
    seed: int = 0,
    out_dir: str | Path | None = None,
    ssim_cfg: SsimConfig = SsimConfig(),
) -> RunManifest:
    """Fixed-Point GAN: one conditional generator and a dual-output critic over all domains."""
    if bundle.architecture != "fpg":
        raise ValueError("train_fpg needs an fpg bundle")
    if len(data_per_domain) < 2:
        raise DataError("FPG needs at least two domains")
    if any(len(d.train) == 0 for d in data_per_domain.values()):
        raise DataError("empty training set")
    if NEW not in data_per_domain or TAR not in data_per_domain:
        raise DataError("validation needs NEW and TAR domains")
    out_dir = Path(out_dir) if out_dir is not None else None
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    gp_rng = torch.Generator().manual_seed(seed)
    arch = "fpg"
    w, extra = cfg.weights, cfg.extra
    gen, disc = bundle.generators["G"], bundle.discriminators["D"]
    n_dom = len(bundle.domain_names)
    opt_g = torch.optim.Adam(gen.parameters(), lr=cfg.lr_for(arch), betas=(cfg.beta1, cfg.beta2))
    opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.lr_for(arch), betas=(cfg.beta1, cfg.beta2))
    manifest = _new_manifest(bundle, cfg, seed, ssim_cfg)
    scales = manifest.effective_ms_ssim_scales
    pool = [(bundle.domain_index(name), i) for name, d in data_per_domain.items() for i in range(len(d.train))]
    tensors = {bundle.domain_index(name): d.train for name, d in data_per_domain.items()}
    probe = data_per_domain[NEW].val[: cfg.collapse_probe]
    spread = lambda: output_spread(bundle.translator(NEW, TAR), probe)
    step = 0

    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, cfg, arch)
        _set_lr([opt_g, opt_d], lr)
        sums: dict[str, float] = {}
        g_steps = 0
        for k in rng.permutation(len(pool)):
            org, i = pool[k]
            x = tensors[org][i:i + 1]
            trg = int(rng.integers(n_dom))
            c_org = torch.tensor([org])
            c_trg = torch.tensor([trg])

            out_real, cls_real = disc(x)
            fake = gen(x, c_trg)
            out_fake, _ = disc(fake.detach())
            d_terms = {
                "d_adv": wasserstein_loss(out_real, out_fake, "D"),
                "d_domain": domain_classification_loss(cls_real, c_org),
                "gp": gradient_penalty(disc, x, fake, gp_rng),
            }
            d_loss = d_terms["d_adv"] + w.domain * d_terms["d_domain"] + w.gp * d_terms["gp"]
            opt_d.zero_grad(set_to_none=True)
            d_loss.backward()
            step_vals = {k: _scalar(v) for k, v in d_terms.items()}
            _check_finite({**step_vals, "d_grad": _grad_norm(opt_d)}, manifest, epoch, out_dir, cfg, spread)
            opt_d.step()

            if step % cfg.n_critic == 0:
                fake = gen(x, c_trg)
                out_fake, cls_fake = disc(fake)
                rec = gen(fake, c_org)
                terms = {
                    "adv": wasserstein_loss(None, out_fake, "G"),
                    "domain": domain_classification_loss(cls_fake, c_trg),
                    "cyc": cycle_loss(x, rec),
                    "id": identity_loss(x, gen(x, c_org)),
                }
                if extra.uses_ms_ssim:
                    terms["ms_ssim"] = ms_ssim_loss(x, rec, ssim_cfg, scales)
                if extra.uses_extra_identity:
                    terms["extra_id"] = identity_loss(x, fake)
                if extra.uses_structure:
                    terms["structure"] = structure_loss(x, fake, ssim_cfg)
                g_loss = total_generator_loss(terms, w, extra, epoch, arch)
                opt_g.zero_grad(set_to_none=True)
                g_loss.backward()
                step_vals.update({k: _scalar(v) for k, v in terms.items()})
                step_vals["g_total"] = _scalar(g_loss)
                _check_finite({**step_vals, "g_grad": _grad_norm(opt_g)}, manifest, epoch, out_dir, cfg, spread)
                opt_g.step()
                g_steps += 1
            step += 1
            _check_finite(step_vals, manifest, epoch, out_dir, cfg, spread)
            for k, v in step_vals.items():
                sums[k] = sums.get(k, 0.0) + v
        _finish_epoch(manifest, bundle, cfg, data_per_domain[NEW], data_per_domain[TAR], epoch, lr,
                      sums, len(pool), ssim_cfg, out_dir, probe)
    return _finalize(manifest, out_dir)


def restore_best(bundle: ModelBundle, manifest: RunManifest) -> ModelBundle:
    """Load the selected epoch's weights into ``bundle`` (from memory or the checkpoint)."""
    if manifest.best_state is not None:
        state = manifest.best_state
    elif manifest.checkpoint:
        state = torch.load(manifest.checkpoint, map_location="cpu", weights_only=False)
    else:
        raise ValueError("manifest has neither in-memory weights nor a checkpoint")
    for k, g in bundle.generators.items():
        g.load_state_dict(state["generators"][k])
    for k, d in bundle.discriminators.items():
        d.load_state_dict(state["discriminators"][k])
    return bundle


# ---------------------------------------------------------------------------
# selection

def select_best(manifests: Sequence[RunManifest], reports: Sequence | None = None, split: str = "val"):
    """Pick (seed, epoch).

    Within a run the epoch is the argmin of the validation generator loss. Across runs
    the best validation report wins (lowest FID, then highest SSIM); without reports the
    lowest validation loss decides. Test-split metrics are refused.
    """
    if split != "val":
        raise SelectionGuardError(f"model selection may only use validation metrics, not {split!r}")
    if not manifests:
        raise ValueError("no runs to select from")
    epochs = []
    for m in manifests:
        losses = m.val_losses
        if not losses:
            raise ValueError(f"run seed={m.seed} has no validation history")
        epochs.append(m.history[int(np.argmin(losses))]["epoch"])
    if reports is not None:
        if len(reports) != len(manifests):
            raise ValueError("need one validation report per run")
        for r in reports:
            if getattr(r, "split", None) != "val":
                raise SelectionGuardError("a test-split report was passed to model selection")
        keys = [(r.fid if r.fid is not None else math.inf, -r.ssim_mean) for r in reports]
    else:
        keys = [(min(m.val_losses),) for m in manifests]
    best = min(range(len(manifests)), key=lambda i: (keys[i], i))
    return manifests[best].seed, epochs[best]


# ---------------------------------------------------------------------------
# full-resolution transfer

@torch.no_grad()
def transform_full_resolution(translate: Callable, img: ImageTensor, base_side: int = 256) -> ImageTensor:
    """Downsample to the pyramid base, translate it, and collapse the original bands onto the result."""
    pyr = build_pyramid(img, base_side)
    base = convert_range(pyr.base, RangeTag.SYMMETRIC).data.transpose(2, 0, 1)
    x = torch.from_numpy(np.ascontiguousarray(base, dtype=np.float32))[None]
    y = translate(x)[0].double().numpy().transpose(1, 2, 0)
    new_base = convert_range(ImageTensor.clipped(y, RangeTag.SYMMETRIC), RangeTag.UNIT)
    return collapse_pyramid(pyr, new_base)
