"""Acceptance suite: exact property checks (1-6) and the scaled synthetic experiment (7-12).

Each criterion records a PASS/FAIL line that the conftest prints at the end of the run.
The end-to-end part trains for roughly half an hour on one CPU core.
"""

import math
import time
from contextlib import contextmanager

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from scipy import stats

from conftest import ACCEPTANCE

from biastransfer.color_transfer import color_transfer, histogram_match_channel, rgb_to_decorrelated
from biastransfer.errors import SelectionGuardError
from biastransfer.experiment import DeskConfig, run_desk_experiment
from biastransfer.imaging import ImageTensor, build_pyramid, collapse_pyramid
from biastransfer.losses import (
    adversarial_loss,
    additional_identity_weight,
    conditional_identity_loss,
    cycle_loss,
    domain_classification_loss,
    gradient_penalty,
    identity_loss,
    ms_ssim_loss,
    structure_loss,
    wasserstein_loss,
)
from biastransfer.metrics import (
    FeatureEmbedding,
    SegMask,
    SsimConfig,
    dice_object,
    dice_pixel,
    frechet_distance,
    ms_ssim,
    ssim,
    structure_similarity,
)
from biastransfer.networks import DiscriminatorSpec, GeneratorSpec, make_discriminator, make_generator
from biastransfer.synthdata import PhantomSpec, make_benchmark
from biastransfer.training import TrainConfig, lr_schedule, select_best

PROPERTY_BUDGET_S = 120.0
END_TO_END_BUDGET_S = 60 * 60.0
_elapsed = {"property": 0.0}


@contextmanager
def criterion(key: str, title: str, suite: str = "property"):
    """Record PASS/FAIL for ``key``; the body sets ``detail`` entries via the yielded dict."""
    info = {"detail": ""}
    t = time.perf_counter()
    try:
        yield info
    except BaseException as err:
        ACCEPTANCE[key] = ("FAIL", f"{title}: {info['detail'] or type(err).__name__} {err}".strip())
        raise
    finally:
        if suite == "property":
            _elapsed["property"] += time.perf_counter() - t
    ACCEPTANCE[key] = ("PASS", f"{title}: {info['detail']}".rstrip(": "))


# ---------------------------------------------------------------------------
# 1. pyramid round trip

def test_c1_pyramid_round_trip():
    with criterion("1", "pyramid round trip, 200 images") as info:
        rng = np.random.default_rng(2024)
        worst = 0.0
        counts = {256: 0, 512: 0, 1024: 0}
        for _ in range(200):
            side = int(rng.choice([256, 512, 1024]))
            channels = int(rng.choice([1, 3]))
            base = int(rng.choice([b for b in (64, 128, 256) if b <= side]))
            img = ImageTensor(rng.random((side, side, channels)))
            back = collapse_pyramid(build_pyramid(img, base))
            worst = max(worst, float(np.abs(back.data - img.data).max()))
            counts[side] += 1
        info["detail"] = f"max error {worst:.2e} over sides {counts}"
        assert worst <= 1e-5


# ---------------------------------------------------------------------------
# 2. metric identities

def _components(mask: np.ndarray) -> list[frozenset]:
    """4-connected components by explicit flood fill (independent of scipy)."""
    seen, comps = set(), []
    h, w = mask.shape
    for y in range(h):
        for x in range(w):
            if mask[y, x] and (y, x) not in seen:
                stack, comp = [(y, x)], set()
                seen.add((y, x))
                while stack:
                    cy, cx = stack.pop()
                    comp.add((cy, cx))
                    for ny, nx in ((cy + 1, cx), (cy - 1, cx), (cy, cx + 1), (cy, cx - 1)):
                        if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and (ny, nx) not in seen:
                            seen.add((ny, nx))
                            stack.append((ny, nx))
                comps.append(frozenset(comp))
    return comps


def _object_dice_oracle(ca, cb):
    # IoU > 0.5 admits at most one partner per object, so matches are just qualifying pairs
    if not ca and not cb:
        return 1.0
    if not ca or not cb:
        return 0.0
    matches = sum(1 for p in ca for q in cb if len(p & q) / len(p | q) > 0.5)
    return 2.0 * matches / (len(ca) + len(cb))


def test_c2_metric_identities():
    with criterion("2", "metric identities") as info:
        rng = np.random.default_rng(7)
        worst = {"ssim": 0.0, "ms_ssim": 0.0, "structure": 0.0, "fid": 0.0}
        for k in range(5):
            x = ImageTensor(rng.random((256, 256, 3)))
            worst["ssim"] = max(worst["ssim"], abs(ssim(x, x) - 1.0))
            worst["ms_ssim"] = max(worst["ms_ssim"], abs(ms_ssim(x, x, scales=5) - 1.0))
            for a, b in ((1.0, 0.0), (0.5, 0.2), (0.1, 0.45)):
                y = ImageTensor(a * x.data + b)
                worst["structure"] = max(worst["structure"], abs(structure_similarity(x, y) - 1.0))
            feats = rng.normal(size=(50, 16)) * rng.uniform(0.1, 3.0, size=16)
            emb = FeatureEmbedding("random-conv-64", feats)
            worst["fid"] = max(worst["fid"], abs(frechet_distance(emb, emb)))
        assert worst["ssim"] <= 1e-9
        assert worst["ms_ssim"] <= 1e-6
        assert worst["structure"] <= 1e-6
        assert worst["fid"] <= 1e-4

        masks = [((m >> np.arange(9)) & 1).reshape(3, 3).astype(bool) for m in range(512)]
        seg = [SegMask.from_binary(m) for m in masks]
        comps = [_components(m) for m in masks]
        pop = np.array([m.sum() for m in masks])
        mismatches = 0
        for i in range(512):
            for j in range(512):
                total = pop[i] + pop[j]
                pix = 1.0 if total == 0 else 2.0 * np.logical_and(masks[i], masks[j]).sum() / total
                mismatches += dice_pixel(seg[i], seg[j]) != pix
                mismatches += dice_object(seg[i], seg[j]) != _object_dice_oracle(comps[i], comps[j])
        info["detail"] = (f"ssim {worst['ssim']:.1e}, ms_ssim {worst['ms_ssim']:.1e}, structure "
                          f"{worst['structure']:.1e}, fid {worst['fid']:.1e}, dice mismatches {mismatches}/524288")
        assert mismatches == 0


# ---------------------------------------------------------------------------
# 3. loss gradients

def _rand(seed, shape=(1, 1, 4, 4), lo=-0.9, hi=0.9):
    g = torch.Generator().manual_seed(seed)
    return lo + (hi - lo) * torch.rand(shape, generator=g, dtype=torch.float64)


def _rel_grad_error(fn, x, step=1e-4):
    x = x.clone().requires_grad_(True)
    (analytic,) = torch.autograd.grad(fn(x), x)
    base = x.detach().clone()
    numeric = torch.zeros_like(base)
    flat, nflat = base.view(-1), numeric.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + step
        up = fn(base).item()
        flat[i] = orig - step
        down = fn(base).item()
        flat[i] = orig
        nflat[i] = (up - down) / (2 * step)
    return ((analytic - numeric).norm() / max(numeric.norm().item(), 1e-12)).item()


def test_c3_loss_gradients():
    small = SsimConfig(window=3, sigma=1.0)
    ref = _rand(100)
    real, fake = _rand(101), _rand(102)
    conv = torch.nn.Conv2d(1, 1, 3, padding=1).double()

    def penalty(weight):
        critic = lambda z: torch.tanh(F.conv2d(z, weight, conv.bias, padding=1))
        return gradient_penalty(critic, real, fake, torch.Generator().manual_seed(0))

    cases = {
        "adversarial G": (lambda x: adversarial_loss(None, x, "G"), _rand(1)),
        "adversarial D real": (lambda x: adversarial_loss(x, ref, "D"), _rand(2)),
        "adversarial D fake": (lambda x: adversarial_loss(ref, x, "D"), _rand(3)),
        "wasserstein": (lambda x: wasserstein_loss(ref, x, "D") + wasserstein_loss(None, x, "G"), _rand(4)),
        "cycle": (lambda x: cycle_loss(ref, x), _rand(5)),
        "identity": (lambda x: identity_loss(ref, x), _rand(6)),
        "conditional identity": (lambda x: conditional_identity_loss(ref, x, 1, 1), _rand(7)),
        "ms_ssim": (lambda x: ms_ssim_loss(ref, x, small), _rand(8)),
        "structure": (lambda x: structure_loss(ref, x, small), _rand(9)),
        "domain": (lambda z: domain_classification_loss(z, 2), _rand(10, (1, 3), -2, 2)),
        "gradient penalty": (penalty, conv.weight.detach().clone()),
    }
    with criterion("3", "loss gradient checks") as info:
        errors = {name: _rel_grad_error(fn, x) for name, (fn, x) in cases.items()}
        name, worst = max(errors.items(), key=lambda kv: kv[1])
        info["detail"] = f"{len(errors)} losses, worst relative error {worst:.1e} ({name})"
        assert worst < 1e-3


# ---------------------------------------------------------------------------
# 4. schedules

def test_c4_schedules():
    with criterion("4", "schedules") as info:
        cfg = TrainConfig()
        assert all(lr_schedule(e, cfg) == 0.0005 for e in range(100))
        assert lr_schedule(150, cfg) == pytest.approx(0.00025, abs=1e-15)
        assert lr_schedule(200, cfg) == 0.0
        assert [additional_identity_weight(e) for e in (0, 10, 20, 21, 100)] == [5.0, 2.5, 0.0, 0.0, 0.0]
        info["detail"] = "lr 5e-4 / 2.5e-4 / 0 and extra identity 5 / 2.5 / 0"


# ---------------------------------------------------------------------------
# 5. architecture contracts

@torch.no_grad()
def test_c5_architecture_contracts():
    with criterion("5", "architecture contracts") as info:
        x = torch.rand(1, 3, 256, 256) * 2 - 1
        patch = make_discriminator(DiscriminatorSpec("patch"), seed=0)(x)
        assert patch.shape == (1, 1, 16, 16)
        maps, logits = make_discriminator(DiscriminatorSpec("dualhead", num_domains=3), seed=0)(x)
        assert maps.shape == (1, 1, 16, 16) and logits.shape == (1, 3)
        gen = make_generator(GeneratorSpec("conditional", base_width=16, num_domains=2), seed=0)
        xs = x[..., :64, :64]
        effect = (gen(xs, torch.tensor([0])) - gen(xs, torch.tensor([1]))).abs().max().item()
        info["detail"] = f"patch {tuple(patch.shape[-2:])}, dualhead logits {tuple(logits.shape)}, label effect {effect:.3f}"
        assert effect > 1e-3


# ---------------------------------------------------------------------------
# 6. colour-transfer baseline

def test_c6_baseline():
    with criterion("6", "colour transfer baseline") as info:
        tar, new = make_benchmark(40, spec=PhantomSpec(size=64), seed=3)
        worst_ks, worst_bound, worst_ratio = 0.0, None, -1.0
        for src, ref in zip(new.images("train")[:5], tar.images("train")[:5]):
            a, b = color_transfer(src, ref), color_transfer(src, ref)
            assert a.data.tobytes() == b.data.tobytes()
            src_lab, ref_lab = rgb_to_decorrelated(src), rgb_to_decorrelated(ref)
            for c in range(3):
                s, r = src_lab[..., c].ravel(), ref_lab[..., c].ravel()
                out = histogram_match_channel(s, r)
                order = np.argsort(s, kind="stable")
                assert np.all(np.diff(out[order]) >= 0), "rank order broken"
                ks = stats.ks_2samp(out, r).statistic
                bound = 2 / min(s.size, r.size) + 1e-3
                if ks / bound > worst_ratio:
                    worst_ks, worst_bound, worst_ratio = ks, bound, ks / bound
                assert ks <= bound
        info["detail"] = f"deterministic, rank-preserving, worst KS {worst_ks:.2e} <= {worst_bound:.2e}"


def test_property_suite_runtime():
    total = _elapsed["property"]
    ACCEPTANCE["1-6 runtime"] = ("PASS" if total < PROPERTY_BUDGET_S else "FAIL",
                                 f"property suites took {total:.1f} s (budget {PROPERTY_BUDGET_S:.0f} s)")
    assert total < PROPERTY_BUDGET_S


# ---------------------------------------------------------------------------
# 7-12. scaled synthetic experiment

@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    t = time.perf_counter()
    result = run_desk_experiment(DeskConfig(), tmp_path_factory.mktemp("desk"))
    return result, time.perf_counter() - t


def test_c7_domain_imitation(desk):
    result, _ = desk
    r = result.test_report
    with criterion("7", "domain imitation", "e2e") as info:
        info["detail"] = f"test FID {r.fid:.4f} vs raw {r.fid_original:.4f} (ratio {r.fid / r.fid_original:.3f}, need <= 0.5)"
        assert r.fid <= 0.5 * r.fid_original


def test_c8_content_preservation(desk):
    result, _ = desk
    r = result.test_report
    with criterion("8", "content preservation", "e2e") as info:
        info["detail"] = f"mean SSIM(original, transformed) {r.ssim_mean:.3f} (need >= 0.70)"
        assert r.ssim_mean >= 0.70


def test_c9_downstream_recovery(desk):
    result, _ = desk
    r = result.test_report
    with criterion("9", "downstream recovery", "e2e") as info:
        info["detail"] = (f"accuracy {r.accuracy:.3f} vs raw {r.accuracy_original:.3f} "
                          f"(+{100 * result.gan_delta:.1f} points, need >= 10; TAR test {result.downstream_tar_test:.3f})")
        assert result.gan_delta >= 0.10 - 1e-12


def test_c10_baseline_inferiority(desk):
    result, _ = desk
    with criterion("10", "baseline inferiority", "e2e") as info:
        info["detail"] = (f"colour transfer delta {100 * result.baseline_delta:+.1f} points vs "
                          f"GAN delta {100 * result.gan_delta:+.1f} points")
        assert result.baseline_delta < result.gan_delta


def test_c11_mode_collapse_detection(desk):
    result, _ = desk
    m = result.collapse_manifest
    with criterion("11", "mode-collapse detection", "e2e") as info:
        stds = [h["output_std"] for h in m.history if "output_std" in h]
        lowest = min(stds) if stds else math.nan
        info["detail"] = (f"structure + cycleGAN, adv x10: status {m.status}, flagged {m.mode_collapse}, "
                          f"lowest output std {lowest:.2e} (threshold 1e-3)")
        assert m.mode_collapse and lowest < 1e-3


def test_c12_selection_protocol(desk):
    result, _ = desk
    with criterion("12", "selection protocol", "e2e") as info:
        for m in result.manifests:
            assert m.selected_epoch == m.history[int(np.argmin(m.val_losses))]["epoch"]
        chosen = next(m for m in result.manifests if m.seed == result.selected_seed)
        assert result.selected_epoch == chosen.selected_epoch
        assert select_best(result.manifests)[1] in [m.selected_epoch for m in result.manifests]
        assert result.selection_guard_ok
        with pytest.raises(SelectionGuardError):
            select_best(result.manifests, split="test")
        with pytest.raises(SelectionGuardError):
            select_best(result.manifests, [result.test_report] * len(result.manifests))
        info["detail"] = (f"seed {result.selected_seed} epoch {result.selected_epoch} = argmin validation loss; "
                          "test metrics refused")


def test_end_to_end_runtime(desk):
    _, seconds = desk
    ACCEPTANCE["7-12 runtime"] = ("PASS" if seconds <= END_TO_END_BUDGET_S else "FAIL",
                                  f"synthetic experiment took {seconds / 60:.1f} min (budget 60 min)")
    assert seconds <= END_TO_END_BUDGET_S
