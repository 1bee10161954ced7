import math
import random

import numpy as np
import pytest
import torch
import torch.nn as nn

from biastransfer.errors import DataError, SelectionGuardError, TrainingDivergedError
from biastransfer.imaging import ImageTensor, build_pyramid, collapse_bands
from biastransfer.losses import ExtraLossConfig
from biastransfer.metrics import MetricReport
from biastransfer.networks import load_checkpoint, make_bundle
from biastransfer.synthdata import NEW_PRESET, TAR_PRESET, PhantomSpec, apply_domain_bias, generate_phantom
from biastransfer.training import (
    DomainTensors,
    ImagePool,
    RunManifest,
    TrainConfig,
    lr_schedule,
    model_input,
    output_spread,
    restore_best,
    select_best,
    train_cycle_pair,
    train_fpg,
    transform_full_resolution,
    validation_loss,
)


@pytest.fixture(scope="module")
def tiny_domains():
    spec = PhantomSpec(size=64, seed=3)
    clean = [generate_phantom(spec, i)[0] for i in range(24)]
    rng = np.random.default_rng(0)
    new = [apply_domain_bias(im, NEW_PRESET, rng) for im in clean[:12]]
    tar = [apply_domain_bias(im, TAR_PRESET, rng) for im in clean[12:]]
    return (DomainTensors.from_images(new[:8], new[8:], 64), DomainTensors.from_images(tar[:8], tar[8:], 64))


def smoke_cfg(**kw):
    base = dict(epochs=1, lr_steady_epochs=1, image_size=64, base_width=8, seeds=(0,))
    base.update(kw)
    return TrainConfig(**base)


# ---------------------------------------------------------------------------
# schedule and config

def test_lr_schedule_paper_profile():
    cfg = TrainConfig()
    assert all(lr_schedule(e, cfg) == 0.0005 for e in range(100))
    assert lr_schedule(150, cfg) == pytest.approx(0.00025)
    assert lr_schedule(200, cfg) == 0.0
    assert lr_schedule(0, cfg, "fpg") == 0.0001
    with pytest.raises(ValueError):
        lr_schedule(201, cfg)
    with pytest.raises(ValueError):
        lr_schedule(-1, cfg)


def test_lr_schedule_desk_profile():
    cfg = TrainConfig.desk()
    assert (cfg.image_size, cfg.base_width, cfg.epochs, cfg.seeds) == (64, 32, 30, (0, 1))
    assert lr_schedule(14, cfg) == 0.0005
    assert lr_schedule(15, cfg) == 0.0005
    assert lr_schedule(30, cfg) == 0.0
    lrs = [lr_schedule(e, cfg) for e in range(31)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_train_config_invariants():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=4)
    with pytest.raises(ValueError):
        TrainConfig(epochs=50)
    assert TrainConfig().buffer_for("cyclegan") == 50 and TrainConfig().buffer_for("fpg") == 0
    assert len(TrainConfig().seeds) == 5


def test_model_input_rejects_bad_sizes():
    with pytest.raises(DataError):
        model_input(ImageTensor(np.zeros((96, 96, 3))), 64)
    with pytest.raises(DataError):
        model_input(ImageTensor(np.zeros((64, 32, 3))), 32)
    assert model_input(ImageTensor(np.zeros((128, 128, 3))), 32).shape == (32, 32, 3)


def test_image_pool():
    rng = random.Random(0)
    assert ImagePool(0, rng).query(torch.ones(1)) is not None
    pool = ImagePool(2, rng)
    a, b = torch.zeros(1), torch.ones(1)
    assert torch.equal(pool.query(a), a) and torch.equal(pool.query(b), b)
    outs = {float(pool.query(torch.full((1,), 2.0))) for _ in range(30)}
    assert outs <= {0.0, 1.0, 2.0} and len(outs) > 1


# ---------------------------------------------------------------------------
# loops

def test_cycle_smoke_and_artifacts(tiny_domains, tmp_path):
    new, tar = tiny_domains
    bundle = make_bundle("unet_cyclegan", ["NEW", "TAR"], base_width=8, seed=0)
    cfg = smoke_cfg(extra=ExtraLossConfig("combined"))
    m = train_cycle_pair(new, tar, bundle, cfg, seed=0, out_dir=tmp_path)
    assert len(m.history) == 1 and m.status == "complete"
    assert all(math.isfinite(v) for v in m.history[0].values())
    assert m.selected_epoch == 0 and m.effective_ms_ssim_scales == 3 and m.replay_buffer == 50
    assert (tmp_path / "best.pt").exists() and (tmp_path / "losses.csv").exists()
    back = RunManifest.read(tmp_path / "manifest.json")
    assert back.to_dict() == m.to_dict()

    # checkpoint integrity: reloading reproduces the recorded validation loss
    loaded, meta = load_checkpoint(tmp_path / "best.pt", bundle.spec_dict())
    assert meta["epoch"] == m.selected_epoch
    assert validation_loss(loaded, new.val, tar.val, cfg) == pytest.approx(m.best_val_loss, abs=1e-5)


def test_cycle_runs_are_replayable(tiny_domains):
    new, tar = tiny_domains
    cfg = smoke_cfg(epochs=2, lr_steady_epochs=1, extra=ExtraLossConfig("structure"))
    runs = [train_cycle_pair(new, tar, make_bundle("cyclegan", ["NEW", "TAR"], base_width=8, seed=1), cfg, seed=1)
            for _ in range(2)]
    for h1, h2 in zip(runs[0].history, runs[1].history):
        for k in h1:
            assert h1[k] == pytest.approx(h2[k], abs=1e-6)


class ConstantGenerator(nn.Module):
    def __init__(self, value=0.0):
        super().__init__()
        self.p = nn.Parameter(torch.full((1, 3, 1, 1), value))

    def forward(self, x, label=None):
        return torch.tanh(self.p).expand_as(x) + 0 * x


def test_mode_collapse_is_flagged(tiny_domains):
    new, tar = tiny_domains
    bundle = make_bundle("cyclegan", ["NEW", "TAR"], base_width=8, seed=2)
    # both directions constant: a real generator fed constant images overflows
    # through its instance norms (see the divergence test below)
    bundle.generators["NEW->TAR"] = ConstantGenerator(0.1)
    bundle.generators["TAR->NEW"] = ConstantGenerator(-0.1)
    m = train_cycle_pair(new, tar, bundle, smoke_cfg(), seed=2)
    assert m.mode_collapse and m.collapse_epochs == [0]
    assert m.history[0]["output_std"] < 1e-3
    assert output_spread(lambda x: x, new.val) > 1e-2


def test_nan_aborts_with_manifest(tiny_domains, tmp_path):
    new, tar = tiny_domains
    bundle = make_bundle("cyclegan", ["NEW", "TAR"], base_width=8, seed=3)
    bundle.generators["NEW->TAR"] = ConstantGenerator(float("nan"))
    with pytest.raises(TrainingDivergedError) as err:
        train_cycle_pair(new, tar, bundle, smoke_cfg(), seed=3, out_dir=tmp_path)
    assert err.value.manifest.status == "diverged"
    assert RunManifest.read(tmp_path / "manifest.json").status == "diverged"


def test_collapse_into_overflow_is_still_diagnosed(tiny_domains):
    new, tar = tiny_domains
    bundle = make_bundle("cyclegan", ["NEW", "TAR"], base_width=8, seed=2)
    bundle.generators["NEW->TAR"] = ConstantGenerator(0.1)
    with pytest.raises(TrainingDivergedError) as err:
        train_cycle_pair(new, tar, bundle, smoke_cfg(), seed=2)
    m = err.value.manifest
    assert m.mode_collapse and m.history[-1]["output_std"] < 1e-3


def test_empty_data_rejected(tiny_domains):
    new, tar = tiny_domains
    empty = DomainTensors(new.train[:0], new.val)
    with pytest.raises(DataError):
        train_cycle_pair(empty, tar, make_bundle("cyclegan", ["NEW", "TAR"], base_width=8), smoke_cfg())
    with pytest.raises(DataError):
        DomainTensors.from_images([], [], 64)


def test_fpg_smoke_and_replay(tiny_domains):
    new, tar = tiny_domains
    third = DomainTensors(torch.flip(new.train, dims=(1,)), torch.flip(new.val, dims=(1,)))
    data = {"NEW": new, "TAR": tar, "OTHER": third}
    cfg = smoke_cfg(extra=ExtraLossConfig("ms_ssim"))
    runs = [train_fpg(data, make_bundle("fpg", list(data), base_width=8, seed=4), cfg, seed=4) for _ in range(2)]
    m = runs[0]
    assert len(m.history) == 1 and math.isfinite(m.history[0]["val_loss"]) and m.replay_buffer == 0
    assert m.history[0]["train_gp"] >= 0
    for k, v in m.history[0].items():
        assert v == pytest.approx(runs[1].history[0][k], abs=1e-6)
    with pytest.raises(DataError):
        train_fpg({"NEW": new}, make_bundle("fpg", ["NEW", "TAR"], base_width=8), cfg)


def test_restore_best(tiny_domains):
    new, tar = tiny_domains
    bundle = make_bundle("cyclegan", ["NEW", "TAR"], base_width=8, seed=5)
    cfg = smoke_cfg(epochs=2, lr_steady_epochs=1)
    m = train_cycle_pair(new, tar, bundle, cfg, seed=5)
    restore_best(bundle, m)
    assert validation_loss(bundle, new.val, tar.val, cfg) == pytest.approx(m.best_val_loss, abs=1e-5)


# ---------------------------------------------------------------------------
# selection

def manifest(seed, losses):
    return RunManifest("unet_cyclegan", "combined", seed, "h",
                       history=[{"epoch": e, "val_loss": v} for e, v in enumerate(losses)])


def report(split, fid, ssim=0.9):
    return MetricReport(split, ssim, 0.0, fid=fid)


def test_select_best_examples():
    assert select_best([manifest(0, [5, 4, 3, 2])]) == (0, 3)
    assert select_best([manifest(0, [3, 1, 2])]) == (0, 1)


def test_select_best_matches_brute_force():
    rng = np.random.default_rng(0)
    runs = [manifest(s, rng.uniform(1, 5, size=10)) for s in range(5)]
    best = min(((v, m.seed, e) for m in runs for e, v in enumerate(m.val_losses)))
    assert select_best(runs) == (best[1], best[2])
    reports = [report("val", f) for f in (0.5, 0.2, 0.9, 0.2, 0.4)]
    reports[3].ssim_mean = 0.95  # SSIM breaks the FID tie
    seed, epoch = select_best(runs, reports)
    assert seed == 3 and epoch == int(np.argmin(runs[3].val_losses))


def test_selection_guard():
    runs = [manifest(0, [1.0]), manifest(1, [2.0])]
    with pytest.raises(SelectionGuardError):
        select_best(runs, split="test")
    with pytest.raises(SelectionGuardError):
        select_best(runs, [report("val", 0.1), report("test", 0.05)])
    with pytest.raises(ValueError):
        select_best([])


# ---------------------------------------------------------------------------
# full resolution

def test_identity_stub_round_trip():
    img = ImageTensor(np.random.default_rng(1).uniform(size=(256, 256, 3)))
    out = transform_full_resolution(lambda x: x, img, 64)
    assert np.max(np.abs(out.data - img.data)) <= 1e-4


def test_kidney_size_is_preserved():
    img = ImageTensor(np.random.default_rng(2).uniform(size=(1024, 1024, 3)))
    out = transform_full_resolution(lambda x: x, img, 256)
    assert out.shape == (1024, 1024, 3)
    assert np.max(np.abs(out.data - img.data)) <= 1e-4


def test_constant_shift_stub_keeps_bands():
    img = ImageTensor(np.random.default_rng(3).uniform(0.0, 0.8, size=(256, 256, 3)))
    out = transform_full_resolution(lambda x: x + 0.2, img, 64)  # +0.1 in unit range
    pyr = build_pyramid(img, 64)
    oracle = np.clip(collapse_bands(pyr.bands, pyr.base.data + 0.1), 0, 1)
    np.testing.assert_allclose(out.data, oracle, atol=1e-5)
    np.testing.assert_allclose(out.data - img.data, 0.1, atol=1e-5)
