import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st

from biastransfer.errors import ConfigError
from biastransfer.imaging import ImageTensor
from biastransfer.losses import (
    ExtraLossConfig,
    LossWeights,
    additional_identity_weight,
    adversarial_loss,
    conditional_identity_loss,
    cycle_loss,
    domain_classification_loss,
    gradient_penalty,
    identity_loss,
    ms_ssim_loss,
    structure_loss,
    total_generator_loss,
    wasserstein_loss,
)
from biastransfer.metrics import SsimConfig, ms_ssim, structure_similarity

SMALL = SsimConfig(window=3, sigma=1.0)


def t(seed, shape=(1, 1, 4, 4), lo=-0.9, hi=0.9):
    g = torch.Generator().manual_seed(seed)
    return (lo + (hi - lo) * torch.rand(shape, generator=g, dtype=torch.float64))


def central_fd(fn, x, step=1e-4):
    grad = torch.zeros_like(x)
    flat, gflat = x.view(-1), grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + step
        up = fn(x).item()
        flat[i] = orig - step
        down = fn(x).item()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * step)
    return grad


def check_grad(fn, x):
    x = x.clone().requires_grad_(True)
    (analytic,) = torch.autograd.grad(fn(x), x)
    # autograd stays on: the gradient penalty differentiates internally
    numeric = central_fd(fn, x.detach().clone())
    rel = (analytic - numeric).norm() / max(numeric.norm().item(), 1e-12)
    assert rel < 1e-3, rel


# ---------------------------------------------------------------------------
# gradient checks on 4 x 4 tensors

def test_grad_adversarial():
    other = t(1)
    check_grad(lambda x: adversarial_loss(None, x, "G"), t(0))
    check_grad(lambda x: adversarial_loss(x, other, "D"), t(2))
    check_grad(lambda x: adversarial_loss(other, x, "D"), t(3))
    check_grad(lambda x: wasserstein_loss(other, x, "D") + wasserstein_loss(None, x, "G"), t(4))


@pytest.mark.parametrize("fn", [cycle_loss, identity_loss])
def test_grad_l1(fn):
    ref = t(5)
    check_grad(lambda x: fn(ref, x), t(6))


def test_grad_ms_ssim_and_structure():
    ref = t(7)
    check_grad(lambda x: ms_ssim_loss(ref, x, SMALL), t(8))
    check_grad(lambda x: structure_loss(ref, x, SMALL), t(9))


def test_grad_domain_classification():
    check_grad(lambda z: domain_classification_loss(z, 1), t(10, (1, 3), -2, 2))


def test_grad_conditional_identity():
    ref = t(11)
    check_grad(lambda x: conditional_identity_loss(ref, x, 0, 0), t(12))


def test_grad_gradient_penalty_wrt_critic_weights():
    real, fake = t(13), t(14)
    conv = torch.nn.Conv2d(1, 1, 3, padding=1).double()

    def penalty(weight):
        def critic(x):
            return torch.tanh(F.conv2d(x, weight, conv.bias, padding=1))
        return gradient_penalty(critic, real, fake, torch.Generator().manual_seed(0))

    check_grad(penalty, conv.weight.detach().clone())


# ---------------------------------------------------------------------------
# adversarial and classification examples

def test_adversarial_examples():
    ones, zeros, half = torch.ones(1, 1, 16, 16), torch.zeros(1, 1, 16, 16), torch.full((1, 1, 16, 16), 0.5)
    assert adversarial_loss(ones, zeros, "D").item() == 0.0
    assert adversarial_loss(None, ones, "G").item() == 0.0
    assert adversarial_loss(half, half, "D").item() == pytest.approx(0.25)
    with pytest.raises(ValueError):
        adversarial_loss(ones, ones, "X")


def test_domain_classification_examples():
    assert domain_classification_loss(torch.tensor([[50.0, -50.0]]), 0).item() == pytest.approx(0.0, abs=1e-12)
    assert domain_classification_loss(torch.zeros(1, 2), 1).item() == pytest.approx(math.log(2))
    z = torch.tensor([0.3, -1.2, 2.0], dtype=torch.float64)
    oracle = -z[2].item() + math.log(sum(math.exp(v) for v in z.tolist()))
    assert domain_classification_loss(z, 2).item() == pytest.approx(oracle, abs=1e-7)
    with pytest.raises(IndexError):
        domain_classification_loss(torch.zeros(1, 2), 2)


# ---------------------------------------------------------------------------
# reconstruction examples

@pytest.mark.parametrize("fn", [cycle_loss, identity_loss, lambda a, b: conditional_identity_loss(a, b, 1, 1)])
def test_l1_examples(fn):
    x = t(15, (1, 3, 8, 8))
    assert fn(x, x).item() == 0.0
    assert fn(x, x + 0.2).item() == pytest.approx(0.2, abs=1e-12)
    y = t(16, (1, 3, 8, 8))
    oracle = np.mean(np.abs(x.numpy() - y.numpy()))
    assert fn(x, y).item() == pytest.approx(oracle, abs=1e-7)
    with pytest.raises(ValueError):
        fn(x, y[..., :4])


def test_conditional_identity_requires_source_label():
    x = t(17)
    with pytest.raises(ValueError):
        conditional_identity_loss(x, x, 1, 0)


def test_ms_ssim_loss_examples():
    x = t(18, (1, 3, 64, 64))
    assert ms_ssim_loss(x, x).item() == pytest.approx(0.0, abs=1e-12)
    noise = t(19, (1, 3, 64, 64), -1, 1)
    v = ms_ssim_loss(x, noise).item()
    assert 0 < v <= 2
    xi = ImageTensor(((x[0] + 1) / 2).permute(1, 2, 0).numpy())
    yi = ImageTensor(((noise[0] + 1) / 2).permute(1, 2, 0).numpy())
    assert v == pytest.approx(1 - ms_ssim(xi, yi, scales=3), abs=1e-6)


def test_structure_loss_examples():
    x = t(20, (1, 3, 32, 32), -0.5, 0.5)
    assert structure_loss(x, x).item() == pytest.approx(0.0, abs=1e-12)
    for a, b in [(1.0, 0.2), (0.5, -0.3), (0.1, 0.0)]:
        assert structure_loss(x, a * x + b).item() < 1e-6
    y = t(21, (1, 3, 32, 32))
    xi = ImageTensor(((x[0] + 1) / 2).permute(1, 2, 0).numpy())
    yi = ImageTensor(((y[0] + 1) / 2).permute(1, 2, 0).numpy())
    assert structure_loss(x, y).item() == pytest.approx(1 - structure_similarity(xi, yi), abs=1e-6)


# ---------------------------------------------------------------------------
# gradient penalty

def test_gradient_penalty_linear_unit_norm():
    w = torch.randn(1, 3, 8, 8, dtype=torch.float64)
    w /= w.norm()
    critic = lambda x: (x * w).sum(dim=(1, 2, 3)).view(-1, 1, 1, 1)
    gp = gradient_penalty(critic, t(22, (1, 3, 8, 8)), t(23, (1, 3, 8, 8)))
    assert gp.item() == pytest.approx(0.0, abs=1e-12)


def test_gradient_penalty_constant_critic():
    critic = lambda x: torch.ones(x.shape[0], 1, 2, 2)
    assert gradient_penalty(critic, t(24), t(25)).item() == 1.0


def test_gradient_penalty_matches_fd_oracle():
    a, b = 0.7, -1.3  # two parameters

    def critic(x):
        m = x.mean(dim=(1, 2, 3))
        return (a * torch.tanh(3 * m) + b * (x**2).mean(dim=(1, 2, 3))).view(-1, 1, 1, 1)

    real, fake = t(26, (2, 1, 4, 4)), t(27, (2, 1, 4, 4))
    gp = gradient_penalty(critic, real, fake, torch.Generator().manual_seed(5)).item()
    u = torch.rand((2, 1, 1, 1), generator=torch.Generator().manual_seed(5), dtype=torch.float64)
    x_hat = u * real + (1 - u) * fake
    penalties = []
    for i in range(2):
        g = central_fd(lambda z: critic(z[None])[0, 0, 0, 0], x_hat[i].clone())
        penalties.append((g.norm().item() - 1) ** 2)
    assert gp == pytest.approx(np.mean(penalties), abs=1e-4)


# ---------------------------------------------------------------------------
# weights, schedule and totals

def test_paper_weights():
    w = LossWeights()
    assert (w.adv, w.cyc, w.id, w.gp, w.domain, w.id_fpg, w.extra) == (1, 10, 10, 10, 1, 10, 5)
    with pytest.raises(ConfigError):
        LossWeights(cyc=-1)


def test_additional_identity_weight_examples():
    assert additional_identity_weight(0) == 5.0
    assert additional_identity_weight(10) == 2.5
    assert additional_identity_weight(20) == 0.0
    assert additional_identity_weight(37) == 0.0
    with pytest.raises(ValueError):
        additional_identity_weight(-1)


@settings(max_examples=50, deadline=None)
@given(e=st.integers(0, 500), d=st.integers(1, 100))
def test_additional_identity_weight_non_increasing(e, d):
    assert additional_identity_weight(e + 1, d) <= additional_identity_weight(e, d)
    if e >= d:
        assert additional_identity_weight(e, d) == 0.0


def test_total_generator_loss():
    w = LossWeights()
    none = ExtraLossConfig()
    assert total_generator_loss({"adv": 0.0, "cyc": 0.0, "id": 0.0}, w, none, 0) == 0.0
    assert total_generator_loss({"adv": 1.0, "cyc": 0.1, "id": 0.05}, w, none, 0) == pytest.approx(2.5)
    comb = ExtraLossConfig("combined")
    base = {"adv": 1.0, "cyc": 0.1, "id": 0.05, "ms_ssim": 0.2}
    assert total_generator_loss({**base, "extra_id": 3.0}, w, comb, 25) == pytest.approx(2.5 + 5 * 0.2)
    assert total_generator_loss({**base, "extra_id": 3.0}, w, comb, 10) == pytest.approx(2.5 + 1.0 + 2.5 * 3.0)
    struct = ExtraLossConfig("structure")
    assert total_generator_loss({"adv": 1.0, "structure": 0.1}, w, struct, 0) == pytest.approx(1.5)
    with pytest.raises(ConfigError):
        total_generator_loss({"adv": 1.0, "structure": 0.1, "ms_ssim": 0.1}, w, struct, 0)
    fpg = {"adv": 1.0, "domain": 0.5, "cyc": 0.1, "id": 0.05}
    assert total_generator_loss(fpg, w, none, 0, "fpg") == pytest.approx(1 + 0.5 + 1 + 0.5)


def test_extra_config_validation():
    assert ExtraLossConfig("combined").uses_ms_ssim and ExtraLossConfig("combined").uses_extra_identity
    assert not ExtraLossConfig("structure").uses_ms_ssim
    with pytest.raises(ConfigError):
        ExtraLossConfig("structure+ms_ssim")
    with pytest.raises(ConfigError):
        ExtraLossConfig("combined", decay_epochs=0)
