"""Generators, discriminators, model bundles and checkpoints.

Conventions follow the cycleGAN reference: instance norm and reflect padding in
generators, zero padding in discriminators, N(0, 0.02) initialisation. The patch
discriminator uses four stride-2 stages so a 256 x 256 input yields a 16 x 16 map.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import SpecMismatchError

GENERATOR_KINDS = ("resnet", "unet", "conditional", "identity")
DISCRIMINATOR_KINDS = ("patch", "dualhead")
ARCHITECTURES = ("cyclegan", "unet_cyclegan", "fpg")


@dataclass(frozen=True)
class GeneratorSpec:
    kind: str = "resnet"
    in_channels: int = 3
    base_width: int = 64
    n_resblocks: int | None = None
    n_down: int | None = None
    num_domains: int = 0

    def __post_init__(self):
        if self.kind not in GENERATOR_KINDS:
            raise ValueError(f"unknown generator kind {self.kind!r}")
        if self.kind == "conditional" and self.num_domains < 2:
            raise ValueError("conditional generator needs num_domains >= 2")
        if self.n_resblocks is None:
            object.__setattr__(self, "n_resblocks", 2 if self.kind == "unet" else 9)
        if self.n_down is None:
            object.__setattr__(self, "n_down", 4 if self.kind == "unet" else 2)


@dataclass(frozen=True)
class DiscriminatorSpec:
    kind: str = "patch"
    in_channels: int = 3
    base_width: int = 64
    n_down: int = 4
    num_domains: int = 0

    def __post_init__(self):
        if self.kind not in DISCRIMINATOR_KINDS:
            raise ValueError(f"unknown discriminator kind {self.kind!r}")
        if self.kind == "dualhead" and self.num_domains < 2:
            raise ValueError("dualhead discriminator needs num_domains >= 2")

    def patch_grid(self, image_side: int) -> int:
        if image_side % 2**self.n_down:
            raise ValueError(f"input side {image_side} not divisible by 2^{self.n_down}")
        return image_side // 2**self.n_down


def init_weights(module: nn.Module, generator: torch.Generator | None = None) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=generator) * 0.02)
                if m.bias is not None:
                    m.bias.zero_()


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


# ---------------------------------------------------------------------------
# generators

def _conv_block(cin, cout, kernel=3, stride=1, pad_mode="reflect", norm=True):
    layers = [nn.Conv2d(cin, cout, kernel, stride=stride, padding=kernel // 2, padding_mode=pad_mode)]
    if norm:
        layers.append(nn.InstanceNorm2d(cout))
    layers.append(nn.ReLU(inplace=True))
    return nn.Sequential(*layers)


def _up_block(cin, cout):
    return nn.Sequential(
        nn.ConvTranspose2d(cin, cout, 3, stride=2, padding=1, output_padding=1),
        nn.InstanceNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class ResidualBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(width, width, 3, padding=1, padding_mode="reflect"),
            nn.InstanceNorm2d(width),
            nn.ReLU(inplace=True),
            nn.Conv2d(width, width, 3, padding=1, padding_mode="reflect"),
            nn.InstanceNorm2d(width),
        )

    def forward(self, x):
        return x + self.body(x)


def _head(width, out_channels):
    return nn.Sequential(nn.Conv2d(width, out_channels, 7, padding=3, padding_mode="reflect"), nn.Tanh())


class ResnetGenerator(nn.Module):
    """c7s1 stem, strided downsampling, residual blocks, transposed-conv upsampling, tanh."""

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        cin = spec.in_channels + (spec.num_domains if spec.kind == "conditional" else 0)
        w = spec.base_width
        # a broadcast label is constant per channel after the stem conv, so instance
        # norm there would erase it; the conditional stem is left unnormalised
        layers = [_conv_block(cin, w, kernel=7, norm=spec.kind != "conditional")]
        for i in range(spec.n_down):
            layers.append(_conv_block(w * 2**i, w * 2 ** (i + 1), stride=2))
        width = w * 2**spec.n_down
        layers += [ResidualBlock(width) for _ in range(spec.n_resblocks)]
        for i in reversed(range(spec.n_down)):
            layers.append(_up_block(w * 2 ** (i + 1), w * 2**i))
        layers.append(_head(w, spec.in_channels))
        self.model = nn.Sequential(*layers)

    def forward(self, x, label=None):
        if self.spec.kind == "conditional":
            x = concat_label(x, label, self.spec.num_domains)
        return self.model(x)


class UNetGenerator(nn.Module):
    """Encoder-decoder with a skip connection at every resolution."""

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        w = spec.base_width
        widths = [min(w * 2**i, w * 8) for i in range(spec.n_down + 1)]
        self.stem = _conv_block(spec.in_channels, widths[0], kernel=7)
        self.down = nn.ModuleList(
            _conv_block(widths[i], widths[i + 1], stride=2) for i in range(spec.n_down)
        )
        self.bottleneck = nn.Sequential(*[ResidualBlock(widths[-1]) for _ in range(spec.n_resblocks)])
        self.up = nn.ModuleList(_up_block(widths[i + 1], widths[i]) for i in range(spec.n_down))
        self.merge = nn.ModuleList(_conv_block(2 * widths[i], widths[i]) for i in range(spec.n_down))
        self.head = _head(widths[0], spec.in_channels)

    def forward(self, x, label=None):
        skips = [self.stem(x)]
        for block in self.down:
            skips.append(block(skips[-1]))
        h = self.bottleneck(skips.pop())
        for i in reversed(range(self.spec.n_down)):
            h = self.merge[i](torch.cat([self.up[i](h), skips[i]], dim=1))
        return self.head(h)


class IdentityGenerator(nn.Module):
    """Pass-through stub for pipeline verification; has no trainable parameters."""

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec

    def forward(self, x, label=None):
        return x


def concat_label(x: torch.Tensor, label: torch.Tensor, num_domains: int) -> torch.Tensor:
    """Broadcast a one-hot domain label spatially and append it as channels."""
    if label is None:
        raise ValueError("conditional generator needs a target-domain label")
    label = torch.as_tensor(label)
    if label.dtype in (torch.int64, torch.int32):
        label = F.one_hot(label.reshape(-1), num_domains)
    label = label.to(x.dtype).reshape(label.shape[0], num_domains, 1, 1)
    label = label.expand(x.shape[0], num_domains, x.shape[2], x.shape[3])
    return torch.cat([x, label], dim=1)


def make_generator(spec: GeneratorSpec, seed: int | None = None) -> nn.Module:
    cls = {"resnet": ResnetGenerator, "conditional": ResnetGenerator,
           "unet": UNetGenerator, "identity": IdentityGenerator}[spec.kind]
    net = cls(spec)
    init_weights(net, torch.Generator().manual_seed(seed) if seed is not None else None)
    return net


# ---------------------------------------------------------------------------
# discriminators

class PatchDiscriminator(nn.Module):
    """PatchGAN; ``dualhead`` adds a domain-classification head on the same trunk."""

    def __init__(self, spec: DiscriminatorSpec):
        super().__init__()
        self.spec = spec
        w = spec.base_width
        norm = spec.kind == "patch"
        layers = []
        cin = spec.in_channels
        for i in range(spec.n_down):
            cout = w * 2 ** min(i, 3)
            layers.append(nn.Conv2d(cin, cout, 4, stride=2, padding=1))
            if norm and i > 0:
                layers.append(nn.InstanceNorm2d(cout))
            layers.append(nn.LeakyReLU(0.2, inplace=True))
            cin = cout
        self.trunk = nn.Sequential(*layers)
        self.patch_head = nn.Conv2d(cin, 1, 3, padding=1)
        self.domain_head = nn.Conv2d(cin, spec.num_domains, 3, padding=1) if spec.kind == "dualhead" else None

    def forward(self, x):
        h = self.trunk(x)
        patches = self.patch_head(h)
        if self.domain_head is None:
            return patches
        return patches, self.domain_head(h).mean(dim=(2, 3))


def make_discriminator(spec: DiscriminatorSpec, seed: int | None = None) -> nn.Module:
    net = PatchDiscriminator(spec)
    init_weights(net, torch.Generator().manual_seed(seed) if seed is not None else None)
    return net


def patch_output(d_out):
    return d_out[0] if isinstance(d_out, tuple) else d_out


class StarGANDiscriminator(nn.Module):
    """Reference discriminator layout of the original StarGAN/FPG papers (parameter comparison only)."""

    def __init__(self, image_size: int = 256, conv_dim: int = 64, c_dim: int = 2, repeat_num: int = 6):
        super().__init__()
        layers = [nn.Conv2d(3, conv_dim, 4, 2, 1), nn.LeakyReLU(0.01)]
        cur = conv_dim
        for _ in range(1, repeat_num):
            layers += [nn.Conv2d(cur, cur * 2, 4, 2, 1), nn.LeakyReLU(0.01)]
            cur *= 2
        k = image_size // 2**repeat_num
        self.main = nn.Sequential(*layers)
        self.conv1 = nn.Conv2d(cur, 1, 3, 1, 1, bias=False)
        self.conv2 = nn.Conv2d(cur, c_dim, k, bias=False)

    def forward(self, x):
        h = self.main(x)
        return self.conv1(h), self.conv2(h).view(x.shape[0], -1)


# ---------------------------------------------------------------------------
# bundles

@dataclass
class ModelBundle:
    architecture: str
    domain_names: list[str]
    generator_specs: dict[str, GeneratorSpec]
    discriminator_specs: dict[str, DiscriminatorSpec]
    generators: dict[str, nn.Module] = field(default_factory=dict, repr=False)
    discriminators: dict[str, nn.Module] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.architecture == "fpg":
            if len(self.domain_names) < 2:
                raise ValueError("fpg needs at least two domains")
        elif len(self.domain_names) != 2:
            raise ValueError("cycle variants translate between exactly two domains")

    @property
    def is_cycle(self) -> bool:
        return self.architecture != "fpg"

    def domain_index(self, name: str) -> int:
        return self.domain_names.index(name)

    def translator(self, source: str, target: str):
        """Callable mapping a symmetric-range N x 3 x H x W batch from ``source`` to ``target``."""
        if self.is_cycle:
            gen = self.generators[f"{source}->{target}"]
            return lambda x: gen(x)
        gen = self.generators["G"]
        idx = self.domain_index(target)

        def translate(x):
            label = torch.full((x.shape[0],), idx, dtype=torch.int64)
            return gen(x, label)

        return translate

    def parameter_counts(self) -> dict[str, int]:
        nets = {**{f"G[{k}]": v for k, v in self.generators.items()},
                **{f"D[{k}]": v for k, v in self.discriminators.items()}}
        return {k: count_parameters(v) for k, v in nets.items()}

    def spec_dict(self) -> dict:
        return {
            "architecture": self.architecture,
            "domain_names": list(self.domain_names),
            "generators": {k: asdict(v) for k, v in self.generator_specs.items()},
            "discriminators": {k: asdict(v) for k, v in self.discriminator_specs.items()},
        }


def make_bundle(
    architecture: str,
    domain_names: list[str],
    base_width: int = 64,
    seed: int = 0,
    generator_kind: str | None = None,
) -> ModelBundle:
    """Build generators and discriminators; seeds are derived per network from ``seed``."""
    if architecture in ("cyclegan", "unet_cyclegan"):
        kind = generator_kind or ("unet" if architecture == "unet_cyclegan" else "resnet")
        a, b = domain_names
        gspecs = {f"{a}->{b}": GeneratorSpec(kind, base_width=base_width),
                  f"{b}->{a}": GeneratorSpec(kind, base_width=base_width)}
        dspecs = {a: DiscriminatorSpec("patch", base_width=base_width),
                  b: DiscriminatorSpec("patch", base_width=base_width)}
    elif architecture == "fpg":
        n = len(domain_names)
        kind = generator_kind or "conditional"
        gspecs = {"G": GeneratorSpec(kind, base_width=base_width, num_domains=n)}
        dspecs = {"D": DiscriminatorSpec("dualhead", base_width=base_width, num_domains=n)}
    else:
        raise ValueError(f"unknown architecture {architecture!r}")
    bundle = ModelBundle(architecture, list(domain_names), gspecs, dspecs)
    for i, (name, spec) in enumerate(sorted(gspecs.items())):
        bundle.generators[name] = make_generator(spec, seed * 1000 + i)
    for i, (name, spec) in enumerate(sorted(dspecs.items())):
        bundle.discriminators[name] = make_discriminator(spec, seed * 1000 + 100 + i)
    # keep dict order stable regardless of sorting above
    bundle.generators = {k: bundle.generators[k] for k in gspecs}
    bundle.discriminators = {k: bundle.discriminators[k] for k in dspecs}
    return bundle


def save_checkpoint(path: str | Path, bundle: ModelBundle, epoch: int, seed: int, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": "biastransfer-checkpoint/1",
        "spec": bundle.spec_dict(),
        "epoch": epoch,
        "seed": seed,
        "generators": {k: v.state_dict() for k, v in bundle.generators.items()},
        "discriminators": {k: v.state_dict() for k, v in bundle.discriminators.items()},
        "extra": extra or {},
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path: str | Path, expected_spec: dict | None = None) -> tuple[ModelBundle, dict]:
    """Rebuild the bundle stored at ``path``; raise SpecMismatchError if it differs from ``expected_spec``."""
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if payload.get("format") != "biastransfer-checkpoint/1":
        raise SpecMismatchError(f"{path} is not a bias-transfer checkpoint")
    spec = payload["spec"]
    if expected_spec is not None and spec != expected_spec:
        raise SpecMismatchError(f"checkpoint spec {spec} does not match expected {expected_spec}")
    bundle = ModelBundle(
        spec["architecture"],
        spec["domain_names"],
        {k: GeneratorSpec(**v) for k, v in spec["generators"].items()},
        {k: DiscriminatorSpec(**v) for k, v in spec["discriminators"].items()},
    )
    for name, s in bundle.generator_specs.items():
        net = make_generator(s)
        net.load_state_dict(payload["generators"][name])
        bundle.generators[name] = net
    for name, s in bundle.discriminator_specs.items():
        net = make_discriminator(s)
        net.load_state_dict(payload["discriminators"][name])
        bundle.discriminators[name] = net
    meta = {k: payload[k] for k in ("epoch", "seed", "extra")}
    return bundle, meta
