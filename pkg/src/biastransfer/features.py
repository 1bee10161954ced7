"""Fixed random convolutional encoder used as the FID feature front-end.

Absolute distances computed with it are not comparable to Inception-based FID
values; it only has to rank domain gaps consistently. Weights are generated from
a fixed seed once and shipped as ``assets/random_conv_64.npz``.
"""

from __future__ import annotations

from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

ENCODER_SEED = 20211
ENCODER_WIDTHS = (3, 16, 32, 64, 64, 64)
ASSET_NAME = "random_conv_64.npz"


def generate_encoder_weights(seed: int = ENCODER_SEED) -> dict[str, np.ndarray]:
    """He-normal 3x3 kernels for five stride-2 stages; zero biases."""
    g = torch.Generator().manual_seed(seed)
    weights = {}
    for i, (cin, cout) in enumerate(zip(ENCODER_WIDTHS[:-1], ENCODER_WIDTHS[1:])):
        std = np.sqrt(2.0 / (cin * 9))
        w = torch.randn(cout, cin, 3, 3, generator=g, dtype=torch.float64) * std
        weights[f"conv{i}.weight"] = w.numpy().astype(np.float32)
        weights[f"conv{i}.bias"] = np.zeros(cout, dtype=np.float32)
    return weights


def save_encoder_asset(path: str | Path, seed: int = ENCODER_SEED) -> None:
    np.savez(path, **generate_encoder_weights(seed))


class RandomConvEncoder(nn.Module):
    def __init__(self, weights: dict[str, np.ndarray]):
        super().__init__()
        self.convs = nn.ModuleList()
        for i, (cin, cout) in enumerate(zip(ENCODER_WIDTHS[:-1], ENCODER_WIDTHS[1:])):
            conv = nn.Conv2d(cin, cout, 3, stride=2, padding=1)
            conv.weight.data = torch.from_numpy(np.asarray(weights[f"conv{i}.weight"]))
            conv.bias.data = torch.from_numpy(np.asarray(weights[f"conv{i}.bias"]))
            self.convs.append(conv)
        self.requires_grad_(False)
        self.eval()

    @property
    def dim(self) -> int:
        return ENCODER_WIDTHS[-1]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: N x C x H x W in [-1, 1]; grey images are replicated to RGB
        if x.shape[1] == 1:
            x = x.expand(-1, 3, -1, -1)
        for conv in self.convs:
            x = F.leaky_relu(conv(x), 0.2)
        return x.mean(dim=(2, 3))

    @torch.no_grad()
    def embed(self, images: Sequence) -> np.ndarray:
        from .imaging import RangeTag, convert_range

        rows = []
        for img in images:
            data = convert_range(img, RangeTag.SYMMETRIC).data.transpose(2, 0, 1)
            t = torch.from_numpy(np.ascontiguousarray(data, dtype=np.float32))[None]
            rows.append(self(t)[0].double().numpy())
        return np.stack(rows)


@lru_cache(maxsize=None)
def _load_asset() -> RandomConvEncoder:
    ref = resources.files("biastransfer") / "assets" / ASSET_NAME
    with resources.as_file(ref) as path, np.load(path) as npz:
        weights = {k: npz[k] for k in npz.files}
    return RandomConvEncoder(weights)


_EXTRACTORS = {"random-conv-64": _load_asset}


def register_extractor(extractor_id: str, factory) -> None:
    """Plug in another encoder; ``factory()`` must return an object with ``embed(images)``."""
    _EXTRACTORS[extractor_id] = factory


def get_extractor(extractor_id: str):
    try:
        return _EXTRACTORS[extractor_id]()
    except KeyError:
        raise KeyError(f"unknown feature extractor {extractor_id!r}; known: {sorted(_EXTRACTORS)}") from None
