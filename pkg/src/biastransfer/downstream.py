"""Toy downstream classifier standing in for the pre-trained analysis network.

It is trained once on the target domain's training split and then frozen; bias
transfer is judged by how much of its accuracy it recovers on the new domain.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import BenchmarkInvalidError
from .imaging import ImageTensor, RangeTag, convert_range
from .metrics import classification_scores

MIN_TARGET_ACCURACY = 0.85


class DownstreamClassifier(nn.Module):
    def __init__(self, num_classes: int = 4, width: int = 16):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(3, width, 3, stride=2, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(width, 2 * width, 3, stride=2, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(2 * width, 4 * width, 3, stride=2, padding=1), nn.ReLU(inplace=True),
        )
        self.fc = nn.Linear(4 * width, num_classes)
        self.num_classes = num_classes
        self.width = width

    def forward(self, x):
        return self.fc(self.features(x).mean(dim=(2, 3)))

    @torch.no_grad()
    def predict(self, images: Sequence[ImageTensor]) -> list[int]:
        self.eval()
        return self(_stack(images)).argmax(dim=1).tolist()


def _stack(images: Sequence[ImageTensor]) -> torch.Tensor:
    arr = np.stack([convert_range(im, RangeTag.SYMMETRIC).data.transpose(2, 0, 1) for im in images])
    return torch.from_numpy(arr.astype(np.float32))


def _augment(x: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    # dihedral transforms keep the area-fraction label and the colours
    k = int(torch.randint(4, (1,), generator=gen))
    x = torch.rot90(x, k, dims=(2, 3))
    if torch.rand(1, generator=gen) < 0.5:
        x = torch.flip(x, dims=(3,))
    return x


def train_downstream(
    images: Sequence[ImageTensor],
    labels: Sequence[int],
    val_images: Sequence[ImageTensor],
    val_labels: Sequence[int],
    seed: int = 0,
    epochs: int = 60,
    lr: float = 2e-3,
    batch_size: int = 8,
    num_classes: int = 4,
    min_accuracy: float = MIN_TARGET_ACCURACY,
) -> DownstreamClassifier:
    """Train on target-domain images; raise BenchmarkInvalidError below ``min_accuracy`` on validation."""
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    model = DownstreamClassifier(num_classes)
    x = _stack(images)
    y = torch.as_tensor(list(labels), dtype=torch.int64)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, epochs)
    for _ in range(epochs):
        model.train()
        order = torch.randperm(len(y), generator=gen)
        for start in range(0, len(y), batch_size):
            idx = order[start:start + batch_size]
            loss = F.cross_entropy(model(_augment(x[idx], gen)), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
        sched.step()
    model.requires_grad_(False)
    model.eval()
    acc, _ = evaluate_downstream(model, val_images, val_labels)
    if acc < min_accuracy:
        raise BenchmarkInvalidError(
            f"downstream model reached only {acc:.3f} validation accuracy on the target domain "
            f"(needs {min_accuracy}); the benchmark cannot measure a domain gap"
        )
    return model


def evaluate_downstream(model: DownstreamClassifier, images: Sequence[ImageTensor], labels: Sequence[int]):
    preds = model.predict(images)
    return classification_scores(preds, list(labels), list(range(model.num_classes)))


def save_downstream(path: str | Path, model: DownstreamClassifier) -> None:
    torch.save({"num_classes": model.num_classes, "width": model.width, "state": model.state_dict()}, path)


def load_downstream(path: str | Path) -> DownstreamClassifier:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    model = DownstreamClassifier(payload["num_classes"], payload["width"])
    model.load_state_dict(payload["state"])
    model.requires_grad_(False)
    model.eval()
    return model
