"""Image-quality, domain-distance, segmentation and classification metrics.

SSIM-family scores are computed by a differentiable torch core on N x C x H x W
tensors (shared with the training losses) and exposed here for ImageTensor pairs.
Local statistics use a Gaussian window without padding ("valid" positions only).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.linalg
import torch
import torch.nn.functional as F
from scipy import ndimage

from .errors import DimensionError
from .imaging import ImageTensor, RangeTag, convert_range

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


@dataclass(frozen=True)
class SsimConfig:
    window: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 1.0

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError(f"window must be odd and >= 3, got {self.window}")
        if self.k1 <= 0 or self.k2 <= 0:
            raise ValueError("K1 and K2 must be positive")

    @property
    def c1(self) -> float:
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.dynamic_range) ** 2

    @property
    def c3(self) -> float:
        return self.c2 / 2


# ---------------------------------------------------------------------------
# torch core

def gaussian_window(size: int, sigma: float, dtype=torch.float64) -> torch.Tensor:
    coords = torch.arange(size, dtype=dtype) - (size - 1) / 2
    g = torch.exp(-(coords**2) / (2 * sigma**2))
    return g / g.sum()


def _filter(x: torch.Tensor, win: torch.Tensor) -> torch.Tensor:
    c = x.shape[1]
    k = win.shape[0]
    x = F.conv2d(x, win.view(1, 1, k, 1).expand(c, 1, k, 1), groups=c)
    return F.conv2d(x, win.view(1, 1, 1, k).expand(c, 1, 1, k), groups=c)


def local_stats(x: torch.Tensor, y: torch.Tensor, cfg: SsimConfig):
    """Gaussian-weighted local means, variances and covariance (valid positions)."""
    if x.shape != y.shape:
        raise DimensionError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    if min(x.shape[-2:]) < cfg.window:
        raise DimensionError(f"image {tuple(x.shape[-2:])} smaller than window {cfg.window}")
    win = gaussian_window(cfg.window, cfg.sigma, x.dtype).to(x.device)
    mu_x, mu_y = _filter(x, win), _filter(y, win)
    var_x = _filter(x * x, win) - mu_x**2
    var_y = _filter(y * y, win) - mu_y**2
    cov = _filter(x * y, win) - mu_x * mu_y
    return mu_x, mu_y, var_x, var_y, cov


def ssim_maps(x: torch.Tensor, y: torch.Tensor, cfg: SsimConfig):
    """Return (ssim_map, cs_map); cs is the contrast-structure factor."""
    mu_x, mu_y, var_x, var_y, cov = local_stats(x, y, cfg)
    lum = (2 * mu_x * mu_y + cfg.c1) / (mu_x**2 + mu_y**2 + cfg.c1)
    cs = (2 * cov + cfg.c2) / (var_x + var_y + cfg.c2)
    return lum * cs, cs


def ssim_torch(x: torch.Tensor, y: torch.Tensor, cfg: SsimConfig = SsimConfig()) -> torch.Tensor:
    """Per-image SSIM, shape (N,). Channels are averaged."""
    s, _ = ssim_maps(x, y, cfg)
    return s.mean(dim=(1, 2, 3))


def structure_torch(x: torch.Tensor, y: torch.Tensor, cfg: SsimConfig = SsimConfig()) -> torch.Tensor:
    """Per-image mean of s = (cov + C3) / (sigma_x sigma_y + C3)."""
    _, _, var_x, var_y, cov = local_stats(x, y, cfg)
    # floor keeps the sqrt differentiable on flat windows; far below C3
    sigma_xy = torch.sqrt(torch.clamp(var_x.clamp(min=0) * var_y.clamp(min=0), min=1e-24))
    s = (cov + cfg.c3) / (sigma_xy + cfg.c3)
    return s.mean(dim=(1, 2, 3))


def max_scales(side: int, window: int, limit: int = len(MS_SSIM_WEIGHTS)) -> int:
    scales = 0
    while scales < limit and side >= 2**scales * window:
        scales += 1
    return scales


def ms_ssim_weights(scales: int) -> tuple[float, ...]:
    """Leading weights of the 5-scale set, renormalised to sum to one when truncated."""
    if not 1 <= scales <= len(MS_SSIM_WEIGHTS):
        raise DimensionError(f"unsupported scale count {scales}")
    w = MS_SSIM_WEIGHTS[:scales]
    if scales == len(MS_SSIM_WEIGHTS):
        return w
    total = sum(w)
    return tuple(v / total for v in w)


def ms_ssim_torch(
    x: torch.Tensor,
    y: torch.Tensor,
    cfg: SsimConfig = SsimConfig(),
    scales: int | None = None,
) -> torch.Tensor:
    """Per-image MS-SSIM, shape (N,). ``scales=None`` picks the most the size allows (<= 5)."""
    if x.shape != y.shape:
        raise DimensionError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    side = min(x.shape[-2:])
    if scales is None:
        scales = max_scales(side, cfg.window)
        if scales == 0:
            raise DimensionError(f"image side {side} too small for window {cfg.window}")
    elif side < 2 ** (scales - 1) * cfg.window:
        raise DimensionError(
            f"side {side} too small for {scales} scales (needs {2 ** (scales - 1) * cfg.window})"
        )
    weights = ms_ssim_weights(scales)
    out = torch.ones(x.shape[0], dtype=x.dtype, device=x.device)
    for j, w in enumerate(weights):
        s, cs = ssim_maps(x, y, cfg)
        last = j == scales - 1
        term = (s if last else cs).mean(dim=(1, 2, 3))
        # negative terms would make fractional powers undefined
        out = out * torch.relu(term) ** w
        if not last:
            x = F.avg_pool2d(x, 2)
            y = F.avg_pool2d(y, 2)
    return out


# ---------------------------------------------------------------------------
# ImageTensor wrappers

def to_batch(img: ImageTensor) -> torch.Tensor:
    """Unit-range 1 x C x H x W float64 tensor."""
    data = convert_range(img, RangeTag.UNIT).data
    return torch.from_numpy(data.transpose(2, 0, 1).copy())[None]


def _pair(x: ImageTensor, y: ImageTensor):
    if x.shape != y.shape:
        raise DimensionError(f"shape mismatch {x.shape} vs {y.shape}")
    return to_batch(x), to_batch(y)


def ssim(x: ImageTensor, y: ImageTensor, cfg: SsimConfig = SsimConfig()) -> float:
    return float(ssim_torch(*_pair(x, y), cfg)[0])


def ms_ssim(x: ImageTensor, y: ImageTensor, cfg: SsimConfig = SsimConfig(), scales: int | None = 5) -> float:
    return float(ms_ssim_torch(*_pair(x, y), cfg, scales)[0])


def structure_similarity(x: ImageTensor, y: ImageTensor, cfg: SsimConfig = SsimConfig()) -> float:
    return float(structure_torch(*_pair(x, y), cfg)[0])


# ---------------------------------------------------------------------------
# Frechet distance

@dataclass(frozen=True, eq=False)
class FeatureEmbedding:
    extractor_id: str
    features: np.ndarray

    def __post_init__(self):
        feats = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        if not np.all(np.isfinite(feats)):
            raise ValueError("feature matrix contains non-finite values")
        object.__setattr__(self, "features", feats)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return self.features.shape[0]

    def split(self, index) -> "FeatureEmbedding":
        return FeatureEmbedding(self.extractor_id, self.features[index])


def frechet_distance(a: FeatureEmbedding, b: FeatureEmbedding, eps: float = 1e-6) -> float:
    """Frechet distance between Gaussian fits of two feature sets."""
    if a.dim != b.dim:
        raise DimensionError(f"feature dims differ: {a.dim} vs {b.dim}")
    if len(a) < 2 or len(b) < 2:
        raise ValueError("need at least two samples per set")
    mu_a, mu_b = a.features.mean(0), b.features.mean(0)
    reg = eps * np.eye(a.dim)
    cov_a = np.atleast_2d(np.cov(a.features, rowvar=False)) + reg
    cov_b = np.atleast_2d(np.cov(b.features, rowvar=False)) + reg
    root = scipy.linalg.sqrtm(cov_a @ cov_b)
    if np.iscomplexobj(root):
        if np.max(np.abs(root.imag)) >= 1e-3:
            raise ArithmeticError(
                f"matrix square root did not converge (imag residue {np.max(np.abs(root.imag)):.3g})"
            )
        root = root.real
    diff = mu_a - mu_b
    return float(diff @ diff + np.trace(cov_a + cov_b - 2 * root))


def extract_features(images: Sequence[ImageTensor], extractor_id: str = "random-conv-64") -> FeatureEmbedding:
    from .features import get_extractor

    if len(images) == 0:
        raise ValueError("no images to embed")
    return FeatureEmbedding(extractor_id, get_extractor(extractor_id).embed(images))


# ---------------------------------------------------------------------------
# segmentation

@dataclass(frozen=True, eq=False)
class SegMask:
    labels: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2:
            raise DimensionError(f"mask must be 2-D, got shape {labels.shape}")
        if not np.issubdtype(labels.dtype, np.integer) and not np.issubdtype(labels.dtype, np.bool_):
            if not np.all(labels == np.round(labels)):
                raise ValueError("mask labels must be integers")
        labels = labels.astype(np.int64)
        if labels.min(initial=0) < 0:
            raise ValueError("mask labels must be non-negative")
        object.__setattr__(self, "labels", labels)

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def binary(self) -> np.ndarray:
        return self.labels > 0

    @classmethod
    def from_binary(cls, mask: np.ndarray) -> "SegMask":
        """Label 4-connected components of a binary mask."""
        labels, _ = ndimage.label(np.asarray(mask) > 0)
        return cls(labels)


def _same_shape(a: SegMask, b: SegMask):
    if a.labels.shape != b.labels.shape:
        raise DimensionError(f"mask shapes differ: {a.labels.shape} vs {b.labels.shape}")


def dice_pixel(a: SegMask, b: SegMask) -> float:
    _same_shape(a, b)
    ma, mb = a.binary(), b.binary()
    total = int(ma.sum() + mb.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(ma, mb).sum()) / total


def dice_object(a: SegMask, b: SegMask, iou_threshold: float = 0.5) -> float:
    """Object-wise Dice: greedy one-to-one matching by descending IoU, accepted if IoU > threshold."""
    _same_shape(a, b)
    la, lb = a.labels.ravel().astype(np.int64), b.labels.ravel().astype(np.int64)
    area_a, area_b = np.bincount(la), np.bincount(lb)
    n_a, n_b = int(np.count_nonzero(area_a[1:])), int(np.count_nonzero(area_b[1:]))
    if n_a + n_b == 0:
        return 1.0
    if n_a == 0 or n_b == 0:
        return 0.0
    # pairwise intersections from the joint label histogram
    width = area_b.size
    both = (la > 0) & (lb > 0)
    inter = np.bincount(la[both] * width + lb[both], minlength=area_a.size * width).reshape(area_a.size, width)
    ia, ib = np.nonzero(inter)
    n = inter[ia, ib]
    iou = n / (area_a[ia] + area_b[ib] - n)
    keep = iou > iou_threshold
    ia, ib, iou = ia[keep], ib[keep], iou[keep]
    used_a, used_b = set(), set()
    for k in np.lexsort((ib, ia, -iou)):
        if ia[k] in used_a or ib[k] in used_b:
            continue
        used_a.add(ia[k])
        used_b.add(ib[k])
    return 2.0 * len(used_a) / (n_a + n_b)


# ---------------------------------------------------------------------------
# classification

def classification_scores(preds: Sequence, labels: Sequence, classes: Sequence) -> tuple[float, float]:
    """Accuracy and macro F1.

    Macro F1 averages over the listed classes that occur in the labels or the
    predictions; a listed class absent from both is excluded.
    """
    if len(preds) != len(labels):
        raise ValueError(f"length mismatch: {len(preds)} predictions vs {len(labels)} labels")
    if len(preds) == 0:
        raise ValueError("no predictions to score")
    preds, labels = list(preds), list(labels)
    accuracy = sum(p == t for p, t in zip(preds, labels)) / len(labels)
    f1s = []
    for c in classes:
        tp = sum(p == c and t == c for p, t in zip(preds, labels))
        n_pred = sum(p == c for p in preds)
        n_true = sum(t == c for t in labels)
        if n_pred == 0 and n_true == 0:
            continue
        f1s.append(2 * tp / (n_pred + n_true))
    macro_f1 = sum(f1s) / len(f1s) if f1s else 0.0
    return accuracy, macro_f1


# ---------------------------------------------------------------------------
# reports

@dataclass
class MetricReport:
    split: str
    ssim_mean: float
    ssim_std: float
    ms_ssim_mean: float | None = None
    fid: float | None = None
    fid_original: float | None = None
    dice_glom_pix: float | None = None
    dice_podo_pix: float | None = None
    dice_podo_obj: float | None = None
    accuracy: float | None = None
    macro_f1: float | None = None
    accuracy_original: float | None = None
    macro_f1_original: float | None = None
    report_id: str = ""
    per_image: list[dict] = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.split not in ("val", "test"):
            raise ValueError(f"split must be 'val' or 'test', got {self.split!r}")
        for name in ("ssim_mean",):
            v = getattr(self, name)
            if not -1.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} out of range")
        for name in ("dice_glom_pix", "dice_podo_pix", "dice_podo_obj", "accuracy", "macro_f1"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} out of range")
        if self.fid is not None and self.fid < -1e-3:
            raise ValueError(f"negative FID {self.fid}")

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("per_image")
        return d

    def write(self, directory: str | Path, stem: str | None = None) -> tuple[Path, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        stem = stem or f"metrics_{self.split}"
        json_path = directory / f"{stem}.json"
        json_path.write_text(json.dumps(self.summary(), indent=2, sort_keys=True))
        csv_path = directory / f"{stem}.csv"
        rows = self.per_image or []
        keys = sorted({k for r in rows for k in r}) or ["image"]
        with csv_path.open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=keys)
            writer.writeheader()
            writer.writerows(rows)
        return json_path, csv_path

    @classmethod
    def read(cls, path: str | Path) -> "MetricReport":
        data = json.loads(Path(path).read_text())
        return cls(**data)


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        return math.nan, math.nan
    return float(arr.mean()), float(arr.std())
