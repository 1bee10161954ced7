"""Synthetic two-domain benchmark of immunofluorescence-style tissue phantoms.

Each phantom has smooth closed "glomerulus" blobs with small "podocyte" discs
inside them on a textured background. The class label is a function of the
total blob area fraction, so a downstream classifier has to judge how much of
the image is blob-coloured, which is exactly what an acquisition bias disturbs.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DataError
from .imaging import ImageTensor, read_image, read_mask, write_image, write_mask

CLASS_NAMES = ("benign", "3+3", "4+4", "5+5")
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class PhantomSpec:
    size: int = 128
    n_blobs: tuple[int, int] = (1, 3)
    n_dots_per_blob: tuple[int, int] = (3, 8)
    texture_scale: float = 3.0
    # area fraction per class; labels come from thresholds halfway between them
    class_area_fractions: tuple[float, ...] = (0.05, 0.11, 0.19, 0.30)
    class_weights: tuple[float, ...] = (0.25, 0.25, 0.25, 0.25)
    area_jitter: float = 0.12
    seed: int = 0

    def __post_init__(self):
        if len(self.class_area_fractions) != len(CLASS_NAMES) or len(self.class_weights) != len(CLASS_NAMES):
            raise ValueError("need one area fraction and one weight per class")
        if list(self.class_area_fractions) != sorted(self.class_area_fractions):
            raise ValueError("class area fractions must increase")
        if self.n_blobs[0] < 1 or self.n_blobs[0] > self.n_blobs[1]:
            raise ValueError(f"bad blob count range {self.n_blobs}")

    @property
    def thresholds(self) -> np.ndarray:
        f = np.asarray(self.class_area_fractions)
        return (f[1:] + f[:-1]) / 2

    def classify(self, blob_mask: np.ndarray) -> int:
        fraction = float((blob_mask > 0).mean())
        return int(np.searchsorted(self.thresholds, fraction, side="right"))


@dataclass(frozen=True)
class DomainBias:
    gains: tuple[float, float, float] = (1.0, 1.0, 1.0)
    offsets: tuple[float, float, float] = (0.0, 0.0, 0.0)
    gamma: float = 1.0
    vignette_strength: float = 0.0
    noise_sigma: float = 0.0
    hue_rotation: float = 0.0

    @property
    def channel_affine(self):
        return tuple(zip(self.gains, self.offsets))


# reference lab: mild sensor noise only
TAR_PRESET = DomainBias(noise_sigma=0.01)
# new lab: different laser powers, detector gamma, spectral shift and uneven illumination
NEW_PRESET = DomainBias(
    gains=(0.55, 1.25, 1.35),
    offsets=(0.02, 0.10, 0.10),
    gamma=1.5,
    vignette_strength=0.35,
    noise_sigma=0.005,
    hue_rotation=30.0,
)


# ---------------------------------------------------------------------------
# phantoms

def _smooth_noise(rng, size, scale):
    field_ = ndimage.gaussian_filter(rng.standard_normal((size, size)), scale, mode="wrap")
    return field_ / (field_.std() + 1e-12)


def _blob_mask(size, cy, cx, r0, rng):
    """Star-shaped region with a low-order Fourier boundary; radius stays within [0.8, 1.2] r0."""
    yy, xx = np.mgrid[0:size, 0:size]
    theta = np.arctan2(yy - cy, xx - cx)
    dist = np.hypot(yy - cy, xx - cx)
    radius = np.full_like(theta, r0)
    for k in (2, 3, 4):
        radius += r0 * rng.uniform(0.0, 0.06) * np.cos(k * theta + rng.uniform(0, 2 * np.pi))
    return dist <= radius


def _disc(size, cy, cx, r):
    yy, xx = np.mgrid[0:size, 0:size]
    return np.hypot(yy - cy, xx - cx) <= r


def _place_blobs(spec: PhantomSpec, rng, total_area: float):
    size = spec.size
    n = int(rng.integers(spec.n_blobs[0], spec.n_blobs[1] + 1))
    while n >= 1:
        r0 = np.sqrt(total_area / n / np.pi)
        centres = []
        for _ in range(200):
            if len(centres) == n:
                break
            margin = 1.25 * r0 + 1
            if margin >= size / 2:
                break
            c = rng.uniform(margin, size - margin, size=2)
            if all(np.hypot(*(c - o)) > 2.5 * r0 + 2 for o in centres):
                centres.append(c)
        if len(centres) == n:
            return r0, centres
        n -= 1
    raise DataError(f"cannot place blobs of area {total_area:.0f} in a {size}px phantom")


def generate_phantom(spec: PhantomSpec, image_id: int):
    """Return (image, blob labels, dot labels, class label); deterministic in (spec.seed, image_id)."""
    rng = np.random.default_rng([spec.seed, image_id])
    size = spec.size
    weights = np.asarray(spec.class_weights, dtype=np.float64)
    for _ in range(50):
        target = int(rng.choice(len(CLASS_NAMES), p=weights / weights.sum()))
        fraction = spec.class_area_fractions[target] * (1 + rng.uniform(-spec.area_jitter, spec.area_jitter))
        r0, centres = _place_blobs(spec, rng, fraction * size * size)
        blobs = np.zeros((size, size), dtype=np.int64)
        for i, (cy, cx) in enumerate(centres, start=1):
            blobs[_blob_mask(size, cy, cx, r0, rng)] = i
        if spec.classify(blobs) == target:
            break
    else:
        raise DataError(f"phantom {image_id}: could not realise class geometry")
    label = spec.classify(blobs)

    # podocyte-like discs strictly inside their blob
    dot_r = max(1.5, size / 48)
    dots = np.zeros_like(blobs)
    n_dot = 0
    for i in range(1, blobs.max() + 1):
        inner = ndimage.binary_erosion(blobs == i, iterations=int(np.ceil(dot_r)) + 1)
        candidates = np.argwhere(inner)
        want = int(rng.integers(spec.n_dots_per_blob[0], spec.n_dots_per_blob[1] + 1))
        placed = []
        for _ in range(want * 20):
            if len(placed) == want or len(candidates) == 0:
                break
            cy, cx = candidates[rng.integers(len(candidates))]
            if all(np.hypot(cy - py, cx - px) > 2 * dot_r + 1.5 for py, px in placed):
                placed.append((cy, cx))
        for cy, cx in placed:
            n_dot += 1
            dots[_disc(size, cy, cx, dot_r) & (blobs == i)] = n_dot

    scale = spec.texture_scale * size / 128
    tex_bg = _smooth_noise(rng, size, scale)
    tex_blob = _smooth_noise(rng, size, scale / 2)
    img = np.empty((size, size, 3))
    img[..., 0] = 0.08 + 0.025 * tex_bg
    img[..., 1] = 0.06 + 0.02 * tex_bg
    img[..., 2] = 0.12 + 0.03 * tex_bg

    # scattered nuclei (blue) everywhere
    nuclei = np.zeros((size, size))
    for _ in range(int(size * size / 350)):
        cy, cx = rng.uniform(0, size, size=2)
        nuclei = np.maximum(nuclei, _disc(size, cy, cx, rng.uniform(1.0, 1.8) * size / 128) * rng.uniform(0.5, 0.9))
    nuclei = ndimage.gaussian_filter(nuclei, 0.6)

    soft_blob = ndimage.gaussian_filter((blobs > 0).astype(float), 0.8)
    img[..., 0] += soft_blob * (0.55 + 0.08 * tex_blob)
    img[..., 1] += soft_blob * 0.08
    img[..., 2] += soft_blob * 0.05
    soft_dots = ndimage.gaussian_filter((dots > 0).astype(float), 0.6)
    img[..., 1] += soft_dots * 0.6
    img[..., 0] += soft_dots * 0.1
    img[..., 2] += nuclei * 0.45
    img[..., 1] += nuclei * 0.04
    return ImageTensor.clipped(img), blobs, dots, label


# ---------------------------------------------------------------------------
# bias

def hue_rotation_matrix(degrees: float) -> np.ndarray:
    """Rotation of RGB space about the grey axis."""
    t = np.deg2rad(degrees)
    k = np.ones(3) / np.sqrt(3)
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(t) * kx + (1 - np.cos(t)) * (kx @ kx)


def apply_domain_bias(img: ImageTensor, bias: DomainBias, rng: np.random.Generator | None = None, clip: bool = True):
    """affine per channel -> gamma -> hue rotation -> vignette -> noise -> clip.

    With ``clip=False`` the raw array is returned (used to check the affine stage).
    """
    if img.channels != 3:
        raise ValueError("domain bias operates on RGB images")
    x = img.data * np.asarray(bias.gains) + np.asarray(bias.offsets)
    if bias.gamma != 1.0:
        x = np.clip(x, 0.0, None) ** bias.gamma
    if bias.hue_rotation:
        x = x @ hue_rotation_matrix(bias.hue_rotation).T
    if bias.vignette_strength:
        h, w = x.shape[:2]
        yy, xx = np.mgrid[0:h, 0:w]
        r2 = ((yy - (h - 1) / 2) ** 2 + (xx - (w - 1) / 2) ** 2) / (((h - 1) / 2) ** 2 + ((w - 1) / 2) ** 2)
        x = x * (1 - bias.vignette_strength * r2)[..., None]
    if bias.noise_sigma:
        if rng is None:
            raise ValueError("noise needs an rng")
        x = x + rng.normal(0.0, bias.noise_sigma, size=x.shape)
    if not clip:
        return x
    return ImageTensor.clipped(x)


# ---------------------------------------------------------------------------
# benchmark

@dataclass
class DatasetSplit:
    train: list[str]
    val: list[str]
    test: list[str]
    groups: dict[str, int]

    def __getitem__(self, split: str) -> list[str]:
        if split not in SPLITS:
            raise KeyError(split)
        return getattr(self, split)

    def split_of(self, image_id: str) -> str:
        for s in SPLITS:
            if image_id in self[s]:
                return s
        raise KeyError(image_id)


@dataclass
class Sample:
    image_id: str
    image: ImageTensor
    blobs: np.ndarray
    dots: np.ndarray
    label: int
    group: int


@dataclass
class DomainDataset:
    name: str
    samples: dict[str, Sample]
    split: DatasetSplit
    bias: DomainBias | None = None

    def subset(self, split: str) -> list[Sample]:
        return [self.samples[i] for i in self.split[split]]

    def images(self, split: str) -> list[ImageTensor]:
        return [s.image for s in self.subset(split)]

    def labels(self, split: str) -> list[int]:
        return [s.label for s in self.subset(split)]


def grouped_split(groups: dict[str, int], rng: np.random.Generator, ratios=(0.70, 0.15, 0.15)) -> DatasetSplit:
    """Assign whole groups to splits, approaching the target ratios greedily."""
    n = len(groups)
    members: dict[int, list[str]] = {}
    for image_id, g in groups.items():
        members.setdefault(g, []).append(image_id)
    order = sorted(members)
    rng.shuffle(order)
    want_val = round(ratios[1] * n)
    want_test = round(ratios[2] * n)
    out = {"train": [], "val": [], "test": []}
    for g in order:
        ids = sorted(members[g])
        if len(out["val"]) + len(ids) <= want_val:
            out["val"] += ids
        elif len(out["test"]) + len(ids) <= want_test:
            out["test"] += ids
        else:
            out["train"] += ids
    if not out["val"] or not out["test"]:
        raise DataError(f"{n} images in {len(members)} groups cannot fill validation and test splits")
    return DatasetSplit(sorted(out["train"]), sorted(out["val"]), sorted(out["test"]), dict(groups))


def make_domain(
    name: str,
    n_images: int,
    spec: PhantomSpec,
    bias: DomainBias,
    seed: int,
    max_group: int = 4,
) -> DomainDataset:
    rng = np.random.default_rng([seed, 7])
    groups: dict[str, int] = {}
    g = 0
    i = 0
    while i < n_images:
        for _ in range(int(rng.integers(1, max_group + 1))):
            if i == n_images:
                break
            groups[f"{name}_{i:04d}"] = g
            i += 1
        g += 1
    split = grouped_split(groups, rng)
    samples = {}
    for k, image_id in enumerate(sorted(groups)):
        clean, blobs, dots, label = generate_phantom(spec, k)
        noise_rng = np.random.default_rng([seed, 11, k])
        biased = apply_domain_bias(clean, bias, noise_rng)
        samples[image_id] = Sample(image_id, biased, blobs, dots, label, groups[image_id])
    return DomainDataset(name, samples, split, bias)


@dataclass(frozen=True)
class BenchmarkSpec:
    n_images: int = 100
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    tar_bias: DomainBias = TAR_PRESET
    new_bias: DomainBias = NEW_PRESET
    new_class_weights: tuple[float, ...] | None = None
    seed: int = 0
    max_group: int = 4


def make_benchmark(
    n_images: int = 100,
    tar_bias: DomainBias = TAR_PRESET,
    new_bias: DomainBias = NEW_PRESET,
    spec: PhantomSpec = PhantomSpec(),
    seed: int = 0,
    new_class_weights: tuple[float, ...] | None = None,
    max_group: int = 4,
):
    """Return (TAR dataset, NEW dataset). Phantom content is drawn independently per domain."""
    if n_images < 40:
        raise DataError(f"need at least 40 images per domain to honour grouped splits, got {n_images}")
    tar_spec = PhantomSpec(**{**asdict(spec), "seed": spec.seed * 2 + 1})
    new_weights = tuple(new_class_weights) if new_class_weights else spec.class_weights
    new_spec = PhantomSpec(**{**asdict(spec), "seed": spec.seed * 2 + 2, "class_weights": new_weights})
    tar = make_domain("TAR", n_images, tar_spec, tar_bias, seed * 2 + 1, max_group)
    new = make_domain("NEW", n_images, new_spec, new_bias, seed * 2 + 2, max_group)
    return tar, new


def benchmark_from_spec(b: BenchmarkSpec):
    return make_benchmark(b.n_images, b.tar_bias, b.new_bias, b.phantom, b.seed, b.new_class_weights, b.max_group)


def benchmark_spec_dict(b: BenchmarkSpec) -> dict:
    return json.loads(json.dumps(asdict(b)))


def benchmark_spec_from_dict(d: dict) -> BenchmarkSpec:
    d = dict(d)
    phantom = PhantomSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.pop("phantom", {}).items()})
    tar = DomainBias(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.pop("tar_bias", asdict(TAR_PRESET)).items()})
    new = DomainBias(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.pop("new_bias", asdict(NEW_PRESET)).items()})
    ncw = d.pop("new_class_weights", None)
    return BenchmarkSpec(phantom=phantom, tar_bias=tar, new_bias=new,
                         new_class_weights=tuple(ncw) if ncw else None, **d)


# ---------------------------------------------------------------------------
# folder layout: <root>/<domain>/<split>/{images,masks}/..., <root>/<domain>/labels.csv

def write_domain(root: str | Path, ds: DomainDataset) -> Path:
    base = Path(root) / ds.name
    rows = []
    for split in SPLITS:
        for s in ds.subset(split):
            write_image(base / split / "images" / f"{s.image_id}.png", s.image)
            write_mask(base / split / "masks" / f"{s.image_id}_blobs.png", s.blobs)
            write_mask(base / split / "masks" / f"{s.image_id}_dots.png", s.dots)
            rows.append({"image_id": s.image_id, "split": split, "group": s.group,
                         "label": s.label, "class_name": CLASS_NAMES[s.label]})
    base.mkdir(parents=True, exist_ok=True)
    with (base / "labels.csv").open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["image_id", "split", "group", "label", "class_name"])
        writer.writeheader()
        writer.writerows(rows)
    return base


def read_labels(path: str | Path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def load_domain(root: str | Path, name: str) -> DomainDataset:
    base = Path(root) / name
    labels_path = base / "labels.csv"
    if not labels_path.exists():
        raise DataError(f"missing {labels_path}")
    samples = {}
    split_ids = {s: [] for s in SPLITS}
    groups = {}
    for row in read_labels(labels_path):
        image_id, split = row["image_id"], row["split"]
        folder = base / split
        image = read_image(folder / "images" / f"{image_id}.png")
        blobs_path = folder / "masks" / f"{image_id}_blobs.png"
        dots_path = folder / "masks" / f"{image_id}_dots.png"
        blobs = read_mask(blobs_path) if blobs_path.exists() else None
        dots = read_mask(dots_path) if dots_path.exists() else None
        label = int(row["label"]) if row.get("label", "") != "" else -1
        group = int(row.get("group") or 0)
        samples[image_id] = Sample(image_id, image, blobs, dots, label, group)
        split_ids[split].append(image_id)
        groups[image_id] = group
    split = DatasetSplit(sorted(split_ids["train"]), sorted(split_ids["val"]), sorted(split_ids["test"]), groups)
    return DomainDataset(name, samples, split)


def write_benchmark(root: str | Path, tar: DomainDataset, new: DomainDataset, spec: BenchmarkSpec) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    write_domain(root, tar)
    write_domain(root, new)
    census = {ds.name: {split: np.bincount(ds.labels(split), minlength=len(CLASS_NAMES)).tolist()
                        for split in SPLITS} for ds in (tar, new)}
    manifest = {"command": "synth", "benchmark": benchmark_spec_dict(spec), "class_names": list(CLASS_NAMES),
                "census": census,
                "splits": {ds.name: {s: ds.split[s] for s in SPLITS} for ds in (tar, new)}}
    path = root / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path
