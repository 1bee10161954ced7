"""Image container, range conversion, Laplacian pyramids and image I/O.

Images are H x W x C float64 arrays. Pyramids use the 5-tap binomial kernel
[1, 4, 6, 4, 1] / 16 with whole-sample mirror padding (``d c b | a b c d | c b a``),
which keeps the zero-inserted samples on the right parity when upsampling.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ChannelError, DimensionError

BINOMIAL_5 = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0
RANGE_SLACK = 1e-6
MIN_SIDE = 8


class RangeTag(str, enum.Enum):
    UNIT = "unit"
    SYMMETRIC = "symmetric"

    @property
    def bounds(self) -> tuple[float, float]:
        return (0.0, 1.0) if self is RangeTag.UNIT else (-1.0, 1.0)


@dataclass(frozen=True, eq=False)
class ImageTensor:
    """H x W x C image with an explicit value range."""

    data: np.ndarray
    range_tag: RangeTag = RangeTag.UNIT

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3:
            raise DimensionError(f"expected H x W x C array, got shape {data.shape}")
        h, w, c = data.shape
        if h < MIN_SIDE or w < MIN_SIDE:
            raise DimensionError(f"image sides must be >= {MIN_SIDE}, got {h}x{w}")
        if c not in (1, 3):
            raise ChannelError(f"channels must be 1 or 3, got {c}")
        if not np.all(np.isfinite(data)):
            raise ValueError("image contains non-finite values")
        tag = RangeTag(self.range_tag)
        lo, hi = tag.bounds
        if data.min() < lo - RANGE_SLACK or data.max() > hi + RANGE_SLACK:
            raise ValueError(
                f"values [{data.min():.4g}, {data.max():.4g}] outside {tag.value} range"
            )
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "range_tag", tag)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @classmethod
    def clipped(cls, data: np.ndarray, range_tag: RangeTag | str = RangeTag.UNIT) -> "ImageTensor":
        lo, hi = RangeTag(range_tag).bounds
        return cls(np.clip(data, lo, hi), RangeTag(range_tag))


def convert_range(img: ImageTensor, target: RangeTag | str) -> ImageTensor:
    target = RangeTag(target)
    if target is img.range_tag:
        return img
    if target is RangeTag.SYMMETRIC:
        out = img.data * 2.0 - 1.0
    else:
        out = (img.data + 1.0) / 2.0
    lo, hi = target.bounds
    # affine map can overshoot by one ulp at the endpoints
    return ImageTensor(np.clip(out, lo, hi), target)


# ---------------------------------------------------------------------------
# pyramid primitives on raw arrays

def _check_even(arr: np.ndarray):
    h, w = arr.shape[:2]
    if h % 2 or w % 2:
        raise DimensionError(f"cannot halve image with odd side ({h}x{w})")


def _smooth(arr: np.ndarray, gain: float = 1.0) -> np.ndarray:
    kernel = BINOMIAL_5 * gain
    out = ndimage.convolve1d(arr, kernel, axis=0, mode="mirror")
    return ndimage.convolve1d(out, kernel, axis=1, mode="mirror")


def halve_array(arr: np.ndarray) -> np.ndarray:
    _check_even(arr)
    return _smooth(arr)[::2, ::2]


def double_array(arr: np.ndarray) -> np.ndarray:
    """Zero-insertion followed by the binomial low-pass scaled by 4 (2 per axis)."""
    h, w = arr.shape[:2]
    up = np.zeros((2 * h, 2 * w) + arr.shape[2:], dtype=np.float64)
    up[::2, ::2] = arr
    return _smooth(up, gain=2.0)


def gaussian_halve(img: ImageTensor) -> ImageTensor:
    # convex combination of in-range values stays in range
    return ImageTensor(halve_array(img.data), img.range_tag)


# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class LaplacianPyramid:
    """Low-pass base plus band-pass layers, finest first.

    Bands are signed residuals, so they are kept as raw float arrays rather than
    range-tagged images.
    """

    base: ImageTensor
    bands: list[np.ndarray] = field(default_factory=list)

    @property
    def levels(self) -> int:
        return len(self.bands)

    @property
    def full_side(self) -> int:
        return self.base.height * 2 ** self.levels


def pyramid_levels(side: int, base_side: int) -> int:
    if base_side < MIN_SIDE or side < base_side or side % base_side:
        raise DimensionError(f"side {side} is not base_side {base_side} times a power of two")
    ratio = side // base_side
    if ratio & (ratio - 1):
        raise DimensionError(f"side ratio {side}/{base_side} is not a power of two")
    return ratio.bit_length() - 1


def build_pyramid(img: ImageTensor, base_side: int) -> LaplacianPyramid:
    if img.height != img.width:
        raise DimensionError(f"pyramid needs a square image, got {img.height}x{img.width}")
    levels = pyramid_levels(img.height, base_side)
    current = img.data
    bands = []
    for _ in range(levels):
        smaller = halve_array(current)
        bands.append(current - double_array(smaller))
        current = smaller
    return LaplacianPyramid(base=ImageTensor(current, img.range_tag), bands=bands)


def collapse_bands(bands: list[np.ndarray], base: np.ndarray) -> np.ndarray:
    """Unclipped reconstruction: upsample-and-add from coarsest to finest."""
    out = np.asarray(base, dtype=np.float64)
    for band in reversed(bands):
        out = double_array(out)
        if out.shape != band.shape:
            raise DimensionError(f"band shape {band.shape} does not match {out.shape}")
        out = out + band
    return out


def collapse_pyramid(pyr: LaplacianPyramid, replacement_base: ImageTensor | None = None) -> ImageTensor:
    base = pyr.base if replacement_base is None else replacement_base
    if base.shape != pyr.base.shape:
        raise DimensionError(f"replacement base {base.shape} != pyramid base {pyr.base.shape}")
    if base.range_tag is not pyr.base.range_tag:
        raise DimensionError("replacement base has a different range tag")
    return ImageTensor.clipped(collapse_bands(pyr.bands, base.data), base.range_tag)


# ---------------------------------------------------------------------------
# I/O

def read_image(path: str | Path) -> ImageTensor:
    """Read 8-bit PNG or 8/16-bit TIFF into a unit-range image."""
    path = Path(path)
    if path.suffix.lower() in (".tif", ".tiff"):
        import tifffile

        arr = tifffile.imread(path)
    else:
        from PIL import Image

        with Image.open(path) as im:
            if im.mode not in ("L", "RGB", "I;16", "I"):
                im = im.convert("RGB")
            arr = np.array(im)
    if arr.dtype == np.uint8:
        data = arr.astype(np.float64) / 255.0
    elif arr.dtype in (np.uint16, np.int32):
        data = arr.astype(np.float64) / 65535.0
    else:
        data = arr.astype(np.float64)
    if data.ndim == 3 and data.shape[2] == 4:
        data = data[:, :, :3]
    return ImageTensor(data)


def write_image(path: str | Path, img: ImageTensor, bits: int = 8) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    unit = convert_range(img, RangeTag.UNIT).data
    scale = 255.0 if bits == 8 else 65535.0
    arr = np.rint(unit * scale).astype(np.uint8 if bits == 8 else np.uint16)
    if arr.shape[2] == 1:
        arr = arr[:, :, 0]
    if path.suffix.lower() in (".tif", ".tiff"):
        import tifffile

        tifffile.imwrite(path, arr)
    else:
        if bits != 8:
            raise ValueError("PNG output is 8-bit; use TIFF for 16-bit")
        from PIL import Image

        Image.fromarray(arr).save(path)


def read_mask(path: str | Path) -> np.ndarray:
    """Integer label image (PNG 8/16-bit or TIFF)."""
    path = Path(path)
    if path.suffix.lower() in (".tif", ".tiff"):
        import tifffile

        return tifffile.imread(path).astype(np.int64)
    from PIL import Image

    with Image.open(path) as im:
        return np.array(im).astype(np.int64)


def write_mask(path: str | Path, labels: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if labels.max(initial=0) > 65535:
        raise ValueError("too many labels for a 16-bit mask")
    if path.suffix.lower() in (".tif", ".tiff"):
        import tifffile

        tifffile.imwrite(path, labels.astype(np.uint16))
        return
    from PIL import Image

    Image.fromarray(labels.astype(np.uint16 if labels.max(initial=0) > 255 else np.uint8)).save(path)
