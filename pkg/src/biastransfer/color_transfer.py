"""Histogram matching in the decorrelated l-alpha-beta colour space.

The baseline maps every input image onto the colour distribution of one
randomly drawn reference image from the target domain's training split.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .errors import ChannelError, DataError
from .imaging import ImageTensor, RangeTag

RGB_TO_LMS = np.array([
    [0.3811, 0.5783, 0.0402],
    [0.1967, 0.7244, 0.0782],
    [0.0241, 0.1288, 0.8444],
])
LMS_TO_RGB = np.linalg.inv(RGB_TO_LMS)

# orthogonal decorrelation of log-LMS into (l, alpha, beta)
LOG_LMS_TO_LAB = np.diag([1 / np.sqrt(3), 1 / np.sqrt(6), 1 / np.sqrt(2)]) @ np.array([
    [1.0, 1.0, 1.0],
    [1.0, 1.0, -2.0],
    [1.0, -1.0, 0.0],
])
LAB_TO_LOG_LMS = np.linalg.inv(LOG_LMS_TO_LAB)

LOG_FLOOR = 1e-6


@dataclass(frozen=True)
class ColorTransferSpec:
    reference_image_id: str
    rng_seed: int


def _require_rgb(img: ImageTensor):
    if img.channels != 3:
        raise ChannelError(f"colour transfer needs 3 channels, got {img.channels}")
    if img.range_tag is not RangeTag.UNIT:
        raise ValueError("colour transfer expects unit-range images")


def rgb_to_decorrelated(img: ImageTensor) -> np.ndarray:
    """Return the H x W x 3 l-alpha-beta array of a unit-range RGB image."""
    _require_rgb(img)
    lms = img.data @ RGB_TO_LMS.T
    log_lms = np.log10(np.maximum(lms, LOG_FLOOR))
    return log_lms @ LOG_LMS_TO_LAB.T


def decorrelated_to_rgb(lab: np.ndarray) -> np.ndarray:
    """Inverse of :func:`rgb_to_decorrelated`; unclipped RGB array."""
    lms = 10.0 ** (lab @ LAB_TO_LOG_LMS.T)
    return lms @ LMS_TO_RGB.T


def histogram_match_channel(src: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Rank-based quantile mapping of ``src`` onto the empirical distribution of ``ref``.

    Source values take their mid-rank plotting position ``(rank - 0.5) / n`` and are
    mapped through the reference quantile function (Hazen interpolation), so tied
    source values share an output and matching a channel to itself is exact.
    """
    src = np.asarray(src, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if not (np.all(np.isfinite(src)) and np.all(np.isfinite(ref))):
        raise ValueError("histogram matching needs finite inputs")
    ranks = stats.rankdata(src.ravel(), method="average")
    positions = (ranks - 0.5) / ranks.size
    matched = np.quantile(ref.ravel(), positions, method="hazen")
    return matched.reshape(src.shape)


def color_transfer(src: ImageTensor, ref: ImageTensor) -> ImageTensor:
    _require_rgb(src)
    _require_rgb(ref)
    src_lab = rgb_to_decorrelated(src)
    ref_lab = rgb_to_decorrelated(ref)
    out = np.stack(
        [histogram_match_channel(src_lab[..., c], ref_lab[..., c]) for c in range(3)],
        axis=-1,
    )
    return ImageTensor.clipped(decorrelated_to_rgb(out), RangeTag.UNIT)


def pick_reference(image_ids: list[str], seed: int) -> ColorTransferSpec:
    """Draw the single reference image uniformly from the target training ids."""
    if not image_ids:
        raise DataError("target domain has no images to draw a reference from")
    rng = np.random.default_rng(seed)
    ordered = sorted(image_ids)
    return ColorTransferSpec(ordered[int(rng.integers(len(ordered)))], seed)
