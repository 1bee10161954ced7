"""Turn (original, transformed, target) image sets into a MetricReport."""

from __future__ import annotations

import hashlib
from typing import Sequence

from .errors import DataError
from .imaging import ImageTensor
from .metrics import (
    MetricReport,
    SsimConfig,
    extract_features,
    frechet_distance,
    max_scales,
    mean_std,
    ms_ssim,
    ssim,
)


def evaluate_transfer(
    originals: Sequence[ImageTensor],
    transformed: Sequence[ImageTensor],
    targets: Sequence[ImageTensor],
    split: str,
    names: Sequence[str] | None = None,
    labels: Sequence[int] | None = None,
    downstream=None,
    extractor_id: str = "random-conv-64",
    ssim_cfg: SsimConfig = SsimConfig(),
    report_id: str | None = None,
) -> MetricReport:
    """Content preservation (SSIM per pair), domain imitation (FID against targets)
    and, with a downstream model and labels, accuracy/macro F1 before and after."""
    if len(originals) != len(transformed):
        raise DataError(f"{len(originals)} originals but {len(transformed)} transformed images")
    if not originals or not targets:
        raise DataError("empty image set")
    names = list(names) if names is not None else [f"{i:04d}" for i in range(len(originals))]
    side = min(originals[0].height, originals[0].width)
    scales = max_scales(side, ssim_cfg.window)
    rows = []
    for name, o, t in zip(names, originals, transformed):
        rows.append({"image": name, "ssim": ssim(o, t, ssim_cfg), "ms_ssim": ms_ssim(o, t, ssim_cfg, scales)})
    s_mean, s_std = mean_std([r["ssim"] for r in rows])
    ms_mean, _ = mean_std([r["ms_ssim"] for r in rows])

    target_feats = extract_features(targets, extractor_id)
    fid = frechet_distance(extract_features(transformed, extractor_id), target_feats)
    fid_orig = frechet_distance(extract_features(originals, extractor_id), target_feats)

    scores = {}
    if downstream is not None and labels is not None:
        from .downstream import evaluate_downstream

        preds_t = downstream.predict(transformed)
        preds_o = downstream.predict(originals)
        for r, pt, po, y in zip(rows, preds_t, preds_o, labels):
            r.update(label=y, pred=pt, pred_original=po)
        scores["accuracy"], scores["macro_f1"] = evaluate_downstream(downstream, transformed, labels)
        scores["accuracy_original"], scores["macro_f1_original"] = evaluate_downstream(downstream, originals, labels)

    return MetricReport(
        split=split,
        ssim_mean=s_mean,
        ssim_std=s_std,
        ms_ssim_mean=ms_mean,
        fid=fid,
        fid_original=fid_orig,
        report_id=report_id or hashlib.sha1(f"{split}|{'|'.join(names)}".encode()).hexdigest()[:12],
        per_image=rows,
        **scores,
    )
