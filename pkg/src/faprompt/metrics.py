"""Image-level AUROC/AP and pixel-level AUROC/PRO."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

from .errors import UndefinedMetricError, ValidationError

EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


def _flat(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValidationError(f"{s.size} scores for {y.size} labels")
    if not np.isin(y, (0, 1)).all():
        raise ValidationError("labels must be binary")
    return s, y.astype(bool)


def auroc(scores, labels) -> float:
    """Mann-Whitney U / (P*N); tied pairs count one half."""
    s, y = _flat(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both positive and negative samples")
    ranks = rankdata(s)  # average ranks resolve ties
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def average_precision(scores, labels) -> float:
    """Sum of precision * recall increment over distinct descending thresholds."""
    s, y = _flat(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("average precision needs at least one positive")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last_of_group = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp = np.cumsum(y)[last_of_group]
    n_sel = last_of_group + 1
    precision = tp / n_sel
    recall = tp / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def pro(score_maps: Sequence[np.ndarray], masks: Sequence[np.ndarray], fpr_limit: float = 0.3) -> float:
    """Normalised area under the per-region-overlap vs FPR curve, up to ``fpr_limit``.

    Thresholds are every distinct score (``score >= t`` is positive).  Regions
    are 8-connected components of each mask; overlap is averaged over all
    regions of all images, FPR is over every mask-zero pixel.  Between sweep
    points the curve is trapezoidal; past the last point at or below the
    limit it is held flat, since no threshold reaches an intermediate FPR.
    """
    if not 0 < fpr_limit <= 1:
        raise ValidationError("fpr_limit must lie in (0, 1]")
    if len(score_maps) != len(masks):
        raise ValidationError("need one mask per score map")
    all_scores, region_w, negatives = [], [], []
    n_regions = 0
    for smap, mask in zip(score_maps, masks):
        smap = np.asarray(smap, dtype=np.float64)
        mask = np.asarray(mask) > 0
        if smap.shape != mask.shape:
            raise ValidationError(f"score map {smap.shape} vs mask {mask.shape}")
        lab, n = ndimage.label(mask, structure=EIGHT_CONNECTED)
        w = np.zeros(mask.shape)
        if n:
            sizes = np.bincount(lab.ravel())
            w[mask] = 1.0 / sizes[lab[mask]]
        n_regions += n
        all_scores.append(smap.ravel())
        region_w.append(w.ravel())
        negatives.append(~mask.ravel())
    if n_regions == 0:
        raise UndefinedMetricError("PRO needs at least one anomalous region")
    s = np.concatenate(all_scores)
    w = np.concatenate(region_w) / n_regions
    neg = np.concatenate(negatives)
    n_neg = int(neg.sum())
    if n_neg == 0:
        raise UndefinedMetricError("PRO needs normal pixels to define a false-positive rate")

    order = np.argsort(-s, kind="stable")
    s, w, neg = s[order], w[order], neg[order]
    last_of_group = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    fpr = np.r_[0.0, np.cumsum(neg)[last_of_group] / n_neg]
    overlap = np.r_[0.0, np.cumsum(w)[last_of_group]]

    keep = fpr <= fpr_limit
    x, y = fpr[keep], overlap[keep]
    area = float(np.sum(np.diff(x) * (y[1:] + y[:-1]) / 2.0))
    area += float(y[-1] * (fpr_limit - x[-1]))
    return min(max(area / fpr_limit, 0.0), 1.0)


@dataclass
class EvalReport:
    image_auroc: float
    image_ap: float
    pixel_auroc: float
    pixel_pro: float
    n_images: int
    n_anomalous: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def evaluate_predictions(image_scores, labels, anomaly_maps, masks, fpr_limit: float = 0.3) -> EvalReport:
    labels = np.asarray(labels)
    maps = np.stack([np.asarray(m, dtype=np.float64) for m in anomaly_maps])
    gts = np.stack([np.asarray(m) > 0 for m in masks])
    return EvalReport(
        image_auroc=auroc(image_scores, labels),
        image_ap=average_precision(image_scores, labels),
        pixel_auroc=auroc(maps, gts.astype(int)),
        pixel_pro=pro(list(maps), list(gts), fpr_limit),
        n_images=int(labels.size),
        n_anomalous=int(labels.sum()),
    )
