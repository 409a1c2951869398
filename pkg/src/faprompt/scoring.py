"""Segmentation maps, image-level scores and inference-time map fusion."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from scipy.ndimage import correlate1d
from torch import nn

from .errors import ValidationError


@dataclass
class ScoreBundle:
    """Everything the model produces for one image (numpy, detached)."""

    patch_normal: np.ndarray  # S^n
    patch_abnormal: np.ndarray  # S^a
    patch_normal_prior: np.ndarray  # Ŝ^n
    patch_abnormal_prior: np.ndarray  # Ŝ^a
    map_normal: np.ndarray  # M^n
    map_abnormal: np.ndarray  # M^a
    map_normal_prior: np.ndarray  # M̂^n
    map_abnormal_prior: np.ndarray  # M̂^a
    image_probability: float  # s_a
    score: float  # s

    def anomaly_map(self, sigma: float | None = None) -> np.ndarray:
        fused = inference_map(self.map_abnormal, self.map_normal, self.map_abnormal_prior, self.map_normal_prior)
        return fused if sigma is None else gaussian_smooth(fused, sigma)


def to_segmentation_map(scores: torch.Tensor, grid_shape, target) -> torch.Tensor:
    """Reshape ``(l,)`` / ``(B, l)`` patch scores to the grid and resize bilinearly.

    Half-pixel centres (no corner alignment), so constants are preserved and
    values stay inside the input range.
    """
    g_h, g_w = grid_shape
    if scores.shape[-1] != g_h * g_w:
        raise ValidationError(f"{scores.shape[-1]} scores do not fill a {g_h}x{g_w} grid")
    lead = scores.shape[:-1]
    grid = scores.reshape(-1, 1, g_h, g_w)
    out = nn.functional.interpolate(grid, size=tuple(target), mode="bilinear", align_corners=False)
    return out.reshape(*lead, *target)


def image_probability(image_emb: torch.Tensor, f_n: torch.Tensor, f_a: torch.Tensor, tau: float = 100.0) -> torch.Tensor:
    """Probability that the image matches the abnormality prototype rather than the normal prompt."""
    for name, v in (("image", image_emb), ("normal", f_n), ("abnormal", f_a)):
        if bool((v.norm(dim=-1) == 0).any()):
            raise ValidationError(f"zero-norm {name} embedding")
    u = nn.functional.normalize(image_emb, dim=-1)
    cos_n = (u * nn.functional.normalize(f_n, dim=-1)).sum(-1)
    cos_a = (u * nn.functional.normalize(f_a, dim=-1)).sum(-1)
    return torch.sigmoid(tau * cos_a - tau * cos_n)


def final_score(s_a, patch_abnormal, patch_abnormal_prior):
    """``s = (s_a + (max S^a + max Ŝ^a) / 2) / 2``; trailing axis is the patch axis."""
    if patch_abnormal.shape[-1] == 0 or patch_abnormal_prior.shape[-1] == 0:
        raise ValidationError("empty patch score vector")
    if torch.is_tensor(patch_abnormal):
        peak = 0.5 * (patch_abnormal.amax(dim=-1) + patch_abnormal_prior.amax(dim=-1))
    else:
        peak = 0.5 * (np.max(patch_abnormal, axis=-1) + np.max(patch_abnormal_prior, axis=-1))
    return 0.5 * (s_a + peak)


def inference_map(map_abnormal, map_normal, map_abnormal_prior, map_normal_prior):
    shapes = {tuple(m.shape) for m in (map_abnormal, map_normal, map_abnormal_prior, map_normal_prior)}
    if len(shapes) != 1:
        raise ValidationError(f"segmentation maps differ in shape: {sorted(shapes)}")
    return 0.25 * (map_abnormal + (1.0 - map_normal) + map_abnormal_prior + (1.0 - map_normal_prior))


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = math.ceil(3.0 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_smooth(anomaly_map: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur, radius ceil(3 sigma), reflect padding (edge sample repeated)."""
    if not sigma > 0:
        raise ValidationError(f"sigma must be positive, got {sigma}")
    m = np.asarray(anomaly_map, dtype=np.float64)
    if m.ndim != 2:
        raise ValidationError("gaussian_smooth expects a 2-D map")
    k = gaussian_kernel(sigma)
    return correlate1d(correlate1d(m, k, axis=0, mode="reflect"), k, axis=1, mode="reflect")
