"""Batched inference and the evaluation harness."""
from __future__ import annotations

import numpy as np
import torch

from .dap import patch_scores
from .data import DatasetHandle
from .metrics import EvalReport, evaluate_predictions
from .scoring import gaussian_smooth, inference_map
from .training import FAPrompt, load_batch


@torch.no_grad()
def predict(model: FAPrompt, images: torch.Tensor, sigma: float | None = None):
    """Image scores ``(B,)`` and fused, optionally smoothed anomaly maps ``(B, h, w)``."""
    out = model.forward(images)
    fused = inference_map(out.map_abnormal, out.map_normal, out.map_abnormal_prior, out.map_normal_prior)
    maps = fused.double().cpu().numpy()
    if sigma is not None:
        maps = np.stack([gaussian_smooth(m, sigma) for m in maps])
    return out.score.double().cpu().numpy(), maps


def predict_dataset(model: FAPrompt, dataset: DatasetHandle, batch_size: int = 16, sigma: float | None = None):
    scores, maps, masks = [], [], []
    for start in range(0, len(dataset), batch_size):
        idx = range(start, min(start + batch_size, len(dataset)))
        images, batch_masks, _ = load_batch(dataset, idx, model.config.input_size)
        s, m = predict(model, images, sigma)
        scores.append(s)
        maps.append(m)
        masks.append(batch_masks.numpy().astype(np.uint8))
    return np.concatenate(scores), np.concatenate(maps), np.concatenate(masks)


def evaluate(model: FAPrompt, dataset: DatasetHandle, fpr_limit: float = 0.3, batch_size: int = 16):
    """EvalReport plus per-image scores; maps are smoothed with the model's sigma."""
    scores, maps, masks = predict_dataset(model, dataset, batch_size, sigma=model.config.sigma)
    report: EvalReport = evaluate_predictions(scores, dataset.labels, maps, masks, fpr_limit)
    return report, scores


@torch.no_grad()
def prompt_wise_scores(model: FAPrompt, dataset: DatasetHandle, batch_size: int = 16) -> np.ndarray:
    """Per image, the max patch score of each abnormality prompt taken alone: ``(N, K)``.

    Uses the prior-free prompts, i.e. the per-prompt analogue of ``S^a``.
    """
    rows = []
    for start in range(0, len(dataset), batch_size):
        idx = range(start, min(start + batch_size, len(dataset)))
        images, _, _ = load_batch(dataset, idx, model.config.input_size)
        out = model.forward(images)
        _, patches = model.backbone.encode_images(images)
        free = out.prompt_free
        per = [
            patch_scores(patches, free.normal, free.per_prompt[k], model.config.tau)[1].amax(dim=-1)
            for k in range(free.per_prompt.shape[0])
        ]
        rows.append(torch.stack(per, dim=-1).double().numpy())
    return np.concatenate(rows)
