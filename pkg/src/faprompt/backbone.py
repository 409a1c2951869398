"""Frozen vision-language encoders.

Everything downstream talks to a backbone through three calls:
``encode_images`` (batched, returns global + patch embeddings),
``encode_image`` (single image, returns an :class:`ImageEncoding`) and
``encode_text`` (token sequences plus per-layer deep prompts).

:class:`ToyBackbone` is a deterministic, seeded stand-in that is cheap enough
for CPU tests.  A real CLIP adapter has to satisfy :class:`VisionLanguageBackbone`:

* patch tokens must come from the value-value attention path of the visual
  tower, starting at layer 6, projected into the joint embedding space;
* the text tower must accept ``deep_prompt_depth`` sets of
  ``deep_prompt_length`` learnable tokens, attached to the first layers;
* no adapter weight may have ``requires_grad`` set.
"""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from typing import Protocol, Sequence

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, ValidationError


@dataclass(frozen=True)
class BackboneConfig:
    embedding_dim: int = 768
    token_dim: int = 768
    deep_prompt_depth: int = 9
    deep_prompt_length: int = 4
    text_layers: int = 12
    patch_size: int = 8
    input_size: tuple[int, int] = (518, 518)
    seed: int = 0
    kind: str = "toy"

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        if self.embedding_dim <= 0 or self.token_dim <= 0:
            raise ConfigError("embedding_dim and token_dim must be positive")
        if self.deep_prompt_depth < 0 or self.deep_prompt_length < 0:
            raise ConfigError("deep prompt depth/length must be >= 0")
        if self.deep_prompt_depth > self.text_layers:
            raise ConfigError(
                f"deep_prompt_depth={self.deep_prompt_depth} exceeds text_layers={self.text_layers}"
            )
        if self.patch_size <= 0:
            raise ConfigError("patch_size must be positive")
        h, w = self.input_size
        if h < self.patch_size or w < self.patch_size:
            raise ConfigError(f"input_size {self.input_size} smaller than one patch")
        if self.kind != "toy":
            raise ConfigError(f"unknown backbone kind {self.kind!r}")

    @property
    def grid_shape(self) -> tuple[int, int]:
        h, w = self.input_size
        return h // self.patch_size, w // self.patch_size

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        return d


@dataclass
class ImageEncoding:
    image_embedding: torch.Tensor  # (d,)
    patch_embeddings: torch.Tensor  # (l, d)
    grid_shape: tuple[int, int]

    def __post_init__(self):
        g_h, g_w = self.grid_shape
        if self.patch_embeddings.shape[0] != g_h * g_w:
            raise ValidationError("patch count does not match grid shape")
        if self.patch_embeddings.shape[1] != self.image_embedding.shape[0]:
            raise ValidationError("patch and image embedding dims differ")


class VisionLanguageBackbone(Protocol):
    config: BackboneConfig
    identifier: str

    def encode_images(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(B, h, w, 3) -> ((B, d) global embeddings, (B, l, d) patch embeddings)."""

    def encode_image(self, image) -> ImageEncoding: ...

    def encode_text(self, prompt_tokens: torch.Tensor, deep_prompts: torch.Tensor) -> torch.Tensor:
        """(..., n, d_t) tokens and (depth, length, d_t) deep prompts -> (..., d)."""


class ToyBackbone(nn.Module):
    """Seeded random encoders with the same interface as a CLIP adapter.

    Image path: non-overlapping ``patch_size`` patches, centred at 0.5, go
    through a fixed affine map and ``tanh``; the global embedding is the mean
    patch embedding.  The affine offset gives every patch a shared component,
    as real CLIP patch tokens have, so a text direction can separate textures
    that differ in sign around 0.5.  Pixels beyond the last full patch are ignored.

    Text path: the token mean runs through ``text_layers`` pre-norm residual
    ``tanh`` layers (non-affine layer norm, eps 1e-5).  Before each of the
    first ``deep_prompt_depth`` layers the mean of that layer's deep prompt
    tokens is added to the running state.  A final layer norm and affine map
    go from token space to the joint space.
    """

    identifier = "toy-v1"

    def __init__(self, config: BackboneConfig | None = None):
        super().__init__()
        self.config = config = config or BackboneConfig()
        g = torch.Generator().manual_seed(int(config.seed))
        d, dt, p = config.embedding_dim, config.token_dim, config.patch_size
        fan_in = 3 * p * p

        def normal(*shape, std):
            return torch.randn(*shape, generator=g, dtype=torch.float64).mul_(std).float()

        self.register_buffer("patch_weight", normal(fan_in, d, std=1.0 / np.sqrt(fan_in)))
        self.register_buffer("text_weight", normal(config.text_layers, dt, dt, std=1.0 / np.sqrt(dt)))
        self.register_buffer("text_bias", normal(config.text_layers, dt, std=0.1))
        self.register_buffer("out_weight", normal(dt, d, std=1.0 / np.sqrt(dt)))
        self.register_buffer("out_bias", normal(d, std=0.1))
        # token-embedding scale, comparable to freshly initialised prompt tokens
        self.register_buffer("object_embedding", normal(dt, std=0.02))
        self.register_buffer("patch_bias", normal(d, std=0.5))
        self.requires_grad_(False)

    @property
    def embedding_dim(self) -> int:
        return self.config.embedding_dim

    @property
    def token_dim(self) -> int:
        return self.config.token_dim

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.config.grid_shape

    def token_embedding(self, word: str) -> torch.Tensor:
        """Vector for a fixed vocabulary word; the toy vocabulary holds only 'object'."""
        if word != "object":
            raise ValidationError(f"toy vocabulary has no token {word!r}")
        return self.object_embedding.clone()

    def _as_batch(self, images) -> torch.Tensor:
        x = torch.as_tensor(np.asarray(images) if not torch.is_tensor(images) else images)
        if x.ndim == 3:
            x = x.unsqueeze(0)
        h, w = self.config.input_size
        if x.ndim != 4 or x.shape[1:] != (h, w, 3):
            raise ConfigError(f"expected images of shape (h={h}, w={w}, 3), got {tuple(x.shape)}")
        x = x.to(self.patch_weight.dtype)
        if not torch.isfinite(x).all():
            raise ValidationError("image contains non-finite values")
        return x

    @torch.no_grad()
    def encode_images(self, images) -> tuple[torch.Tensor, torch.Tensor]:
        x = self._as_batch(images)
        p = self.config.patch_size
        g_h, g_w = self.grid_shape
        b = x.shape[0]
        x = x[:, : g_h * p, : g_w * p] - 0.5
        patches = x.reshape(b, g_h, p, g_w, p, 3).permute(0, 1, 3, 2, 4, 5).reshape(b, g_h * g_w, -1)
        patch_emb = torch.tanh(patches @ self.patch_weight + self.patch_bias)
        return patch_emb.mean(dim=1), patch_emb

    def encode_image(self, image) -> ImageEncoding:
        glob, patches = self.encode_images(image)
        if glob.shape[0] != 1:
            raise ValidationError("encode_image takes exactly one image")
        return ImageEncoding(glob[0], patches[0], self.grid_shape)

    def encode_text(self, prompt_tokens: torch.Tensor, deep_prompts: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        if prompt_tokens.ndim < 2 or prompt_tokens.shape[-2] == 0:
            raise ValidationError("prompt token sequence is empty")
        if prompt_tokens.shape[-1] != cfg.token_dim:
            raise ValidationError(f"token dim {prompt_tokens.shape[-1]} != {cfg.token_dim}")
        expected = (cfg.deep_prompt_depth, cfg.deep_prompt_length, cfg.token_dim)
        if tuple(deep_prompts.shape) != expected:
            raise ValidationError(f"deep prompts shaped {tuple(deep_prompts.shape)}, expected {expected}")

        h = prompt_tokens.mean(dim=-2)
        for layer in range(cfg.text_layers):
            if layer < cfg.deep_prompt_depth and cfg.deep_prompt_length > 0:
                h = h + deep_prompts[layer].mean(dim=0)
            h = h + torch.tanh(_layer_norm(h) @ self.text_weight[layer] + self.text_bias[layer])
        return _layer_norm(h) @ self.out_weight + self.out_bias

    def state_hash(self) -> str:
        digest = hashlib.sha256()
        for name, buf in sorted(self.state_dict().items()):
            digest.update(name.encode())
            digest.update(buf.detach().cpu().contiguous().numpy().tobytes())
        return digest.hexdigest()


def _layer_norm(h: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    mu = h.mean(dim=-1, keepdim=True)
    var = ((h - mu) ** 2).mean(dim=-1, keepdim=True)
    return (h - mu) / torch.sqrt(var + eps)


def build_backbone(config: BackboneConfig | dict | None = None) -> ToyBackbone:
    if isinstance(config, dict):
        config = BackboneConfig(**config)
    return ToyBackbone(config)


def stack_images(images: Sequence) -> torch.Tensor:
    return torch.as_tensor(np.stack([np.asarray(im, dtype=np.float32) for im in images]))
