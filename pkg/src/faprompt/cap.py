"""Compound abnormality prompts.

One normal prompt ``[V_1..V_E][object]`` and K abnormal prompts
``[V_1..V_E][A^i_1..A^i_E'][object]`` that reuse the *same* normal token
parameters, plus an orthogonality penalty that pushes the K abnormal
embeddings apart.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .errors import ValidationError


class PromptBank(nn.Module):
    """All learnable prompt tokens.

    ``object_token`` is a buffer, so optimizers built from ``parameters()``
    never touch it.
    """

    def __init__(
        self,
        token_dim: int,
        n_normal: int = 5,
        n_abnormal: int = 2,
        n_prompts: int = 10,
        deep_depth: int = 9,
        deep_length: int = 4,
        object_token: torch.Tensor | None = None,
        seed: int = 0,
        init_std: float = 0.02,
    ):
        super().__init__()
        if min(n_normal, n_abnormal, n_prompts) < 1:
            raise ValidationError("E, E' and K must all be >= 1")
        if deep_depth < 0 or deep_length < 0:
            raise ValidationError("deep prompt shape must be non-negative")
        g = torch.Generator().manual_seed(int(seed))

        def init(*shape):
            return nn.Parameter(torch.randn(*shape, generator=g) * init_std)

        self.normal_tokens = init(n_normal, token_dim)
        self.abnormal_tokens = init(n_prompts, n_abnormal, token_dim)
        self.deep_prompts = init(deep_depth, deep_length, token_dim)
        if object_token is None:
            object_token = torch.zeros(token_dim)
        if object_token.shape != (token_dim,):
            raise ValidationError(f"object token must have shape ({token_dim},)")
        self.register_buffer("object_token", object_token.detach().clone().float())

    @classmethod
    def for_backbone(cls, backbone, n_normal=5, n_abnormal=2, n_prompts=10, seed=0, init_std=0.02):
        cfg = backbone.config
        return cls(
            cfg.token_dim,
            n_normal,
            n_abnormal,
            n_prompts,
            cfg.deep_prompt_depth,
            cfg.deep_prompt_length,
            object_token=backbone.token_embedding("object"),
            seed=seed,
            init_std=init_std,
        )

    @property
    def token_dim(self) -> int:
        return self.normal_tokens.shape[1]

    @property
    def n_prompts(self) -> int:
        return self.abnormal_tokens.shape[0]


@dataclass
class PromptEmbeddings:
    normal: torch.Tensor  # F_n, (d,)
    per_prompt: torch.Tensor  # (K, d) or (B, K, d), rows unit-norm
    prototype: torch.Tensor  # F_a, mean of per_prompt rows
    prior_used: bool


def assemble_prompts(bank: PromptBank, prior: torch.Tensor | None = None):
    """Token sequences for the normal prompt and the K abnormal prompts.

    ``prior`` (shape ``(d_t,)`` or ``(B, d_t)``) is added to every abnormal
    token.  Returns ``(E+1, d_t)`` and ``(K, E+E'+1, d_t)``, the latter with a
    leading batch axis when ``prior`` is batched.
    """
    V, A, obj = bank.normal_tokens, bank.abnormal_tokens, bank.object_token
    normal = torch.cat([V, obj[None]], dim=0)

    if prior is not None:
        if prior.shape[-1] != A.shape[-1] or prior.ndim > 2:
            raise ValidationError(
                f"prior shape {tuple(prior.shape)} incompatible with token dim {A.shape[-1]}"
            )
        # (..., 1, 1, d_t) broadcasts over prompts and abnormal positions
        A = A + prior[..., None, None, :]
    K, E = A.shape[-3], V.shape[0]
    lead = A.shape[:-3]
    abnormal = torch.cat(
        [
            V.expand(*lead, K, E, V.shape[1]),
            A,
            obj.expand(*lead, K, 1, obj.shape[0]),
        ],
        dim=-2,
    )
    return normal, abnormal


def encode_prompt_bank(bank: PromptBank, text_encoder, prior: torch.Tensor | None = None) -> PromptEmbeddings:
    normal_seq, abnormal_seq = assemble_prompts(bank, prior)
    deep = bank.deep_prompts
    f_n = nn.functional.normalize(text_encoder.encode_text(normal_seq, deep), dim=-1)
    per_prompt = nn.functional.normalize(text_encoder.encode_text(abnormal_seq, deep), dim=-1)
    return PromptEmbeddings(f_n, per_prompt, prototype(per_prompt), prior is not None)


def prototype(per_prompt: torch.Tensor) -> torch.Tensor:
    """Mean over the prompt axis (-2).

    Each coordinate is summed in sorted order, so reordering the prompts
    gives a bit-identical result.
    """
    return per_prompt.sort(dim=-2).values.mean(dim=-2)


def orthogonality_loss(per_prompt: torch.Tensor) -> torch.Tensor:
    """Sum of |cos| over unordered pairs of rows of a (K, d) matrix."""
    if per_prompt.ndim != 2 or per_prompt.shape[0] < 1:
        raise ValidationError("per_prompt must be a non-empty (K, d) matrix")
    norms = per_prompt.norm(dim=1)
    if bool((norms == 0).any()):
        raise ValidationError("orthogonality loss undefined for a zero-norm row")
    unit = per_prompt / norms[:, None]
    cos = unit @ unit.T
    i, j = torch.triu_indices(len(unit), len(unit), offset=1)
    return cos[i, j].abs().sum()
