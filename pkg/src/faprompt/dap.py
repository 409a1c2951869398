"""Data-dependent abnormality prior: patch scoring, top-M selection, prior network."""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .errors import ValidationError


def _cosine(x: torch.Tensor, ref: torch.Tensor, what: str) -> torch.Tensor:
    if bool((x.norm(dim=-1) == 0).any()) or bool((ref.norm(dim=-1) == 0).any()):
        raise ValidationError(f"zero-norm embedding in {what}")
    x = nn.functional.normalize(x, dim=-1)
    ref = nn.functional.normalize(ref, dim=-1)
    return (x * ref.unsqueeze(-2)).sum(-1)


def patch_scores(patch_emb: torch.Tensor, f_n: torch.Tensor, f_a: torch.Tensor, tau: float = 100.0):
    """Two-way softmax of cosine logits per patch.

    ``patch_emb`` is ``(l, d)`` or ``(B, l, d)``; ``f_n`` / ``f_a`` are ``(d,)``
    or ``(B, d)``.  Returns ``(S_n, S_a)`` with ``S_n = 1 - S_a`` exactly.
    """
    if patch_emb.shape[-1] != f_n.shape[-1] or patch_emb.shape[-1] != f_a.shape[-1]:
        raise ValidationError("patch and prompt embedding dimensions differ")
    logit_n = tau * _cosine(patch_emb, f_n, "patch_scores")
    logit_a = tau * _cosine(patch_emb, f_a, "patch_scores")
    # the two-way softmax reduces to a sigmoid of the logit gap, which is stable for any gap
    s_a = torch.sigmoid(logit_a - logit_n)
    return 1.0 - s_a, s_a


def select_top_patches(s_a: torch.Tensor, patch_emb: torch.Tensor, m: int):
    """Indices and embeddings of the ``m`` highest-scoring patches.

    Descending score, ties to the smaller flat index.  The ranking is computed
    on detached scores; gradients reach only the gathered embeddings.
    """
    l = s_a.shape[-1]
    if patch_emb.shape[:-1] != s_a.shape:
        raise ValidationError("score vector and patch embeddings disagree on patch count")
    if not 1 <= m <= l:
        raise ValidationError(f"M={m} must lie in [1, {l}]")
    order = torch.sort(-s_a.detach(), dim=-1, stable=True).indices[..., :m]
    selected = torch.gather(patch_emb, -2, order.unsqueeze(-1).expand(*order.shape, patch_emb.shape[-1]))
    return order, selected


class PriorNetwork(nn.Module):
    """MLP ``d*M -> (d*M)//16 -> d_t`` with ReLU, applied to concatenated patches.

    Both layers use the usual ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))`` init,
    drawn from a seeded generator; ``out_scale`` optionally shrinks the output
    layer (1.0 keeps the standard init).
    """

    def __init__(self, embedding_dim: int, n_patches: int, token_dim: int, seed: int = 0, out_scale: float = 1.0):
        super().__init__()
        in_dim = embedding_dim * n_patches
        hidden = in_dim // 16
        if hidden < 1:
            raise ValidationError(f"d*M = {in_dim} is too small for a hidden layer of size d*M/16")
        self.n_patches = n_patches
        self.hidden = nn.Linear(in_dim, hidden)
        self.out = nn.Linear(hidden, token_dim)
        g = torch.Generator().manual_seed(int(seed))
        with torch.no_grad():
            for layer, scale in ((self.hidden, 1.0), (self.out, out_scale)):
                bound = scale * layer.in_features ** -0.5
                layer.weight.uniform_(-bound, bound, generator=g)
                layer.bias.uniform_(-bound, bound, generator=g)

    def forward(self, flat_patches: torch.Tensor) -> torch.Tensor:
        return self.out(torch.relu(self.hidden(flat_patches)))

    def zero_(self) -> PriorNetwork:
        with torch.no_grad():
            for p in self.parameters():
                p.zero_()
        return self


@dataclass
class AbnormalityPrior:
    omega: torch.Tensor  # (d_t,) or (B, d_t)
    source_indices: torch.Tensor | None = None  # (M,) or (B, M)


def compute_prior(psi: PriorNetwork, patches: torch.Tensor, indices: torch.Tensor | None = None) -> AbnormalityPrior:
    """Run ``psi`` on the selected patches, concatenated in selection order."""
    if patches.ndim not in (2, 3) or patches.shape[-2] != psi.n_patches:
        raise ValidationError(f"expected {psi.n_patches} patch embeddings, got shape {tuple(patches.shape)}")
    omega = psi(patches.flatten(start_dim=-2))
    return AbnormalityPrior(omega, indices)


def prior_loss(omega: torch.Tensor, label) -> torch.Tensor:
    """Sum of squared prior entries over normal samples only."""
    label = torch.as_tensor(label, device=omega.device)
    per_sample = (omega**2).sum(dim=-1)
    return (per_sample * (label == 0).to(omega.dtype)).sum()
