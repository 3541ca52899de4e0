"""Contrastive alignment between fused conditions and target-image embeddings,
its noise-aware variant, and the inference-time guidance gradient.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .diffusion import GuidanceUnavailableError


class DegenerateEmbeddingError(ValueError):
    """A zero vector cannot participate in cosine similarity."""


class MatchingTemperature(nn.Module):
    """Trainable temperature, stored as log tau so it stays positive."""

    def __init__(self, init: float = -1.0):
        super().__init__()
        self.log_tau = nn.Parameter(torch.tensor(float(init)))

    @property
    def tau(self) -> torch.Tensor:
        return self.log_tau.exp()


def similarity_matrix(fused: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Row i, column j holds cosine(fused_i, target_j); diagonal = positive pairs."""
    if fused.shape != targets.shape or fused.dim() != 2:
        raise ValueError(f"expected matching (n, d) inputs, got {tuple(fused.shape)} "
                         f"and {tuple(targets.shape)}")
    if fused.shape[0] < 2:
        raise ValueError("contrastive batches need at least two rows")
    fn = fused.norm(dim=-1)
    tn = targets.norm(dim=-1)
    if (fn < 1e-12).any() or (tn < 1e-12).any():
        raise DegenerateEmbeddingError("zero embedding in similarity batch")
    return (fused / fn[:, None]) @ (targets / tn[:, None]).T


def infonce(S: torch.Tensor, log_tau: torch.Tensor) -> torch.Tensor:
    """Symmetric cross-entropy over the similarity matrix, rows plus columns."""
    logits = S / log_tau.exp()
    labels = torch.arange(S.shape[0], device=S.device)
    return F.cross_entropy(logits, labels) + F.cross_entropy(logits.T, labels)


def n_icm_loss(fused: torch.Tensor, noisy_embeddings: torch.Tensor,
               log_tau: torch.Tensor) -> torch.Tensor:
    """Same functional form as the clean matching loss, over noisy-encoder outputs."""
    return infonce(similarity_matrix(fused, noisy_embeddings), log_tau)


def matching_loss_single(cond: torch.Tensor, embedding: torch.Tensor) -> torch.Tensor:
    """1 - cosine similarity, the single-sample surrogate used for guidance
    (the batch contrastive loss is degenerate at n=1)."""
    return (1.0 - F.cosine_similarity(cond, embedding, dim=-1)).sum()


def guidance_gradient(cond: torch.Tensor, x_t: torch.Tensor, noisy_encoder,
                      available: bool = True) -> torch.Tensor:
    """Gradient of the single-sample matching loss with respect to x_t.

    The caller chooses the sign convention when shifting the reverse-step mean.
    """
    if not available:
        raise GuidanceUnavailableError("noisy encoder has not been trained (stage 3 missing)")
    with torch.enable_grad():
        x = x_t.detach().requires_grad_(True)
        loss = matching_loss_single(cond.detach(), noisy_encoder(x).joint)
        (grad,) = torch.autograd.grad(loss, x)
    return grad
