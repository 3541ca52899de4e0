"""Gated fusion of the reference-image and instruction representations.

Produces the condition vector driving generation: a sigmoid gate interpolates
elementwise between a transformed joint feature and the raw image
representation, so every output coordinate stays between the two.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


class GatedFusion(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.d = d
        self.gate = nn.Linear(4 * d, d)
        self.value = nn.Linear(4 * d, d)

    def forward(self, u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        if u.shape != v.shape or u.shape[-1] != self.d:
            raise ValueError(f"expected matching (..., {self.d}) inputs, got "
                             f"{tuple(u.shape)} and {tuple(v.shape)}")
        z = torch.cat([u, v, u * v, u - v], dim=-1)
        g = torch.sigmoid(self.gate(z))
        # exact Gaussian-CDF gelu keeps finite-difference checks clean
        h = F.gelu(self.value(z), approximate="none")
        return g * h + (1.0 - g) * u
