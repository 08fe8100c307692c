"""Dual-branch attention that fuses prompted embeddings into one state vector.

Two score branches drive the weighting: a learnable projection branch scoring
each domain-prompted embedding against the vanilla embedding, and a cosine
branch anchoring weights to raw semantic agreement. Their product passes
through a max-stabilized softmax; the text-prompted embedding bypasses the
attention entirely and is added directly.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .encoder import _init_linear


class ProjectionNet(nn.Module):
    """Two linear layers with SiLU, mapping embeddings to attention keys."""

    def __init__(self, out_dim: int = 32, hidden: int = 128, seed: int = 0):
        super().__init__()
        self.fc1 = nn.Linear(out_dim, hidden)
        self.fc2 = nn.Linear(hidden, out_dim)
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 101])))
        _init_linear(rng, self.fc1)
        _init_linear(rng, self.fc2)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.silu(self.fc1(z)))


def dual_scores(
    z_v: torch.Tensor, z_k: torch.Tensor, f_p: ProjectionNet
) -> tuple[torch.Tensor, torch.Tensor]:
    """Learnable and cosine attention scores for each domain prompt.

    z_v: (..., d) vanilla embedding; z_k: (..., K, d) prompted embeddings
    (text excluded). Returns (s_a, s_c), each (..., K).
    """
    if z_v.shape[-1] != z_k.shape[-1]:
        raise ValueError("embedding dimensions disagree")
    d = z_v.shape[-1]
    keys = f_p(z_k)
    s_a = (z_v.unsqueeze(-2) * keys).sum(-1) / math.sqrt(d)
    s_c = (z_v.unsqueeze(-2) * z_k).sum(-1)
    return s_a, s_c


def fuse(
    z_v: torch.Tensor,
    z_t: torch.Tensor | None,
    z_k: torch.Tensor,
    s_a: torch.Tensor,
    s_c: torch.Tensor,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Softmax the score products and build z_f = z_v + z_t + sum_k alpha_k z_k.

    The softmax is stabilized by max-subtraction; z_f is not re-normalized.
    z_t may be None for variants that drop the text prompt from the fusion.
    """
    prod = s_a * s_c
    alpha = torch.softmax(prod - prod.max(dim=-1, keepdim=True).values, dim=-1)
    z_f = z_v + (alpha.unsqueeze(-1) * z_k).sum(-2)
    if z_t is not None:
        z_f = z_f + z_t
    return z_f, alpha


def fuse_with_weights(
    z_v: torch.Tensor, z_t: torch.Tensor | None, z_k: torch.Tensor, alpha: torch.Tensor
) -> torch.Tensor:
    """Fusion with externally supplied weights (uniform/ablation variants)."""
    z_f = z_v + (alpha.unsqueeze(-1) * z_k).sum(-2)
    if z_t is not None:
        z_f = z_f + z_t
    return z_f


def orchestrate(
    z_v: torch.Tensor,
    z_t: torch.Tensor | None,
    z_k: torch.Tensor,
    f_p: ProjectionNet,
    mode: str = "dual",
) -> tuple[torch.Tensor, torch.Tensor]:
    """One-call fusion supporting the attention ablation variants.

    mode: "dual" (score product), "att" (learnable branch only),
    "cos" (cosine branch only), "avg" (uniform weights).
    """
    k = z_k.shape[-2]
    if mode == "avg":
        alpha = torch.full(z_k.shape[:-1], 1.0 / k, dtype=z_k.dtype, device=z_k.device)
        return fuse_with_weights(z_v, z_t, z_k, alpha), alpha
    s_a, s_c = dual_scores(z_v, z_k, f_p)
    if mode == "dual":
        return fuse(z_v, z_t, z_k, s_a, s_c)
    if mode == "att":
        prod = s_a
    elif mode == "cos":
        prod = s_c
    else:
        raise ValueError(f"unknown fusion mode {mode!r}")
    alpha = torch.softmax(prod - prod.max(dim=-1, keepdim=True).values, dim=-1)
    return fuse_with_weights(z_v, z_t, z_k, alpha), alpha
