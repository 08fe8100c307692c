"""Compact frozen vision transformer with prompt injection and text anchors.

The backbone is a small ViT (patch 8 on 48x48 frames, hidden 64, 4 layers,
projection to 32-d unit-norm embeddings). It is pretrained once on a proxy
multi-label task (predict the frame's object-presence bits), then frozen;
afterwards only prompt parameters receive gradients. Prompts are short
sequences of learnable vectors inserted after the class token, each carrying
its own learnable positional vectors, with one projection matrix shared by
the whole pool. Text anchors are rows of a fixed orthonormal basis.

All parameter initialization is driven by numpy generators so that identical
seeds give bit-identical models regardless of torch's global RNG state.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .envsim import NUM_CATEGORIES

APPEARANCE_ROLES = ("brightness", "contrast", "saturation", "hue")
ACTION_ROLES = ("fov-narrow", "fov-standard", "fov-wide", "rotation", "lookstep")
TEXT_ROLE = "text"
DEFAULT_ROLES = APPEARANCE_ROLES + ACTION_ROLES + (TEXT_ROLE,)

# Priority order used when the pool size is swept away from the default 10.
ROLE_PRIORITY = APPEARANCE_ROLES + (
    "fov-narrow",
    "fov-standard",
    "fov-wide",
    "rotation",
    "lookstep",
    "look",
    "step",
)


def roles_for_pool_size(pool: int) -> tuple[str, ...]:
    """Role list for a pool of `pool` prompts; the text prompt is always last."""
    if not 2 <= pool <= 12:
        raise ValueError("pool size must be in [2, 12]")
    return ROLE_PRIORITY[: pool - 1] + (TEXT_ROLE,)


def _xavier_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def _init_linear(rng: np.random.Generator, linear: nn.Linear):
    w = _xavier_uniform(rng, linear.weight.shape, linear.in_features, linear.out_features)
    with torch.no_grad():
        linear.weight.copy_(torch.from_numpy(w.astype(np.float32)))
        if linear.bias is not None:
            linear.bias.zero_()


class TransformerBlock(nn.Module):
    """Pre-LN block: self-attention then a GELU MLP, both residual."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.ln1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.attn_out = nn.Linear(dim, dim)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp_in = nn.Linear(dim, 4 * dim)
        self.mlp_out = nn.Linear(4 * dim, dim)

    def init_params(self, rng: np.random.Generator):
        for lin in (self.qkv, self.attn_out, self.mlp_in, self.mlp_out):
            _init_linear(rng, lin)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, t, d = x.shape
        h = self.heads
        q, k, v = self.qkv(self.ln1(x)).chunk(3, dim=-1)
        q = q.view(b, t, h, d // h).transpose(1, 2)
        k = k.view(b, t, h, d // h).transpose(1, 2)
        v = v.view(b, t, h, d // h).transpose(1, 2)
        a = F.scaled_dot_product_attention(q, k, v)
        a = a.transpose(1, 2).reshape(b, t, d)
        x = x + self.attn_out(a)
        x = x + self.mlp_out(F.gelu(self.mlp_in(self.ln2(x))))
        return x


class VisionEncoder(nn.Module):
    """Patch embedding + class token + transformer + unit-norm projection."""

    def __init__(
        self,
        image_hw: int = 48,
        patch: int = 8,
        dim: int = 64,
        layers: int = 4,
        heads: int = 4,
        out_dim: int = 32,
        seed: int = 0,
    ):
        super().__init__()
        if image_hw % patch != 0:
            raise ValueError("image size must be divisible by patch size")
        self.image_hw = image_hw
        self.patch = patch
        self.dim = dim
        self.out_dim = out_dim
        self.n_patches = (image_hw // patch) ** 2

        self.patch_embed = nn.Conv2d(3, dim, kernel_size=patch, stride=patch)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, 1 + self.n_patches, dim))
        self.blocks = nn.ModuleList(TransformerBlock(dim, heads) for _ in range(layers))
        self.ln_f = nn.LayerNorm(dim)
        self.proj = nn.Parameter(torch.zeros(dim, out_dim))
        self.init_params(np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 11]))))

    def init_params(self, rng: np.random.Generator):
        fan_in = 3 * self.patch * self.patch
        w = _xavier_uniform(rng, self.patch_embed.weight.shape, fan_in, self.dim)
        with torch.no_grad():
            self.patch_embed.weight.copy_(torch.from_numpy(w.astype(np.float32)))
            self.patch_embed.bias.zero_()
            self.cls_token.copy_(
                torch.from_numpy(rng.normal(0.0, 0.02, self.cls_token.shape).astype(np.float32))
            )
            self.pos_embed.copy_(
                torch.from_numpy(rng.normal(0.0, 0.02, self.pos_embed.shape).astype(np.float32))
            )
            for blk in self.blocks:
                blk.init_params(rng)
            pw = _xavier_uniform(rng, (self.dim, self.out_dim), self.dim, self.out_dim)
            self.proj.copy_(torch.from_numpy(pw.astype(np.float32)))

    @property
    def param_dtype(self) -> torch.dtype:
        return self.proj.dtype

    def preprocess(self, obs) -> torch.Tensor:
        """uint8 (B, 3, H, W) or (3, H, W) -> float tensor scaled to [-1, 1]."""
        if isinstance(obs, np.ndarray):
            obs = torch.from_numpy(np.ascontiguousarray(obs))
        if obs.ndim == 3:
            obs = obs.unsqueeze(0)
        x = obs.to(self.param_dtype) / 255.0
        return (x - 0.5) / 0.5

    def patch_tokens(self, obs) -> torch.Tensor:
        x = self.preprocess(obs)
        t = self.patch_embed(x)  # (B, dim, H/p, W/p)
        return t.flatten(2).transpose(1, 2)  # (B, Np, dim)

    def forward_tokens(self, tokens: torch.Tensor) -> torch.Tensor:
        """Run blocks over an assembled token sequence and project the class token."""
        for blk in self.blocks:
            tokens = blk(tokens)
        cls = self.ln_f(tokens)[:, 0]
        z = cls @ self.proj
        return z / z.norm(dim=-1, keepdim=True).clamp_min(1e-12)

    def assemble(
        self,
        patches: torch.Tensor,
        prompt_hidden: torch.Tensor | None = None,
        prompt_pos: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """[cls; prompt; patches] plus positional embeddings (extended when prompted)."""
        b = patches.shape[0]
        cls = self.cls_token.expand(b, -1, -1)
        if prompt_hidden is None:
            tokens = torch.cat([cls, patches], dim=1) + self.pos_embed
        else:
            if prompt_hidden.ndim == 2:
                prompt_hidden = prompt_hidden.unsqueeze(0).expand(b, -1, -1)
                prompt_pos = prompt_pos.unsqueeze(0).expand(b, -1, -1)
            tokens = torch.cat([cls, prompt_hidden, patches], dim=1)
            pos = torch.cat(
                [
                    self.pos_embed[:, :1].expand(b, -1, -1),
                    prompt_pos,
                    self.pos_embed[:, 1:].expand(b, -1, -1),
                ],
                dim=1,
            )
            tokens = tokens + pos
        return tokens

    def encode(self, obs, prompt: "Prompt | None" = None, w_p: torch.Tensor | None = None):
        """Unit-norm embedding of `obs`, optionally steered by one prompt."""
        patches = self.patch_tokens(obs)
        if prompt is None:
            return self.forward_tokens(self.assemble(patches))
        return self.forward_tokens(self.assemble(patches, prompt.hidden(w_p), prompt.pos))

    def freeze(self):
        self.requires_grad_(False)
        self.eval()
        return self


class Prompt(nn.Module):
    """One learnable prompt: L token vectors plus L positional vectors."""

    def __init__(self, length: int, embed_dim: int, hidden_dim: int, role: str):
        super().__init__()
        self.role = role
        self.length = length
        self.tokens = nn.Parameter(torch.zeros(length, embed_dim))
        self.pos = nn.Parameter(torch.zeros(length, hidden_dim))

    def init_params(self, rng: np.random.Generator):
        with torch.no_grad():
            if self.length > 0:
                self.tokens.copy_(
                    torch.from_numpy(
                        _xavier_uniform(
                            rng, self.tokens.shape, self.tokens.shape[1], self.tokens.shape[0]
                        ).astype(np.float32)
                    )
                )
                self.pos.copy_(
                    torch.from_numpy(
                        _xavier_uniform(
                            rng, self.pos.shape, self.pos.shape[1], self.pos.shape[0]
                        ).astype(np.float32)
                    )
                )

    def hidden(self, w_p: torch.Tensor) -> torch.Tensor:
        return self.tokens @ w_p


class PromptPool(nn.Module):
    """K prompts with role tags and a shared embed->hidden projection.

    The shared projection initializes at `projection_gain` times Xavier scale
    so inserted prompt tokens start at patch-token magnitude; plain Xavier
    leaves them an order of magnitude smaller, and a frozen backbone then
    barely responds to the prompts within a desk-scale training budget.
    """

    def __init__(
        self,
        roles: tuple[str, ...] = DEFAULT_ROLES,
        length: int = 8,
        embed_dim: int = 64,
        hidden_dim: int = 64,
        seed: int = 0,
        projection_gain: float = 8.0,
    ):
        super().__init__()
        self.roles = tuple(roles)
        self.length = length
        self.prompts = nn.ModuleList(
            Prompt(length, embed_dim, hidden_dim, role) for role in roles
        )
        self.w_p = nn.Parameter(torch.zeros(embed_dim, hidden_dim))
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 23])))
        with torch.no_grad():
            self.w_p.copy_(
                torch.from_numpy(
                    (
                        projection_gain
                        * _xavier_uniform(rng, self.w_p.shape, embed_dim, hidden_dim)
                    ).astype(np.float32)
                )
            )
        for p in self.prompts:
            p.init_params(rng)

    def __len__(self) -> int:
        return len(self.prompts)

    @property
    def appearance_ids(self) -> list[int]:
        return [i for i, r in enumerate(self.roles) if r in APPEARANCE_ROLES]

    @property
    def action_ids(self) -> list[int]:
        return [i for i, r in enumerate(self.roles) if r not in APPEARANCE_ROLES and r != TEXT_ROLE]

    @property
    def text_id(self) -> int | None:
        return self.roles.index(TEXT_ROLE) if TEXT_ROLE in self.roles else None

    @property
    def domain_ids(self) -> list[int]:
        """Every non-text prompt, in pool order (the orchestrated set)."""
        return [i for i, r in enumerate(self.roles) if r != TEXT_ROLE]

    def hidden_stack(self, ids: list[int]) -> tuple[torch.Tensor, torch.Tensor]:
        hid = torch.stack([self.prompts[i].hidden(self.w_p) for i in ids])  # (K, L, d)
        pos = torch.stack([self.prompts[i].pos for i in ids])
        return hid, pos

    def prompt_parameters(self, ids: list[int] | None = None):
        """Learnable tensors owned by the given prompts plus the shared w_p."""
        ids = list(range(len(self))) if ids is None else ids
        params = []
        for i in ids:
            params.extend([self.prompts[i].tokens, self.prompts[i].pos])
        params.append(self.w_p)
        return params


def encode_pool(
    encoder: VisionEncoder, pool: PromptPool, obs, ids: list[int]
) -> torch.Tensor:
    """Embeddings of `obs` under each prompt in `ids`, batched in one pass.

    Returns (B, len(ids), out_dim); prompt sequences share one transformer
    forward by expanding the batch.
    """
    patches = encoder.patch_tokens(obs)  # (B, Np, d)
    b = patches.shape[0]
    k = len(ids)
    hid, pos = pool.hidden_stack(ids)  # (K, L, d)
    patches_k = patches.unsqueeze(1).expand(b, k, *patches.shape[1:]).reshape(b * k, *patches.shape[1:])
    hid_b = hid.unsqueeze(0).expand(b, -1, -1, -1).reshape(b * k, *hid.shape[1:])
    pos_b = pos.unsqueeze(0).expand(b, -1, -1, -1).reshape(b * k, *pos.shape[1:])
    tokens = encoder.assemble(patches_k, hid_b, pos_b)
    z = encoder.forward_tokens(tokens)
    return z.view(b, k, -1)


def encode_observation_set(
    encoder: VisionEncoder,
    pool: PromptPool,
    obs,
    include_text: bool = True,
) -> tuple[torch.Tensor, torch.Tensor | None, torch.Tensor]:
    """(z_v, z_t, z_k) for a batch, sharing one patch embedding pass.

    z_k stacks the non-text prompts in pool order, shape (B, K', out_dim);
    z_t is None when the pool has no text prompt or include_text is False.
    """
    patches = encoder.patch_tokens(obs)
    b = patches.shape[0]
    z_v = encoder.forward_tokens(encoder.assemble(patches))
    ids = list(pool.domain_ids)
    text_id = pool.text_id
    if include_text and text_id is not None:
        ids = ids + [text_id]
    k = len(ids)
    hid, pos = pool.hidden_stack(ids)
    patches_k = patches.unsqueeze(1).expand(b, k, *patches.shape[1:]).reshape(
        b * k, *patches.shape[1:]
    )
    hid_b = hid.unsqueeze(0).expand(b, -1, -1, -1).reshape(b * k, *hid.shape[1:])
    pos_b = pos.unsqueeze(0).expand(b, -1, -1, -1).reshape(b * k, *pos.shape[1:])
    z_all = encoder.forward_tokens(encoder.assemble(patches_k, hid_b, pos_b)).view(b, k, -1)
    if include_text and text_id is not None:
        return z_v, z_all[:, -1], z_all[:, :-1]
    return z_v, None, z_all


def text_anchor_basis(seed: int, n: int = NUM_CATEGORIES, dim: int = 32) -> np.ndarray:
    """Fixed orthonormal rows via Gram-Schmidt (with reorthogonalization) in f64."""
    if n > dim:
        raise ValueError("cannot orthonormalize more anchors than dimensions")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 37])))
    raw = rng.standard_normal((n, dim))
    basis = np.zeros((n, dim), dtype=np.float64)
    for i in range(n):
        v = raw[i]
        for _ in range(2):  # twice is enough for numerical orthogonality
            for j in range(i):
                v = v - np.dot(v, basis[j]) * basis[j]
        basis[i] = v / np.linalg.norm(v)
    return basis


def text_anchor(category: int, seed: int, dim: int = 32) -> np.ndarray:
    if not 0 <= category < NUM_CATEGORIES:
        raise ValueError(f"category {category} out of range")
    return text_anchor_basis(seed, dim=dim)[category]


def pretrain_backbone(
    dataset,
    seed: int,
    image_hw: int = 48,
    patch: int = 8,
    dim: int = 64,
    layers: int = 4,
    heads: int = 4,
    out_dim: int = 32,
    epochs: int = 50,
    batch: int = 128,
    lr: float = 1e-3,
    max_frames: int = 8000,
    holdout_fraction: float = 0.1,
) -> tuple[VisionEncoder, dict]:
    """Train the backbone on presence-bit prediction, then freeze it.

    A temporary linear head maps the unit-norm embedding to 12 presence
    logits; the head is discarded and the returned encoder has frozen=True
    semantics (all parameters requires_grad=False). The report carries the
    held-out per-bit accuracy measured just before the head is dropped.
    """
    frames = []
    labels = []
    for _, _, traj in dataset.all_trajectories():
        if traj.frames is None:
            raise ValueError("dataset was loaded without frames")
        frames.append(traj.frames)
        labels.append(traj.presence)
    if not frames:
        raise ValueError("empty dataset")
    x = np.concatenate(frames)
    y = np.concatenate(labels).astype(np.float32)

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 51])))
    order = rng.permutation(len(x))
    if len(order) > max_frames:
        order = order[:max_frames]
    x, y = x[order], y[order]
    n_hold = max(1, int(len(x) * holdout_fraction))
    x_hold, y_hold = x[:n_hold], y[:n_hold]
    x_train, y_train = x[n_hold:], y[n_hold:]

    enc = VisionEncoder(
        image_hw=image_hw, patch=patch, dim=dim, layers=layers, heads=heads, out_dim=out_dim,
        seed=seed,
    )
    head = nn.Linear(out_dim, NUM_CATEGORIES)
    _init_linear(np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 52]))), head)
    opt = torch.optim.Adam(list(enc.parameters()) + list(head.parameters()), lr=lr)

    y_train_t = torch.from_numpy(y_train)
    for epoch in range(epochs):
        perm = rng.permutation(len(x_train))
        for i0 in range(0, len(perm), batch):
            idx = perm[i0 : i0 + batch]
            z = enc.encode(x_train[idx])
            logits = head(z)
            loss = F.binary_cross_entropy_with_logits(logits, y_train_t[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            if not torch.isfinite(loss):
                raise RuntimeError(f"pretraining loss diverged at epoch {epoch}")

    with torch.no_grad():
        preds = []
        for i0 in range(0, len(x_hold), batch):
            z = enc.encode(x_hold[i0 : i0 + batch])
            preds.append((torch.sigmoid(head(z)) > 0.5).float())
        pred = torch.cat(preds).numpy()
    accuracy = float((pred == y_hold).mean())

    enc.freeze()
    return enc, {"holdout_bit_accuracy": accuracy, "n_train": len(x_train), "n_holdout": n_hold}
