"""Hybrid contrastive prompt training: visual, temporal-action, text branches.

Each branch owns a prompt subset (appearance / action / text role tags) and
its own SGD optimizer; the shared embed-to-hidden projection is updated by
all branches. The visual branch contrasts a frame against a view perturbed
only along the prompt's own photometric dimension; the action branch runs a
negative-free online/target regression over same-action frame pairs drawn
across embodiment configurations; the text branch aligns noise-perturbed
embeddings with fixed orthonormal category anchors.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import envsim
from .checkpoint import module_digest
from .encoder import APPEARANCE_ROLES, PromptPool, VisionEncoder, _init_linear
from .envsim import ContractViolation, DomainFactor, apply_photometric


class SamplingError(RuntimeError):
    """A contrastive pair violates its sampling contract."""


class ConfigurationError(RuntimeError):
    """An augmentor was wired to the wrong prompt dimension."""


# Ranges for single-dimension photometric perturbation, keyed by role.
AUGMENT_RANGES = {
    "brightness": (0.5, 1.5),
    "contrast": (0.5, 1.5),
    "saturation": (0.0, 2.0),
    "hue": (-0.1, 0.1),
}


@dataclass(frozen=True)
class PhotometricAugmentor:
    """Perturbs exactly one photometric dimension, identity on the others."""

    dimension: str

    def __post_init__(self):
        if self.dimension not in AUGMENT_RANGES:
            raise ConfigurationError(f"unknown photometric dimension {self.dimension!r}")

    def __call__(self, rng: np.random.Generator, img: np.ndarray) -> np.ndarray:
        lo, hi = AUGMENT_RANGES[self.dimension]
        value = float(rng.uniform(lo, hi))
        params = {"brightness": 1.0, "contrast": 1.0, "saturation": 1.0, "hue": 0.0}
        params[self.dimension] = value
        return apply_photometric(
            img, params["brightness"], params["contrast"], params["saturation"], params["hue"]
        )


class IdentityAugmentor:
    dimension = None

    def __call__(self, rng, img):
        return img


def stochastic_view(rng: np.random.Generator, img: np.ndarray) -> np.ndarray:
    """Action-branch view augmentation: random crop-resize plus mild jitter."""
    _, h, w = img.shape
    frac = float(rng.uniform(0.9, 1.0))
    ch, cw = max(1, int(round(h * frac))), max(1, int(round(w * frac)))
    r0 = int(rng.integers(0, h - ch + 1))
    c0 = int(rng.integers(0, w - cw + 1))
    crop = img[:, r0 : r0 + ch, c0 : c0 + cw]
    rows = (np.arange(h) * ch // h).astype(np.int64)
    cols = (np.arange(w) * cw // w).astype(np.int64)
    resized = crop[:, rows][:, :, cols]
    b = float(rng.uniform(0.9, 1.1))
    c = float(rng.uniform(0.9, 1.1))
    s = float(rng.uniform(0.9, 1.1))
    hshift = float(rng.uniform(-0.1, 0.1))
    return apply_photometric(resized, b, c, s, hshift)


def _check_unit_rows(z: torch.Tensor, what: str):
    dev = float((z.detach().norm(dim=-1) - 1.0).abs().max())
    if dev > 1e-4:
        raise ContractViolation(f"{what} rows must be unit-norm (max deviation {dev:.2e})")


def infonce_symmetric(z: torch.Tensor, z_pos: torch.Tensor) -> torch.Tensor:
    """Symmetric InfoNCE with sim(u, v) = exp(u^T v), temperature 1.

    Averages the anchors-vs-positives and positives-vs-anchors directions;
    a batch of one has no negatives and gives exactly zero.
    """
    if z.shape != z_pos.shape or z.ndim != 2 or z.shape[0] < 1:
        raise ContractViolation("expected matching (B, d) batches with B >= 1")
    _check_unit_rows(z, "anchor")
    _check_unit_rows(z_pos, "positive")
    logits = z @ z_pos.T
    diag = logits.diagonal()
    fwd = -(diag - torch.logsumexp(logits, dim=1))
    bwd = -(diag - torch.logsumexp(logits, dim=0))
    return 0.5 * (fwd + bwd).mean()


def visual_loss(
    encoder: VisionEncoder,
    pool: PromptPool,
    prompt_id: int,
    batch: np.ndarray,
    augmentor,
    lambda_v: float,
    rng: np.random.Generator,
    noise_sigma: float = 0.0,
) -> torch.Tensor:
    """InfoNCE + MSE between a batch and its single-dimension perturbed views.

    The augmentor must target the prompt's own photometric dimension. With
    `noise_sigma` > 0 Gaussian noise is added to both embeddings before the
    loss (used only by the regularization-only ablation).
    """
    role = pool.roles[prompt_id]
    if getattr(augmentor, "dimension", None) is not None and augmentor.dimension != role:
        raise ConfigurationError(
            f"augmentor for dimension {augmentor.dimension!r} wired to prompt role {role!r}"
        )
    views = np.stack([augmentor(rng, img) for img in batch])
    prompt = pool.prompts[prompt_id]
    z = encoder.encode(batch, prompt, pool.w_p)
    z_pos = encoder.encode(views, prompt, pool.w_p)
    if noise_sigma > 0.0:
        noise = rng.standard_normal((2, *z.shape)) * noise_sigma
        z = z + torch.from_numpy(noise[0]).to(z.dtype)
        z_pos = z_pos + torch.from_numpy(noise[1]).to(z.dtype)
        z = z / z.norm(dim=-1, keepdim=True).clamp_min(1e-12)
        z_pos = z_pos / z_pos.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    nce = infonce_symmetric(z, z_pos)
    mse = ((z - z_pos) ** 2).sum(dim=-1).mean()
    return nce + lambda_v * mse


def _mlp(d_in: int, d_hidden: int, d_out: int) -> nn.Sequential:
    # Batch statistics only (no running stats): keeps the loss a pure function
    # of parameters and inputs, which the finite-difference checks rely on.
    return nn.Sequential(
        nn.Linear(d_in, d_hidden),
        nn.BatchNorm1d(d_hidden, track_running_stats=False),
        nn.ReLU(),
        nn.Linear(d_hidden, d_out),
    )


class OnlineTargetNets(nn.Module):
    """BYOL-style online projector+predictor and momentum target projector."""

    def __init__(self, d_in: int = 32, d_hidden: int = 128, d_out: int = 16, seed: int = 0):
        super().__init__()
        self.online_proj = _mlp(d_in, d_hidden, d_out)
        self.online_pred = _mlp(d_out, d_hidden, d_out)
        self.target_proj = _mlp(d_in, d_hidden, d_out)
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 61])))
        for mod in (self.online_proj, self.online_pred):
            for layer in mod:
                if isinstance(layer, nn.Linear):
                    _init_linear(rng, layer)
        with torch.no_grad():
            for pt, po in zip(self.target_proj.parameters(), self.online_proj.parameters()):
                pt.copy_(po)
        for p in self.target_proj.parameters():
            p.requires_grad_(False)

    def online_parameters(self):
        return list(self.online_proj.parameters()) + list(self.online_pred.parameters())


def momentum_update(target: nn.Module, online: nn.Module, beta: float):
    """nu <- beta * nu + (1 - beta) * omega, elementwise over parameters."""
    t_params = list(target.parameters())
    o_params = list(online.parameters())
    if len(t_params) != len(o_params):
        raise ValueError("target/online parameter lists differ in length")
    with torch.no_grad():
        for pt, po in zip(t_params, o_params):
            if pt.shape != po.shape:
                raise ValueError("target/online parameter shapes differ")
            pt.mul_(beta).add_(po, alpha=1.0 - beta)


def byol_pair_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Per-sample squared distance between l2-normalized prediction and target."""
    p = pred / pred.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    t = target / target.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    return ((p - t) ** 2).sum(dim=-1)


def action_loss(
    encoder: VisionEncoder,
    pool: PromptPool,
    prompt_id: int,
    obs_q: np.ndarray,
    obs_k: np.ndarray,
    nets: OnlineTargetNets,
    actions_q: np.ndarray | None = None,
    actions_k: np.ndarray | None = None,
    fixed_targets: tuple[torch.Tensor, torch.Tensor] | None = None,
) -> torch.Tensor:
    """Symmetric online-vs-target regression over same-action view pairs.

    Gradient flows to the prompt and online networks only; the target branch
    is stop-gradient and is refreshed separately by `momentum_update`.
    `fixed_targets` pins (target_q, target_k) to externally computed constants
    so finite-difference oracles can hold the stop-gradient branch fixed.
    """
    if actions_q is not None and actions_k is not None:
        if not np.array_equal(np.asarray(actions_q), np.asarray(actions_k)):
            raise SamplingError("paired observations must share executed action types")
    prompt = pool.prompts[prompt_id]
    zq = encoder.encode(obs_q, prompt, pool.w_p)
    zk = encoder.encode(obs_k, prompt, pool.w_p)
    on_q = nets.online_pred(nets.online_proj(zq))
    on_k = nets.online_pred(nets.online_proj(zk))
    if fixed_targets is not None:
        tgt_q, tgt_k = fixed_targets
    else:
        with torch.no_grad():
            tgt_q = nets.target_proj(zq.detach())
            tgt_k = nets.target_proj(zk.detach())
    return 0.5 * (byol_pair_loss(on_q, tgt_k) + byol_pair_loss(on_k, tgt_q)).mean()


def text_loss(
    encoder: VisionEncoder,
    pool: PromptPool,
    text_id: int,
    batch: np.ndarray,
    goals: np.ndarray,
    anchors: torch.Tensor,
    sigma: float,
    lambda_t: float,
    seed: int,
) -> torch.Tensor:
    """Anchor InfoNCE + MSE on noise-perturbed text-prompted embeddings.

    Noise is injected after normalization and the perturbed embedding is not
    re-normalized; the InfoNCE denominator runs over the batch's own anchor
    instances (duplicate goals kept as-is).
    """
    prompt = pool.prompts[text_id]
    z = encoder.encode(batch, prompt, pool.w_p)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 71])))
    noise = rng.standard_normal(z.shape) * sigma
    z_t = z + torch.from_numpy(noise).to(z.dtype)
    t_g = anchors[torch.from_numpy(np.asarray(goals, dtype=np.int64))]
    logits = z_t @ t_g.T  # (B, B): z~_i against the batch's anchor instances
    diag = logits.diagonal()
    nce = -(diag - torch.logsumexp(logits, dim=1)).mean()
    mse = ((z_t - t_g) ** 2).sum(dim=-1).mean()
    return nce + lambda_t * mse


# ---------------------------------------------------------------------------
# Frame index and pair sampling over a dataset manifest
# ---------------------------------------------------------------------------


@dataclass
class FrameIndex:
    """Flat frame table with per-frame metadata and a train/holdout split."""

    frames: np.ndarray  # (N, 3, H, W) uint8
    factor_ids: np.ndarray  # (N,)
    actions: np.ndarray  # (N,)
    goals: np.ndarray  # (N,)
    factors: list[DomainFactor]
    train_idx: np.ndarray
    holdout_idx: np.ndarray
    _by_action: dict = field(default_factory=dict, repr=False)

    @classmethod
    def build(cls, dataset, holdout_fraction: float, seed: int) -> "FrameIndex":
        frames, fids, acts, goals, traj_ids = [], [], [], [], []
        tid = 0
        for fi, _, traj in dataset.all_trajectories():
            if traj.frames is None:
                raise ValueError("dataset was loaded without frames")
            n = traj.length
            frames.append(traj.frames)
            fids.append(np.full(n, fi, dtype=np.int64))
            acts.append(np.asarray(traj.actions, dtype=np.int64))
            goals.append(np.full(n, traj.goal, dtype=np.int64))
            traj_ids.append(np.full(n, tid, dtype=np.int64))
            tid += 1
        frames = np.concatenate(frames)
        fids = np.concatenate(fids)
        acts = np.concatenate(acts)
        goals = np.concatenate(goals)
        traj_ids = np.concatenate(traj_ids)

        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 81])))
        perm = rng.permutation(tid)
        n_hold = max(1, int(tid * holdout_fraction))
        hold_trajs = set(perm[:n_hold].tolist())
        is_hold = np.array([t in hold_trajs for t in traj_ids])
        return cls(
            frames=frames,
            factor_ids=fids,
            actions=acts,
            goals=goals,
            factors=list(dataset.factors),
            train_idx=np.nonzero(~is_hold)[0],
            holdout_idx=np.nonzero(is_hold)[0],
        )

    # -- population filters -------------------------------------------------

    def _factor_attr(self, fid: int, role: str):
        f = self.factors[fid]
        if role.startswith("fov"):
            return f.fov_group
        if role == "rotation":
            return f.rotation_step
        if role in ("lookstep", "look", "step"):
            return (f.look_step, f.translation_step)
        return None

    def _query_population(self, role: str) -> np.ndarray:
        if role.startswith("fov-"):
            group = role.split("-", 1)[1]
            mask = np.array([self.factors[f].fov_group == group for f in self.factor_ids])
            pop = self.train_idx[mask[self.train_idx]]
            if len(pop) > 0:
                return pop
        return self.train_idx

    def sample_visual(self, rng: np.random.Generator, batch: int) -> np.ndarray:
        idx = self.train_idx[rng.integers(0, len(self.train_idx), size=batch)]
        return self.frames[idx]

    def sample_text(self, rng: np.random.Generator, batch: int):
        idx = self.train_idx[rng.integers(0, len(self.train_idx), size=batch)]
        return self.frames[idx], self.goals[idx]

    def sample_action_pairs(self, rng: np.random.Generator, role: str, batch: int):
        """Same-action frame pairs whose factors differ in the role's dimension.

        Falls back to any-different-factor and finally any distinct same-action
        frame when the preferred contrast population is empty.
        """
        train_set = self.train_idx
        q_pop = self._query_population(role)
        qs, ks = [], []
        acts = self.actions[train_set]
        for _ in range(batch):
            q = int(q_pop[rng.integers(0, len(q_pop))])
            a = self.actions[q]
            same_action = train_set[acts == a]
            attr_q = self._factor_attr(self.factor_ids[q], role)
            contrast = same_action[
                np.array(
                    [self._factor_attr(f, role) != attr_q for f in self.factor_ids[same_action]]
                )
            ] if attr_q is not None else np.empty(0, dtype=np.int64)
            if len(contrast) == 0:
                contrast = same_action[self.factor_ids[same_action] != self.factor_ids[q]]
            if len(contrast) == 0:
                contrast = same_action[same_action != q]
            if len(contrast) == 0:
                raise SamplingError(f"no same-action partner for action {a}")
            k = int(contrast[rng.integers(0, len(contrast))])
            qs.append(q)
            ks.append(k)
        qs = np.array(qs)
        ks = np.array(ks)
        return (
            np.stack([stochastic_view(rng, f) for f in self.frames[qs]]),
            np.stack([stochastic_view(rng, f) for f in self.frames[ks]]),
            self.actions[qs],
            self.actions[ks],
        )


def perturbation_alignment(
    encoder: VisionEncoder,
    pool: PromptPool,
    prompt_id: int,
    frames: np.ndarray,
    augmentor,
    rng: np.random.Generator,
) -> float:
    """Mean cosine between embeddings of frames and their perturbed views."""
    views = np.stack([augmentor(rng, img) for img in frames])
    with torch.no_grad():
        z = encoder.encode(frames, pool.prompts[prompt_id], pool.w_p)
        z_pos = encoder.encode(views, pool.prompts[prompt_id], pool.w_p)
    return float((z * z_pos).sum(dim=-1).mean())


ROLE_TO_AUGMENTOR = {role: PhotometricAugmentor(role) for role in APPEARANCE_ROLES}


def train_prompts(
    dataset,
    encoder: VisionEncoder,
    pool: PromptPool,
    anchors: torch.Tensor,
    cfg: dict,
    seed: int,
    branches: tuple[str, ...] = ("visual", "action", "text"),
    log_path: str | Path | None = None,
    holdout_fraction: float = 0.1,
    reg_only_noise: bool = False,
) -> dict:
    """Run the contrastive prompt-learning phase over a frozen encoder.

    Per iteration: one visual step on the cycled appearance prompt, one action
    step on the cycled action prompt (followed by the momentum update of the
    target network), one text step. Branch set is configurable for ablations;
    `reg_only_noise` injects the text branch's Gaussian noise into the visual
    branch instead (regularization-only variant). Aborts on non-finite loss.
    Returns a report with the encoder digest (before == after is enforced),
    per-branch final losses, and the frame index holdout for later checks.
    """
    t_cfg = cfg["prompt_training"]
    epochs = t_cfg["epochs"]
    index = FrameIndex.build(dataset, holdout_fraction, seed)
    steps_per_epoch = t_cfg.get("steps_per_epoch") or max(
        1, len(index.train_idx) // (t_cfg["visual_batch"] * 3)
    )
    total_steps = epochs * steps_per_epoch
    digest_before = module_digest(encoder)

    nets = OnlineTargetNets(d_in=encoder.out_dim, seed=seed)
    appearance = pool.appearance_ids
    action_prompts = pool.action_ids
    text_id = pool.text_id

    opt_v = torch.optim.SGD(
        pool.prompt_parameters(appearance),
        lr=t_cfg["lr_visual"],
        momentum=t_cfg["momentum"],
        weight_decay=t_cfg["weight_decay"],
    ) if "visual" in branches and appearance else None
    opt_a = torch.optim.SGD(
        pool.prompt_parameters(action_prompts) + nets.online_parameters(),
        lr=t_cfg["lr_action"],
        momentum=t_cfg["momentum"],
        weight_decay=t_cfg["weight_decay"],
    ) if "action" in branches and action_prompts else None
    opt_t = torch.optim.SGD(
        pool.prompt_parameters([text_id]),
        lr=t_cfg["lr_text"],
        momentum=t_cfg["momentum"],
        weight_decay=t_cfg["weight_decay"],
        nesterov=True,
    ) if "text" in branches and text_id is not None else None

    log_file = open(log_path, "w") if log_path is not None else None
    counters = {"visual": 0, "action": 0, "text": 0}
    last = {}

    def _zero_grads():
        for p in pool.parameters():
            p.grad = None
        for p in nets.parameters():
            p.grad = None

    def _poly_lr(base: float, step: int) -> float:
        return base * (1.0 - step / max(1, total_steps)) ** t_cfg["poly_power"]

    def _branch_step(opt, base_lr, loss, step, branch):
        if not torch.isfinite(loss):
            raise RuntimeError(f"{branch} loss is non-finite at step {step}: {loss}")
        lr = _poly_lr(base_lr, step)
        for g in opt.param_groups:
            g["lr"] = lr
        loss.backward()
        opt.step()
        counters[branch] += 1
        last[branch] = float(loss.detach())
        if log_file is not None:
            log_file.write(
                json.dumps({"step": step, "branch": branch, "loss": last[branch], "lr": lr}) + "\n"
            )

    step = 0
    for epoch in range(epochs):
        for it in range(steps_per_epoch):
            rng = np.random.Generator(
                np.random.PCG64(np.random.SeedSequence([seed, 91, epoch, it]))
            )
            if opt_v is not None:
                pid = appearance[step % len(appearance)]
                batch = index.sample_visual(rng, t_cfg["visual_batch"])
                _zero_grads()
                loss = visual_loss(
                    encoder,
                    pool,
                    pid,
                    batch,
                    ROLE_TO_AUGMENTOR[pool.roles[pid]],
                    t_cfg["lambda_visual"],
                    rng,
                    noise_sigma=t_cfg["sigma"] if reg_only_noise else 0.0,
                )
                _branch_step(opt_v, t_cfg["lr_visual"], loss, step, "visual")
            if opt_a is not None:
                pid = action_prompts[step % len(action_prompts)]
                obs_q, obs_k, act_q, act_k = index.sample_action_pairs(
                    rng, pool.roles[pid], t_cfg["action_batch"]
                )
                _zero_grads()
                loss = action_loss(encoder, pool, pid, obs_q, obs_k, nets, act_q, act_k)
                _branch_step(opt_a, t_cfg["lr_action"], loss, step, "action")
                momentum_update(nets.target_proj, nets.online_proj, t_cfg["beta"])
            if opt_t is not None:
                batch, goals = index.sample_text(rng, t_cfg["text_batch"])
                _zero_grads()
                loss = text_loss(
                    encoder,
                    pool,
                    text_id,
                    batch,
                    goals,
                    anchors,
                    t_cfg["sigma"],
                    t_cfg["lambda_text"],
                    seed=int(
                        np.random.SeedSequence([seed, 92, epoch, it]).generate_state(1)[0]
                    ),
                )
                _branch_step(opt_t, t_cfg["lr_text"], loss, step, "text")
            step += 1

    if log_file is not None:
        log_file.close()
    digest_after = module_digest(encoder)
    if digest_after != digest_before:
        raise RuntimeError("frozen encoder changed during prompt training")
    return {
        "steps": step,
        "branch_calls": counters,
        "final_losses": last,
        "encoder_digest": digest_after,
        "holdout_idx": index.holdout_idx.tolist(),
    }
