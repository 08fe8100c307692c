"""Recurrent actor-critic over fused features, trained with PPO and GAE.

Rollouts store the raw (vanilla / text / domain-prompted) embeddings so the
update phase can rebuild the fused feature differentiably: PPO gradients then
reach the GRU, both heads, the previous-action embedding table, and the
attention projection jointly, while prompts and backbone stay frozen. Hidden
states are stored per step and replayed from the buffer during updates (one
recurrent step per sample, no re-burning).

Randomness is numpy-only: each parallel environment owns a stream derived
from (seed, env index), so results are independent of scheduling.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import envsim
from .encoder import PromptPool, VisionEncoder, encode_observation_set
from .envsim import NUM_ACTIONS, NUM_CATEGORIES, AgentState, DomainFactor, GridScene
from .orchestrator import ProjectionNet, orchestrate


def _xavier(rng: np.random.Generator, shape, fan_in, fan_out, scale=1.0):
    bound = math.sqrt(6.0 / (fan_in + fan_out)) * scale
    return torch.from_numpy(rng.uniform(-bound, bound, size=shape).astype(np.float32))


class ActorCritic(nn.Module):
    """Previous-action embedding + single-layer GRU + actor/critic heads."""

    def __init__(
        self,
        feat_dim: int = 32,
        hidden: int = 128,
        action_embed: int = 16,
        seed: int = 0,
    ):
        super().__init__()
        self.hidden = hidden
        self.input_dim = feat_dim + NUM_CATEGORIES + action_embed
        self.action_table = nn.Embedding(NUM_ACTIONS, action_embed)
        self.gru = nn.GRUCell(self.input_dim, hidden)
        self.actor = nn.Linear(hidden, NUM_ACTIONS)
        self.critic = nn.Linear(hidden, 1)
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 131])))
        with torch.no_grad():
            self.action_table.weight.copy_(
                _xavier(rng, self.action_table.weight.shape, action_embed, NUM_ACTIONS)
            )
            self.gru.weight_ih.copy_(
                _xavier(rng, self.gru.weight_ih.shape, self.input_dim, 3 * hidden)
            )
            self.gru.weight_hh.copy_(_xavier(rng, self.gru.weight_hh.shape, hidden, 3 * hidden))
            self.gru.bias_ih.zero_()
            self.gru.bias_hh.zero_()
            # Near-uniform initial policy: tiny actor head, standard critic head.
            self.actor.weight.copy_(_xavier(rng, self.actor.weight.shape, hidden, NUM_ACTIONS, 0.01))
            self.actor.bias.zero_()
            self.critic.weight.copy_(_xavier(rng, self.critic.weight.shape, hidden, 1))
            self.critic.bias.zero_()

    def embed_prev_action(self, prev_action: torch.Tensor) -> torch.Tensor:
        """-1 (episode start) maps to the zero vector, other ids to the table."""
        emb = self.action_table(prev_action.clamp_min(0))
        return emb * (prev_action >= 0).unsqueeze(-1).to(emb.dtype)

    def policy_input(
        self, z_f: torch.Tensor, goal_onehot: torch.Tensor, prev_action: torch.Tensor
    ) -> torch.Tensor:
        return torch.cat([z_f, goal_onehot, self.embed_prev_action(prev_action)], dim=-1)

    def forward(self, x: torch.Tensor, h: torch.Tensor):
        h_next = self.gru(x, h)
        return self.actor(h_next), self.critic(h_next).squeeze(-1), h_next


def act(
    core: ActorCritic,
    x: torch.Tensor,
    h: torch.Tensor,
    rng: np.random.Generator | None = None,
    deterministic: bool = False,
):
    """Sample (or argmax) an action; returns (action, log_prob, value, h_next).

    Sampling consumes from the caller's numpy stream so schedules stay
    reproducible; log_prob is the log softmax probability of the action taken.
    """
    with torch.no_grad():
        logits, value, h_next = core(x, h)
        logp_all = F.log_softmax(logits, dim=-1)
    if deterministic:
        action = logits.argmax(dim=-1).numpy()
    else:
        probs = torch.softmax(logits, dim=-1).numpy().astype(np.float64)
        probs = probs / probs.sum(axis=-1, keepdims=True)
        action = np.array([rng.choice(NUM_ACTIONS, p=p) for p in probs], dtype=np.int64)
    logp = logp_all[torch.arange(len(action)), torch.from_numpy(action)]
    return action, logp.numpy(), value.numpy(), h_next


def gae(
    rewards: np.ndarray,
    values: np.ndarray,
    dones: np.ndarray,
    bootstrap_value: np.ndarray | float,
    gamma: float,
    lam: float,
):
    """Generalized advantage estimation over (T,) or (T, N) arrays.

    Returns raw (unnormalized) advantages and returns = advantages + values;
    normalization happens per update batch inside ppo_update.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    if not (rewards.shape == values.shape == dones.shape):
        raise ValueError("rewards/values/dones must share a shape")
    squeeze = rewards.ndim == 1
    if squeeze:
        rewards, values, dones = rewards[:, None], values[:, None], dones[:, None]
    t_len, n = rewards.shape
    boot = np.broadcast_to(np.asarray(bootstrap_value, dtype=np.float64), (n,))
    adv = np.zeros((t_len, n), dtype=np.float64)
    last = np.zeros(n, dtype=np.float64)
    next_value = boot
    for t in range(t_len - 1, -1, -1):
        not_done = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * not_done - values[t]
        last = delta + gamma * lam * not_done * last
        adv[t] = last
        next_value = values[t]
    ret = adv + values
    if squeeze:
        return adv[:, 0], ret[:, 0]
    return adv, ret


@dataclass
class RolloutBuffer:
    """Pre-fusion transition storage for one PPO update."""

    z_v: np.ndarray  # (T, N, d)
    z_t: np.ndarray | None  # (T, N, d) or None when the text prompt is dropped
    z_k: np.ndarray  # (T, N, K', d)
    goal: np.ndarray  # (T, N) int64
    prev_action: np.ndarray  # (T, N) int64, -1 at episode starts
    h_in: np.ndarray  # (T, N, hidden) hidden state entering each step
    actions: np.ndarray  # (T, N)
    log_probs: np.ndarray  # (T, N)
    values: np.ndarray  # (T, N)
    rewards: np.ndarray  # (T, N)
    dones: np.ndarray  # (T, N)

    @classmethod
    def allocate(cls, t_len: int, n: int, d: int, k: int, hidden: int, with_text: bool):
        return cls(
            z_v=np.zeros((t_len, n, d), dtype=np.float32),
            z_t=np.zeros((t_len, n, d), dtype=np.float32) if with_text else None,
            z_k=np.zeros((t_len, n, k, d), dtype=np.float32),
            goal=np.zeros((t_len, n), dtype=np.int64),
            prev_action=np.zeros((t_len, n), dtype=np.int64),
            h_in=np.zeros((t_len, n, hidden), dtype=np.float32),
            actions=np.zeros((t_len, n), dtype=np.int64),
            log_probs=np.zeros((t_len, n), dtype=np.float32),
            values=np.zeros((t_len, n), dtype=np.float32),
            rewards=np.zeros((t_len, n), dtype=np.float32),
            dones=np.zeros((t_len, n), dtype=np.float32),
        )

    @property
    def size(self) -> int:
        return self.rewards.shape[0] * self.rewards.shape[1]


def ppo_update(
    buffer: RolloutBuffer,
    core: ActorCritic,
    f_p: ProjectionNet,
    optimizer: torch.optim.Optimizer,
    cfg: dict,
    bootstrap_value: np.ndarray,
    fusion_mode: str = "dual",
    rng: np.random.Generator | None = None,
) -> dict:
    """Clipped-surrogate PPO over the buffer; fusion recomputed with gradient.

    Total loss = surrogate + value_coef * value MSE - entropy_coef * entropy.
    Advantages are normalized over the whole update batch. Aborts on NaN.
    """
    adv, ret = gae(
        buffer.rewards,
        buffer.values,
        buffer.dones,
        bootstrap_value,
        cfg["gamma"],
        cfg["gae_lambda"],
    )
    adv = (adv - adv.mean()) / (adv.std() + 1e-8)

    t_len, n = buffer.rewards.shape
    flat = lambda arr: torch.from_numpy(np.ascontiguousarray(arr.reshape(t_len * n, *arr.shape[2:])))
    z_v = flat(buffer.z_v)
    z_t = flat(buffer.z_t) if buffer.z_t is not None else None
    z_k = flat(buffer.z_k)
    goal = F.one_hot(flat(buffer.goal), NUM_CATEGORIES).float()
    prev_action = flat(buffer.prev_action)
    h_in = flat(buffer.h_in)
    old_logp = flat(buffer.log_probs).float()
    actions = flat(buffer.actions)
    adv_t = torch.from_numpy(adv.reshape(-1)).float()
    ret_t = torch.from_numpy(ret.reshape(-1)).float()

    total = t_len * n
    n_minibatches = cfg["minibatches"]
    mb_size = total // n_minibatches
    report = {"surrogate": 0.0, "value": 0.0, "entropy": 0.0, "count": 0}
    for _ in range(cfg["update_epochs"]):
        order = rng.permutation(total) if rng is not None else np.arange(total)
        for m in range(n_minibatches):
            idx = torch.from_numpy(order[m * mb_size : (m + 1) * mb_size])
            z_f, _ = orchestrate(
                z_v[idx], None if z_t is None else z_t[idx], z_k[idx], f_p, mode=fusion_mode
            )
            x = core.policy_input(z_f, goal[idx], prev_action[idx])
            logits, value, _ = core(x, h_in[idx])
            logp_all = F.log_softmax(logits, dim=-1)
            logp = logp_all.gather(1, actions[idx].unsqueeze(1)).squeeze(1)
            ratio = torch.exp(logp - old_logp[idx])
            a = adv_t[idx]
            surrogate = -torch.min(
                ratio * a, torch.clamp(ratio, 1.0 - cfg["clip"], 1.0 + cfg["clip"]) * a
            ).mean()
            value_loss = F.mse_loss(value, ret_t[idx])
            entropy = -(logp_all * logp_all.exp()).sum(dim=-1).mean()
            loss = surrogate + cfg["value_coef"] * value_loss - cfg["entropy_coef"] * entropy
            if not torch.isfinite(loss):
                raise RuntimeError(f"PPO loss is non-finite: {loss}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            report["surrogate"] += float(surrogate.detach())
            report["value"] += float(value_loss.detach())
            report["entropy"] += float(entropy.detach())
            report["count"] += 1
    for key in ("surrogate", "value", "entropy"):
        report[key] /= max(1, report["count"])
    return report


@dataclass
class EnvSlot:
    """One parallel environment's episode state."""

    rng: np.random.Generator
    scene_id: int = 0
    factor_id: int = 0
    goal: int = 0
    agent: AgentState | None = None
    d_prev: float = 0.0
    t: int = 0
    episode_return: float = 0.0
    path_length: float = 0.0
    start_geodesic: float = 0.0


class VecNavEnvs:
    """Fixed-order vector of navigation episodes over sampled domains."""

    def __init__(
        self,
        scenes: list[GridScene],
        factors: list[DomainFactor],
        n_envs: int,
        seed: int,
        min_start_geodesic: float,
        max_start_geodesic: float,
        max_steps: int = envsim.T_MAX,
        image_hw: int = envsim.DEFAULT_IMAGE_HW,
    ):
        self.scenes = scenes
        self.factors = factors
        self.max_steps = max_steps
        self.image_hw = image_hw
        self.min_g = min_start_geodesic
        self.max_g = max_start_geodesic
        self.slots = [
            EnvSlot(rng=np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 141, i]))))
            for i in range(n_envs)
        ]
        for slot in self.slots:
            self._reset(slot)

    def _reset(self, slot: EnvSlot):
        slot.scene_id = int(slot.rng.integers(0, len(self.scenes)))
        slot.factor_id = int(slot.rng.integers(0, len(self.factors)))
        scene = self.scenes[slot.scene_id]
        slot.goal = int(slot.rng.integers(0, NUM_CATEGORIES))
        slot.agent = envsim.sample_start(
            slot.rng,
            scene,
            self.factors[slot.factor_id],
            slot.goal,
            min_geodesic=self.min_g,
            max_geodesic=self.max_g,
            pitch_levels=(0,),
        )
        slot.d_prev = envsim.geodesic_distance(scene, slot.agent.position, slot.goal)
        slot.start_geodesic = slot.d_prev
        slot.t = 0
        slot.episode_return = 0.0
        slot.path_length = 0.0

    def observe(self) -> np.ndarray:
        return np.stack(
            [
                envsim.render(
                    self.scenes[s.scene_id], s.agent, self.factors[s.factor_id], self.image_hw
                )
                for s in self.slots
            ]
        )

    def goals(self) -> np.ndarray:
        return np.array([s.goal for s in self.slots], dtype=np.int64)

    def step(self, actions: np.ndarray):
        """Returns (rewards, dones, infos); auto-resets finished episodes."""
        rewards = np.zeros(len(self.slots), dtype=np.float32)
        dones = np.zeros(len(self.slots), dtype=np.float32)
        infos = []
        for i, slot in enumerate(self.slots):
            scene = self.scenes[slot.scene_id]
            before = slot.agent
            out = envsim.step(
                scene,
                slot.agent,
                int(actions[i]),
                self.factors[slot.factor_id],
                slot.goal,
                slot.d_prev,
                slot.t,
            )
            moved = math.hypot(out.next_agent.x - before.x, out.next_agent.y - before.y)
            slot.agent = out.next_agent
            slot.d_prev = out.geodesic
            slot.t += 1
            slot.episode_return += out.reward
            slot.path_length += moved
            rewards[i] = out.reward
            done = out.done or slot.t >= self.max_steps
            info = None
            if done:
                info = {
                    "return": slot.episode_return,
                    "length": slot.t,
                    "success": out.success,
                    "spl_opt": slot.start_geodesic,
                    "path": slot.path_length,
                    "final_geodesic": out.geodesic,
                    "final_euclidean": envsim.euclidean_goal_distance(
                        scene, slot.agent.position, slot.goal
                    ),
                    "factor_id": slot.factor_id,
                }
                self._reset(slot)
            dones[i] = 1.0 if done else 0.0
            infos.append(info)
        return rewards, dones, infos


class FeatureExtractor:
    """Maps observation batches to (z_v, z_t, z_k) under frozen weights."""

    def __init__(
        self,
        encoder: VisionEncoder,
        pool: PromptPool,
        include_text: bool = True,
        feature_noise_sigma: float = 0.0,
        noise_rng: np.random.Generator | None = None,
    ):
        self.encoder = encoder
        self.pool = pool
        self.include_text = include_text
        self.feature_noise_sigma = feature_noise_sigma
        self.noise_rng = noise_rng

    def __call__(self, obs: np.ndarray, training: bool = False):
        with torch.inference_mode():
            z_v, z_t, z_k = encode_observation_set(
                self.encoder, self.pool, obs, include_text=self.include_text
            )
            z_v = z_v.clone()
            z_t = z_t.clone() if z_t is not None else None
            z_k = z_k.clone()
        if training and self.feature_noise_sigma > 0.0 and self.noise_rng is not None:
            noise = self.noise_rng.standard_normal(z_k.shape) * self.feature_noise_sigma
            z_k = z_k + torch.from_numpy(noise.astype(np.float32))
        return z_v, z_t, z_k


def linear_lr(step: int, total: int, lr0: float, lr1: float) -> float:
    frac = min(1.0, step / max(1, total))
    return lr0 + (lr1 - lr0) * frac


def train_policy(
    scenes: list[GridScene],
    factors: list[DomainFactor],
    encoder: VisionEncoder,
    pool: PromptPool,
    cfg: dict,
    seed: int,
    fusion_mode: str = "dual",
    include_text: bool = True,
    feature_noise_sigma: float = 0.0,
    reward_log_path: str | Path | None = None,
) -> dict:
    """Adaptive-orchestration phase: freeze prompts, train f_p + policy jointly.

    Returns {"core", "f_p", "episodes": [(env_step, return, success), ...]}.
    """
    p_cfg = cfg["policy"]
    n_envs = p_cfg["envs"]
    t_len = p_cfg["rollout"]
    total_steps = p_cfg["total_steps"]
    encoder.freeze()
    pool.requires_grad_(False)

    core = ActorCritic(
        feat_dim=encoder.out_dim,
        hidden=p_cfg["hidden"],
        action_embed=p_cfg["action_embed"],
        seed=seed,
    )
    f_p = ProjectionNet(out_dim=encoder.out_dim, seed=seed)
    optimizer = torch.optim.Adam(list(core.parameters()) + list(f_p.parameters()), lr=p_cfg["lr"])

    envs = VecNavEnvs(
        scenes,
        factors,
        n_envs,
        seed,
        p_cfg["min_start_geodesic"],
        p_cfg["max_start_geodesic"],
        max_steps=p_cfg.get("train_max_steps", envsim.T_MAX),
    )
    extractor = FeatureExtractor(
        encoder,
        pool,
        include_text=include_text,
        feature_noise_sigma=feature_noise_sigma,
        noise_rng=np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 151]))),
    )
    update_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 152])))

    k_domain = len(pool.domain_ids)
    with_text = include_text and pool.text_id is not None
    h = torch.zeros(n_envs, p_cfg["hidden"])
    prev_action = np.full(n_envs, -1, dtype=np.int64)

    episodes = []
    env_step = 0
    n_updates = max(1, total_steps // (n_envs * t_len))
    for update in range(n_updates):
        buffer = RolloutBuffer.allocate(
            t_len, n_envs, encoder.out_dim, k_domain, p_cfg["hidden"], with_text
        )
        for t in range(t_len):
            obs = envs.observe()
            z_v, z_t, z_k = extractor(obs, training=True)
            with torch.no_grad():
                z_f, _ = orchestrate(z_v, z_t, z_k, f_p, mode=fusion_mode)
                goal_onehot = F.one_hot(
                    torch.from_numpy(envs.goals()), NUM_CATEGORIES
                ).float()
                x = core.policy_input(z_f, goal_onehot, torch.from_numpy(prev_action))
            buffer.h_in[t] = h.numpy()
            actions = np.zeros(n_envs, dtype=np.int64)
            logps = np.zeros(n_envs, dtype=np.float32)
            values = np.zeros(n_envs, dtype=np.float32)
            with torch.no_grad():
                logits, value, h_next = core(x, h)
                logp_all = F.log_softmax(logits, dim=-1)
            probs = torch.softmax(logits, dim=-1).numpy().astype(np.float64)
            for i, slot in enumerate(envs.slots):
                p = probs[i] / probs[i].sum()
                actions[i] = slot.rng.choice(NUM_ACTIONS, p=p)
            logps = (
                logp_all[torch.arange(n_envs), torch.from_numpy(actions)].numpy().astype(np.float32)
            )
            values = value.numpy().astype(np.float32)
            rewards, dones, infos = envs.step(actions)

            buffer.z_v[t] = z_v.numpy()
            if with_text:
                buffer.z_t[t] = z_t.numpy()
            buffer.z_k[t] = z_k.numpy()
            buffer.goal[t] = goal_onehot.argmax(dim=-1).numpy()
            buffer.prev_action[t] = prev_action
            buffer.actions[t] = actions
            buffer.log_probs[t] = logps
            buffer.values[t] = values
            buffer.rewards[t] = rewards
            buffer.dones[t] = dones

            done_mask = torch.from_numpy(dones).bool()
            h = h_next * (~done_mask).unsqueeze(-1).float()
            prev_action = np.where(dones > 0, -1, actions)
            env_step += n_envs
            for info in infos:
                if info is not None:
                    episodes.append(
                        {
                            "env_step": env_step,
                            "return": info["return"],
                            "success": bool(info["success"]),
                            "length": info["length"],
                        }
                    )

        # Bootstrap value for the state following the last stored transition.
        obs = envs.observe()
        z_v, z_t, z_k = extractor(obs, training=True)
        with torch.no_grad():
            z_f, _ = orchestrate(z_v, z_t, z_k, f_p, mode=fusion_mode)
            goal_onehot = F.one_hot(torch.from_numpy(envs.goals()), NUM_CATEGORIES).float()
            x = core.policy_input(z_f, goal_onehot, torch.from_numpy(prev_action))
            _, boot_value, _ = core(x, h)
        lr = linear_lr(env_step, total_steps, p_cfg["lr"], p_cfg["lr_final"])
        for g in optimizer.param_groups:
            g["lr"] = lr
        ppo_update(
            buffer,
            core,
            f_p,
            optimizer,
            p_cfg,
            boot_value.numpy(),
            fusion_mode=fusion_mode,
            rng=update_rng,
        )

    if reward_log_path is not None:
        write_reward_curve(episodes, reward_log_path, p_cfg["log_every_steps"])
    return {"core": core, "f_p": f_p, "episodes": episodes}


def write_reward_curve(episodes: list[dict], path: str | Path, window_steps: int):
    """CSV of (env_steps, mean episodic reward, std) over fixed step windows."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["env_steps", "mean_episodic_reward", "std_episodic_reward"])
        if not episodes:
            return
        limit = episodes[-1]["env_step"]
        start = 0
        while start < limit:
            end = start + window_steps
            returns = [e["return"] for e in episodes if start < e["env_step"] <= end]
            if returns:
                writer.writerow(
                    [end, float(np.mean(returns)), float(np.std(returns))]
                )
            start = end
