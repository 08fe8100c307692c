"""Metrics, domain-split evaluation, ablation variants, and the gap probe.

SR/SPL/NE/EL follow the usual object-goal conventions (success weighted by
path length against the start-time shortest path). The approximation-gap
probe measures how far a target vector sits from the convex hull of the
domain-prompted embeddings via projected gradient descent on the simplex.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import envsim
from .encoder import PromptPool, VisionEncoder, encode_observation_set
from .envsim import NUM_CATEGORIES, DomainFactor, GridScene
from .orchestrator import ProjectionNet, orchestrate
from .policy import ActorCritic, FeatureExtractor


@dataclass
class EpisodeRecord:
    success: bool
    optimal_geodesic: float
    path_length: float
    final_distance: float
    steps: int

    @property
    def spl(self) -> float:
        if not self.success:
            return 0.0
        return self.optimal_geodesic / max(self.optimal_geodesic, self.path_length)


def summarize_episodes(records: list[EpisodeRecord]) -> dict:
    if not records:
        raise ValueError("no episodes to summarize")
    return {
        "SR": 100.0 * float(np.mean([r.success for r in records])),
        "SPL": float(np.mean([r.spl for r in records])),
        "NE": float(np.mean([r.final_distance for r in records])),
        "EL": float(np.mean([r.steps for r in records])),
        "episodes": len(records),
    }


# ---------------------------------------------------------------------------
# Simplex solver and approximation-gap probe
# ---------------------------------------------------------------------------


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sorting algorithm)."""
    v = np.asarray(v, dtype=np.float64)
    n = v.size
    u = np.sort(v)[::-1]
    css = np.cumsum(u)
    rho_candidates = u + (1.0 - css) / np.arange(1, n + 1)
    rho = np.nonzero(rho_candidates > 0)[0][-1]
    tau = (css[rho] - 1.0) / (rho + 1.0)
    return np.maximum(v - tau, 0.0)


@dataclass
class GapProbeResult:
    alpha: np.ndarray
    residual: float
    converged: bool
    iterations: int


def _warm_start(z: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Sum-to-one least squares projected to the simplex (PGD initializer).

    Solves min ||z^T a - y|| subject to sum(a) = 1 via its KKT system; any
    numerical failure falls back to the uniform weights.
    """
    k = z.shape[0]
    try:
        kkt = np.zeros((k + 1, k + 1))
        kkt[:k, :k] = 2.0 * z @ z.T
        kkt[:k, k] = 1.0
        kkt[k, :k] = 1.0
        rhs = np.concatenate([2.0 * z @ y, [1.0]])
        sol, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
        alpha = sol[:k]
        if not np.all(np.isfinite(alpha)):
            raise np.linalg.LinAlgError
        return project_simplex(alpha)
    except np.linalg.LinAlgError:
        return np.full(k, 1.0 / k)


def simplex_residual(
    z_k: np.ndarray,
    target: np.ndarray,
    iterations: int = 1000,
    step: float | None = None,
    movement_tol: float = 1e-10,
) -> GapProbeResult:
    """min over alpha in the simplex of || z_k^T alpha - target ||_2.

    Projected gradient descent with fixed step 0.1 / K', warm-started from
    the sum-constrained least-squares solution projected to the simplex;
    stops early when the iterate moves less than `movement_tol`. A
    non-convergence flag is reported but the result is still returned.
    """
    z = np.asarray(z_k, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    k = z.shape[0]
    if k < 1:
        raise ValueError("need at least one prompt embedding")
    if step is None:
        step = 0.1 / k
    alpha = _warm_start(z, y)
    converged = False
    it = 0
    for it in range(1, iterations + 1):
        grad = 2.0 * z @ (z.T @ alpha - y)
        nxt = project_simplex(alpha - step * grad)
        move = float(np.abs(nxt - alpha).max())
        alpha = nxt
        if move < movement_tol:
            converged = True
            break
    residual = float(np.linalg.norm(z.T @ alpha - y))
    return GapProbeResult(alpha=alpha, residual=residual, converged=converged, iterations=it)


def approximation_gap(
    z_v: np.ndarray, z_k: np.ndarray, z_star: np.ndarray, iterations: int = 1000
) -> GapProbeResult:
    """Distance from (z_star - z_v) to the convex hull of the prompt embeddings."""
    z_v = np.asarray(z_v, dtype=np.float64)
    z_star = np.asarray(z_star, dtype=np.float64)
    return simplex_residual(np.asarray(z_k, dtype=np.float64), z_star - z_v, iterations=iterations)


# ---------------------------------------------------------------------------
# Policy evaluation over domain splits
# ---------------------------------------------------------------------------


def run_episode(
    scene: GridScene,
    factor: DomainFactor,
    goal: int,
    start,
    core: ActorCritic,
    f_p: ProjectionNet,
    extractor: FeatureExtractor,
    fusion_mode: str = "dual",
    max_steps: int = 500,
    alpha_trace: list | None = None,
) -> EpisodeRecord:
    """Deterministic-mode episode; optionally records per-step fusion weights."""
    agent = start
    d_prev = envsim.geodesic_distance(scene, agent.position, goal)
    d_opt = d_prev
    h = torch.zeros(1, core.hidden)
    prev_action = torch.full((1,), -1, dtype=torch.int64)
    goal_onehot = F.one_hot(torch.tensor([goal]), NUM_CATEGORIES).float()
    path = 0.0
    steps = 0
    success = False
    for t in range(max_steps):
        obs = envsim.render(scene, agent, factor, extractor.encoder.image_hw)[None]
        z_v, z_t, z_k = extractor(obs)
        with torch.no_grad():
            z_f, alpha = orchestrate(z_v, z_t, z_k, f_p, mode=fusion_mode)
            x = core.policy_input(z_f, goal_onehot, prev_action)
            logits, _, h = core(x, h)
        if alpha_trace is not None:
            alpha_trace.append([t] + [float(a) for a in alpha[0]])
        action = int(logits.argmax(dim=-1))
        out = envsim.step(scene, agent, action, factor, goal, d_prev, t)
        path += math.hypot(out.next_agent.x - agent.x, out.next_agent.y - agent.y)
        agent = out.next_agent
        d_prev = out.geodesic
        prev_action = torch.tensor([action], dtype=torch.int64)
        steps += 1
        if out.done:
            success = out.success
            break
    return EpisodeRecord(
        success=success,
        optimal_geodesic=d_opt,
        path_length=path,
        final_distance=envsim.euclidean_goal_distance(scene, agent.position, goal),
        steps=steps,
    )


def evaluate(
    core: ActorCritic,
    f_p: ProjectionNet,
    extractor: FeatureExtractor,
    scenes: list[GridScene],
    split: dict[str, list[DomainFactor]],
    episodes_per_domain: int,
    seed: int,
    fusion_mode: str = "dual",
    max_steps: int = 500,
    min_start_geodesic: float = 1.25,
    max_start_geodesic: float = 4.0,
) -> dict:
    """Per-split SR/SPL/NE/EL for one evaluation seed.

    Episode sampling streams are keyed by (seed, split, domain, episode), so
    results are bit-reproducible given (checkpoint, split, seed).
    """
    report = {}
    for split_idx, (split_name, factors) in enumerate(sorted(split.items())):
        if not factors:
            raise ValueError(f"split {split_name!r} is empty")
        records = []
        for di, factor in enumerate(factors):
            for ep in range(episodes_per_domain):
                rng = np.random.Generator(
                    np.random.PCG64(np.random.SeedSequence([seed, 161, split_idx, di, ep]))
                )
                scene = scenes[int(rng.integers(0, len(scenes)))]
                goal = int(rng.integers(0, NUM_CATEGORIES))
                start = envsim.sample_start(
                    rng,
                    scene,
                    factor,
                    goal,
                    min_geodesic=min_start_geodesic,
                    max_geodesic=max_start_geodesic,
                    pitch_levels=(0,),
                )
                records.append(
                    run_episode(
                        scene,
                        factor,
                        goal,
                        start,
                        core,
                        f_p,
                        extractor,
                        fusion_mode=fusion_mode,
                        max_steps=max_steps,
                    )
                )
        report[split_name] = summarize_episodes(records)
    return report


def aggregate_seed_reports(reports: list[dict]) -> dict:
    """mean/std/per-seed for each metric of each split across seed reports."""
    out = {}
    for split_name in reports[0]:
        out[split_name] = {}
        for metric in ("SR", "SPL", "NE", "EL"):
            vals = [r[split_name][metric] for r in reports]
            out[split_name][metric] = {
                "mean": float(np.mean(vals)),
                "std": float(np.std(vals)),
                "per_seed": [float(v) for v in vals],
            }
    return out


# ---------------------------------------------------------------------------
# Embedding export and prompt-separation statistics
# ---------------------------------------------------------------------------


def export_embeddings(
    encoder: VisionEncoder,
    pool: PromptPool,
    frames: np.ndarray,
    factor_ids: np.ndarray,
    path: str | Path,
) -> int:
    """CSV rows (factor_id, prompt_id, e0..e{d-1}), one per frame x prompt."""
    n_prompts = len(pool)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(
            ["factor_id", "prompt_id"] + [f"e{i}" for i in range(encoder.out_dim)]
        )
        rows = 0
        for start in range(0, len(frames), 64):
            chunk = frames[start : start + 64]
            fids = factor_ids[start : start + 64]
            with torch.inference_mode():
                z_v, z_t, z_k = encode_observation_set(encoder, pool, chunk, include_text=True)
            stacked = torch.cat([z_k, z_t.unsqueeze(1)], dim=1) if z_t is not None else z_k
            for bi in range(len(chunk)):
                for pi in range(n_prompts):
                    writer.writerow(
                        [int(fids[bi]), pi] + [f"{float(v):.8f}" for v in stacked[bi, pi]]
                    )
                    rows += 1
    return rows


def prompt_separation(
    encoder: VisionEncoder, pool: PromptPool, frames: np.ndarray
) -> dict:
    """Within-prompt vs across-prompt mean pairwise cosine over frames."""
    with torch.inference_mode():
        zs = []
        for start in range(0, len(frames), 64):
            z_v, z_t, z_k = encode_observation_set(
                encoder, pool, frames[start : start + 64], include_text=True
            )
            stacked = torch.cat([z_k, z_t.unsqueeze(1)], dim=1) if z_t is not None else z_k
            zs.append(stacked)
        z = torch.cat(zs).numpy().astype(np.float64)  # (N, K, d), unit rows
    n, k, _ = z.shape
    within = []
    for pi in range(k):
        g = z[:, pi] @ z[:, pi].T
        within.append((g.sum() - np.trace(g)) / (n * n - n))
    across = []
    for pi in range(k):
        for pj in range(k):
            if pi != pj:
                across.append(float(np.mean(z[:, pi] @ z[:, pj].T)))
    return {
        "within_mean_cosine": float(np.mean(within)),
        "across_mean_cosine": float(np.mean(across)),
        "margin": float(np.mean(within) - np.mean(across)),
    }


ABLATION_VARIANTS = (
    "full",
    "w/o-visual",
    "w/o-action",
    "w/o-text",
    "avg-fusion",
    "att-only",
    "cos-only",
    "reg-only",
)


def variant_settings(variant: str) -> dict:
    """Training/fusion switches for a named ablation variant.

    Pool-size (K2..K12), prompt-length (L4..L24), and noise (sigma0.0 etc.)
    sweeps are encoded as parametric variants.
    """
    if variant in ("full", "w/o-visual", "w/o-action", "w/o-text"):
        branches = ("visual", "action", "text")
        if variant != "full":
            branches = tuple(b for b in branches if b != variant.split("-")[1])
        return {"branches": branches, "fusion_mode": "dual", "include_text": True,
                "reg_only": False}
    if variant in ("avg-fusion", "att-only", "cos-only"):
        mode = {"avg-fusion": "avg", "att-only": "att", "cos-only": "cos"}[variant]
        return {"branches": ("visual", "action", "text"), "fusion_mode": mode,
                "include_text": True, "reg_only": False}
    if variant == "reg-only":
        return {"branches": ("visual", "action"), "fusion_mode": "dual",
                "include_text": False, "reg_only": True}
    if variant.startswith("K"):
        pool = int(variant[1:])
        return {"branches": ("visual", "action", "text"), "fusion_mode": "dual",
                "include_text": True, "reg_only": False, "pool": pool}
    if variant.startswith("L"):
        length = int(variant[1:])
        return {"branches": ("visual", "action", "text"), "fusion_mode": "dual",
                "include_text": True, "reg_only": False, "length": length}
    if variant.startswith("sigma"):
        sigma = float(variant[5:])
        return {"branches": ("visual", "action", "text"), "fusion_mode": "dual",
                "include_text": True, "reg_only": False, "sigma": sigma}
    raise ValueError(f"unknown ablation variant {variant!r}")


def run_ablation(variant: str, cfg: dict, workdir: str | Path) -> dict:
    """Train and evaluate one ablation variant under the config's seeds.

    Delegates to the pipeline runner; identical dataset, backbone, scenes,
    and seeds are reused across variants so orderings are comparable.
    """
    from . import pipeline

    return pipeline.run_ablation_variant(variant, cfg, workdir)


def save_metrics(report: dict, path: str | Path):
    Path(path).write_text(json.dumps(report, sort_keys=True, indent=2))


def write_ablation_summary(ablations_dir: str | Path, path: str | Path | None = None) -> Path:
    """Sweep summary CSV over every evaluated variant directory."""
    ablations_dir = Path(ablations_dir)
    path = Path(path) if path is not None else ablations_dir / "summary.csv"
    rows = []
    for vdir in sorted(ablations_dir.iterdir()) if ablations_dir.exists() else []:
        metrics = vdir / "metrics" / "evaluate.json"
        if not metrics.is_file():
            continue
        report = json.loads(metrics.read_text())
        for split in ("source", "seen", "unseen"):
            if split not in report:
                continue
            row = {"variant": report.get("variant", vdir.name), "split": split}
            for metric in ("SR", "SPL", "NE", "EL"):
                row[f"{metric}_mean"] = report[split][metric]["mean"]
                row[f"{metric}_std"] = report[split][metric]["std"]
            rows.append(row)
    if rows:
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
    return path
