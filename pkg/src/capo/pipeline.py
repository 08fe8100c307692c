"""Run orchestration: scenes, domain splits, and the four training phases.

Every phase reads/writes artifacts under the config's output directory and
embeds the config digest plus the upstream checkpoint digests, so later
phases can refuse mismatched inputs. Phase ordering is enforced by loaders
raising MissingArtifactError when a prerequisite file is absent.
"""

from __future__ import annotations

import copy
import json
import logging
from pathlib import Path

import numpy as np
import torch

from . import envsim, evalkit, expert_data, policy as policy_mod, prompt_learning
from .checkpoint import digest_tensors, load_archive, module_digest, save_archive
from .config import config_digest
from .encoder import (
    DEFAULT_ROLES,
    PromptPool,
    VisionEncoder,
    pretrain_backbone,
    roles_for_pool_size,
    text_anchor_basis,
)
from .envsim import (
    FOV_DEGREES,
    LOOK_STEPS,
    ROTATION_STEPS,
    TRANSLATION_STEPS,
    DomainFactor,
    GridScene,
)
from .policy import FeatureExtractor

log = logging.getLogger("capo")


class MissingArtifactError(FileNotFoundError):
    """A phase prerequisite has not been produced yet."""


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(f"missing {path}; run `{hint}` first")
    return path


def out_dir(cfg: dict) -> Path:
    return Path(cfg["out"])


def sample_domain_factor(rng: np.random.Generator) -> DomainFactor:
    return DomainFactor(
        fov_group=list(FOV_DEGREES)[int(rng.integers(0, 3))],
        rotation_step=float(ROTATION_STEPS[int(rng.integers(0, len(ROTATION_STEPS)))]),
        look_step=float(LOOK_STEPS[int(rng.integers(0, len(LOOK_STEPS)))]),
        translation_step=float(TRANSLATION_STEPS[int(rng.integers(0, len(TRANSLATION_STEPS)))]),
        brightness=float(np.round(rng.uniform(0.5, 1.5), 4)),
        contrast=float(np.round(rng.uniform(0.5, 1.5), 4)),
        saturation=float(np.round(rng.uniform(0.0, 2.0), 4)),
        hue_shift=float(np.round(rng.uniform(-0.1, 0.1), 4)),
    )


def build_world(cfg: dict) -> dict:
    """Scenes plus source/seen/unseen factor splits; idempotent per config."""
    root = out_dir(cfg)
    root.mkdir(parents=True, exist_ok=True)
    digest = config_digest(cfg)
    scenes_path = root / "scenes.json"
    splits_path = root / "splits.json"
    if scenes_path.exists() and splits_path.exists():
        payload = json.loads(splits_path.read_text())
        if payload.get("config_digest") == digest:
            scenes = [GridScene.from_dict(d) for d in json.loads(scenes_path.read_text())]
            splits = {
                name: [DomainFactor.from_dict(f) for f in payload[name]]
                for name in ("source", "seen", "unseen")
            }
            return {"scenes": scenes, "splits": splits}

    seed = cfg["seed"]
    s_cfg = cfg["scene"]
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 201])))
    scenes = [
        envsim.generate_scene(
            rng, width=s_cfg["width"], height=s_cfg["height"], wall_segments=s_cfg["wall_segments"]
        )
        for _ in range(s_cfg["count"])
    ]
    d_cfg = cfg["domains"]
    frng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 202])))
    source = [DomainFactor.reference()] + [
        sample_domain_factor(frng) for _ in range(d_cfg["n_source"] - 1)
    ]
    seen = [sample_domain_factor(frng) for _ in range(d_cfg["n_seen"])]
    unseen = [sample_domain_factor(frng) for _ in range(d_cfg["n_unseen"])]
    splits = {"source": source, "seen": seen, "unseen": unseen}

    scenes_path.write_text(json.dumps([s.to_dict() for s in scenes]))
    payload = {name: [f.to_dict() for f in factors] for name, factors in splits.items()}
    payload["config_digest"] = digest
    splits_path.write_text(json.dumps(payload))
    return {"scenes": scenes, "splits": splits}


def load_world(cfg: dict) -> dict:
    root = out_dir(cfg)
    _require(root / "scenes.json", "capo collect")
    _require(root / "splits.json", "capo collect")
    scenes = [GridScene.from_dict(d) for d in json.loads((root / "scenes.json").read_text())]
    payload = json.loads((root / "splits.json").read_text())
    splits = {
        name: [DomainFactor.from_dict(f) for f in payload[name]]
        for name in ("source", "seen", "unseen")
    }
    return {"scenes": scenes, "splits": splits}


def run_collect(cfg: dict) -> dict:
    """Expert dataset over source + seen factors (unseen stays unseen)."""
    world = build_world(cfg)
    d_cfg = cfg["dataset"]
    factors = world["splits"]["source"] + world["splits"]["seen"]
    manifest = expert_data.collect_and_align(
        world["scenes"],
        factors,
        n_per_factor=d_cfg["episodes_per_factor"],
        kappa=d_cfg["kappa"],
        seed=cfg["seed"],
        hw=cfg["scene"]["image_hw"],
        min_start_geodesic=d_cfg["min_start_geodesic"],
    )
    root = out_dir(cfg)
    expert_data.save_dataset(manifest, root / "dataset")
    stats = {
        "trajectories": manifest.n_trajectories,
        "samples": manifest.n_samples,
        "alignment_pairs": len(manifest.pairs),
        "factors": len(factors),
        "config_digest": config_digest(cfg),
    }
    (root / "dataset" / "stats.json").write_text(json.dumps(stats, sort_keys=True))
    log.info("collected %s", stats)
    return stats


def load_dataset(cfg: dict):
    root = out_dir(cfg)
    _require(root / "dataset" / "dataset.json", "capo collect")
    return expert_data.load_dataset(root / "dataset")


def run_pretrain_backbone(cfg: dict) -> dict:
    dataset = load_dataset(cfg)
    b_cfg = cfg["backbone"]
    enc, report = pretrain_backbone(
        dataset,
        seed=cfg["seed"],
        image_hw=cfg["scene"]["image_hw"],
        patch=b_cfg["patch"],
        dim=b_cfg["dim"],
        layers=b_cfg["layers"],
        heads=b_cfg["heads"],
        out_dim=b_cfg["out_dim"],
        epochs=b_cfg["epochs"],
        batch=b_cfg["batch"],
        lr=b_cfg["lr"],
        max_frames=b_cfg["max_frames"],
        holdout_fraction=cfg["dataset"]["holdout_fraction"],
    )
    ck_dir = out_dir(cfg) / "checkpoints"
    ck_dir.mkdir(parents=True, exist_ok=True)
    meta = {
        "config_digest": config_digest(cfg),
        "encoder_digest": module_digest(enc),
        "report": report,
    }
    save_archive(ck_dir / "backbone.nt", dict(enc.state_dict()), meta)
    log.info("backbone pretrained: %s", report)
    return meta


def load_backbone(cfg: dict) -> tuple[VisionEncoder, dict]:
    path = _require(out_dir(cfg) / "checkpoints" / "backbone.nt", "capo pretrain-backbone")
    b_cfg = cfg["backbone"]
    enc = VisionEncoder(
        image_hw=cfg["scene"]["image_hw"],
        patch=b_cfg["patch"],
        dim=b_cfg["dim"],
        layers=b_cfg["layers"],
        heads=b_cfg["heads"],
        out_dim=b_cfg["out_dim"],
        seed=cfg["seed"],
    )
    tensors, meta = load_archive(path)
    enc.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
    enc.freeze()
    return enc, meta


def _pool_for(cfg: dict, settings: dict, seed: int) -> PromptPool:
    pool_size = settings.get("pool", cfg["prompts"]["pool"])
    length = settings.get("length", cfg["prompts"]["length"])
    roles = DEFAULT_ROLES if pool_size == 10 else roles_for_pool_size(pool_size)
    if settings.get("reg_only"):
        roles = tuple(r for r in roles if r != "text")
    return PromptPool(
        roles=roles,
        length=length,
        embed_dim=cfg["prompts"]["embed_dim"],
        hidden_dim=cfg["backbone"]["dim"],
        seed=seed,
        projection_gain=cfg["prompts"]["projection_gain"],
    )


def run_train_prompts(cfg: dict, variant: str = "full", workdir: Path | None = None) -> dict:
    dataset = load_dataset(cfg)
    enc, backbone_meta = load_backbone(cfg)
    settings = evalkit.variant_settings(variant)
    train_cfg = copy.deepcopy(cfg)
    if "sigma" in settings:
        train_cfg["prompt_training"]["sigma"] = settings["sigma"]
    seed = cfg["seed"]
    pool = _pool_for(cfg, settings, seed)
    anchors = torch.from_numpy(
        text_anchor_basis(seed, dim=enc.out_dim).astype(np.float32)
    )
    root = workdir or out_dir(cfg)
    logs = root / "logs"
    logs.mkdir(parents=True, exist_ok=True)
    report = prompt_learning.train_prompts(
        dataset,
        enc,
        pool,
        anchors,
        train_cfg,
        seed=seed,
        branches=settings["branches"],
        log_path=logs / "prompt_training.jsonl",
        holdout_fraction=cfg["dataset"]["holdout_fraction"],
        reg_only_noise=settings["reg_only"],
    )
    ck_dir = root / "checkpoints"
    ck_dir.mkdir(parents=True, exist_ok=True)
    meta = {
        "config_digest": config_digest(cfg),
        "encoder_digest": module_digest(enc),
        "prompt_digest": module_digest(pool),
        "variant": variant,
        "roles": list(pool.roles),
        "report": {k: v for k, v in report.items() if k != "holdout_idx"},
        "holdout_idx": report["holdout_idx"],
    }
    save_archive(ck_dir / "prompts.nt", dict(pool.state_dict()), meta)
    log.info("prompts trained (%s): %s", variant, report["final_losses"])
    return meta


def load_prompts(cfg: dict, enc: VisionEncoder, workdir: Path | None = None):
    root = workdir or out_dir(cfg)
    path = _require(root / "checkpoints" / "prompts.nt", "capo train-prompts")
    tensors, meta = load_archive(path)
    if meta["encoder_digest"] != module_digest(enc):
        raise RuntimeError(
            "prompt checkpoint was trained against a different encoder "
            f"({meta['encoder_digest'][:12]} != {module_digest(enc)[:12]})"
        )
    roles = tuple(meta["roles"])
    length = tensors[next(k for k in tensors if k.endswith(".tokens"))].shape[0]
    pool = PromptPool(
        roles=roles,
        length=length,
        embed_dim=cfg["prompts"]["embed_dim"],
        hidden_dim=cfg["backbone"]["dim"],
        seed=cfg["seed"],
    )
    pool.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
    pool.requires_grad_(False)
    return pool, meta


def run_train_policy(
    cfg: dict, variant: str = "full", workdir: Path | None = None, seeds: list[int] | None = None
) -> dict:
    world = load_world(cfg)
    enc, _ = load_backbone(cfg)
    pool, prompt_meta = load_prompts(cfg, enc, workdir)
    settings = evalkit.variant_settings(variant)
    root = workdir or out_dir(cfg)
    ck_dir = root / "checkpoints"
    logs = root / "logs"
    ck_dir.mkdir(parents=True, exist_ok=True)
    logs.mkdir(parents=True, exist_ok=True)
    seeds = seeds if seeds is not None else cfg["eval"]["seeds"]
    sigma = cfg["prompt_training"]["sigma"] if settings["reg_only"] else 0.0
    out_meta = {}
    for seed in seeds:
        result = policy_mod.train_policy(
            world["scenes"],
            world["splits"]["source"],
            enc,
            pool,
            cfg,
            seed=seed,
            fusion_mode=settings["fusion_mode"],
            include_text=settings["include_text"],
            feature_noise_sigma=sigma,
            reward_log_path=logs / f"reward_seed{seed}.csv",
        )
        state = {f"core.{k}": v for k, v in result["core"].state_dict().items()}
        state.update({f"f_p.{k}": v for k, v in result["f_p"].state_dict().items()})
        meta = {
            "config_digest": config_digest(cfg),
            "encoder_digest": module_digest(enc),
            "prompt_digest": module_digest(pool),
            "variant": variant,
            "fusion_mode": settings["fusion_mode"],
            "include_text": settings["include_text"],
            "seed": seed,
            "episodes": len(result["episodes"]),
        }
        save_archive(ck_dir / f"policy_seed{seed}.nt", state, meta)
        (logs / f"episodes_seed{seed}.json").write_text(json.dumps(result["episodes"]))
        out_meta[str(seed)] = meta
        log.info("policy trained (%s, seed %d): %d episodes", variant, seed, len(result["episodes"]))
    return out_meta


def load_policy(cfg: dict, enc: VisionEncoder, pool: PromptPool, seed: int, workdir: Path | None = None):
    from .orchestrator import ProjectionNet
    from .policy import ActorCritic

    root = workdir or out_dir(cfg)
    path = _require(root / "checkpoints" / f"policy_seed{seed}.nt", "capo train-policy")
    tensors, meta = load_archive(path)
    if meta["prompt_digest"] != module_digest(pool):
        raise RuntimeError("policy checkpoint was trained against different prompts")
    if meta["encoder_digest"] != module_digest(enc):
        raise RuntimeError("policy checkpoint was trained against a different encoder")
    core = ActorCritic(
        feat_dim=enc.out_dim,
        hidden=cfg["policy"]["hidden"],
        action_embed=cfg["policy"]["action_embed"],
        seed=seed,
    )
    f_p = ProjectionNet(out_dim=enc.out_dim, seed=seed)
    core.load_state_dict(
        {k[len("core.") :]: torch.from_numpy(v) for k, v in tensors.items() if k.startswith("core.")}
    )
    f_p.load_state_dict(
        {k[len("f_p.") :]: torch.from_numpy(v) for k, v in tensors.items() if k.startswith("f_p.")}
    )
    core.eval()
    f_p.eval()
    return core, f_p, meta


def run_evaluate(cfg: dict, variant: str = "full", workdir: Path | None = None) -> dict:
    world = load_world(cfg)
    enc, _ = load_backbone(cfg)
    pool, _ = load_prompts(cfg, enc, workdir)
    settings = evalkit.variant_settings(variant)
    root = workdir or out_dir(cfg)
    reports = []
    for seed in cfg["eval"]["seeds"]:
        core, f_p, meta = load_policy(cfg, enc, pool, seed, workdir)
        extractor = FeatureExtractor(enc, pool, include_text=settings["include_text"])
        reports.append(
            evalkit.evaluate(
                core,
                f_p,
                extractor,
                world["scenes"],
                world["splits"],
                cfg["eval"]["episodes_per_domain"],
                seed=seed,
                fusion_mode=meta["fusion_mode"],
                max_steps=cfg["eval"]["max_steps"],
                min_start_geodesic=cfg["policy"]["min_start_geodesic"],
                max_start_geodesic=cfg["policy"]["max_start_geodesic"],
            )
        )
    aggregate = evalkit.aggregate_seed_reports(reports)
    aggregate["config_digest"] = config_digest(cfg)
    aggregate["variant"] = variant
    metrics_dir = root / "metrics"
    metrics_dir.mkdir(parents=True, exist_ok=True)
    evalkit.save_metrics(aggregate, metrics_dir / "evaluate.json")
    log.info("evaluated %s: %s", variant, {k: v["SR"]["mean"] for k, v in aggregate.items() if isinstance(v, dict) and "SR" in v})
    return aggregate


def _prompt_training_matches_full(variant: str) -> bool:
    """True when the variant's prompt-learning phase is identical to full's
    (fusion-only ablations), so the parent prompts checkpoint can be reused."""
    settings = evalkit.variant_settings(variant)
    return (
        settings["branches"] == ("visual", "action", "text")
        and not settings["reg_only"]
        and "pool" not in settings
        and "length" not in settings
        and "sigma" not in settings
    )


def run_ablation_variant(variant: str, cfg: dict, workdir: str | Path | None = None) -> dict:
    """Prompt training (base seed) + policy training/eval per ablation seed.

    Fusion-only variants (full / avg-fusion / att-only / cos-only) reuse the
    parent run's prompts checkpoint when present: their prompt training is
    bit-identical, so retraining would only burn time.
    """
    evalkit.variant_settings(variant)  # validates the name
    parent_prompts = out_dir(cfg) / "checkpoints" / "prompts.nt"
    cfg = copy.deepcopy(cfg)
    cfg["policy"]["total_steps"] = cfg["ablation"]["total_steps"]
    cfg["eval"]["seeds"] = cfg["ablation"]["seeds"]
    safe = variant.replace("/", "_")
    root = Path(workdir) if workdir is not None else out_dir(cfg) / "ablations" / safe
    root.mkdir(parents=True, exist_ok=True)
    reused = False
    if _prompt_training_matches_full(variant) and parent_prompts.exists():
        tensors, meta = load_archive(parent_prompts)
        if meta.get("variant") == "full":
            (root / "checkpoints").mkdir(parents=True, exist_ok=True)
            (root / "checkpoints" / "prompts.nt").write_bytes(parent_prompts.read_bytes())
            reused = True
    if not reused:
        run_train_prompts(cfg, variant=variant, workdir=root)
    run_train_policy(cfg, variant=variant, workdir=root)
    report = run_evaluate(cfg, variant=variant, workdir=root)
    report["prompts_reused"] = reused
    evalkit.write_ablation_summary(root.parent)
    return report


def run_probe_gap(cfg: dict) -> dict:
    """Theorem-style probe: how well prompt combinations bridge the domain gap.

    For sampled (scene, pose, non-reference factor): the target is the vanilla
    embedding of the same pose rendered under the reference domain; the probe
    reports the simplex residual of (target - vanilla) against the
    domain-prompted embeddings.
    """
    world = load_world(cfg)
    enc, _ = load_backbone(cfg)
    pool, _ = load_prompts(cfg, enc)
    from .encoder import encode_observation_set

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg["seed"], 211])))
    factors = world["splits"]["seen"] + world["splits"]["unseen"]
    reference = world["splits"]["source"][0]
    rows = []
    residuals = []
    for _ in range(cfg["probe"]["samples"]):
        scene_id = int(rng.integers(0, len(world["scenes"])))
        scene = world["scenes"][scene_id]
        factor = factors[int(rng.integers(0, len(factors)))]
        goal = int(rng.integers(0, envsim.NUM_CATEGORIES))
        start = envsim.sample_start(rng, scene, factor, goal)
        obs = envsim.render(scene, start, factor, cfg["scene"]["image_hw"])[None]
        obs_ref = envsim.render(scene, start, reference, cfg["scene"]["image_hw"])[None]
        with torch.inference_mode():
            z_v, _, z_k = encode_observation_set(enc, pool, obs, include_text=True)
            z_star, _, _ = encode_observation_set(enc, pool, obs_ref, include_text=False)
        res = evalkit.approximation_gap(
            z_v[0].numpy(), z_k[0].numpy(), z_star[0].numpy()
        )
        residuals.append(res.residual)
        rows.append(
            {"scene": scene_id, "residual": res.residual, "converged": res.converged}
        )
    report = {
        "samples": len(rows),
        "mean_residual": float(np.mean(residuals)),
        "median_residual": float(np.median(residuals)),
        "max_residual": float(np.max(residuals)),
        "config_digest": config_digest(cfg),
    }
    metrics_dir = out_dir(cfg) / "metrics"
    metrics_dir.mkdir(parents=True, exist_ok=True)
    (metrics_dir / "gap_probe.json").write_text(json.dumps(report, sort_keys=True, indent=2))
    return report


def run_export(cfg: dict) -> dict:
    kind = cfg["export"]["kind"]
    root = out_dir(cfg)
    export_dir = root / "exports"
    export_dir.mkdir(parents=True, exist_ok=True)
    enc, _ = load_backbone(cfg)
    pool, prompt_meta = load_prompts(cfg, enc)
    dataset = load_dataset(cfg)
    index = prompt_learning.FrameIndex.build(
        dataset, cfg["dataset"]["holdout_fraction"], cfg["seed"]
    )
    if kind == "embeddings":
        take = index.holdout_idx[: cfg["export"]["samples"]]
        rows = evalkit.export_embeddings(
            enc,
            pool,
            index.frames[take],
            index.factor_ids[take],
            export_dir / "embeddings.csv",
        )
        return {"kind": kind, "rows": rows, "path": str(export_dir / "embeddings.csv")}
    if kind == "alphas":
        world = load_world(cfg)
        seed = cfg["eval"]["seeds"][0]
        core, f_p, meta = load_policy(cfg, enc, pool, seed)
        extractor = FeatureExtractor(enc, pool, include_text=meta["include_text"])
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg["seed"], 221])))
        scene = world["scenes"][0]
        factor = world["splits"]["unseen"][0]
        goal = int(rng.integers(0, envsim.NUM_CATEGORIES))
        start = envsim.sample_start(rng, scene, factor, goal, pitch_levels=(0,))
        trace: list = []
        evalkit.run_episode(
            scene, factor, goal, start, core, f_p, extractor,
            fusion_mode=meta["fusion_mode"], max_steps=cfg["eval"]["max_steps"],
            alpha_trace=trace,
        )
        path = export_dir / "alpha_trace.csv"
        with open(path, "w") as f:
            k = len(trace[0]) - 1 if trace else len(pool.domain_ids)
            f.write(",".join(["step"] + [f"alpha{i+1}" for i in range(k)]) + "\n")
            for row in trace:
                f.write(",".join(str(v) for v in row) + "\n")
        return {"kind": kind, "steps": len(trace), "path": str(path)}
    if kind == "frames":
        world = load_world(cfg)
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg["seed"], 222])))
        paths = []
        for i, factor in enumerate(world["splits"]["source"]):
            scene = world["scenes"][0]
            goal = int(rng.integers(0, envsim.NUM_CATEGORIES))
            start = envsim.sample_start(rng, scene, factor, goal)
            obs = envsim.render(scene, start, factor, cfg["scene"]["image_hw"])
            path = export_dir / f"frame_source{i}.ppm"
            envsim.write_ppm(obs, path)
            paths.append(str(path))
        return {"kind": kind, "paths": paths}
    raise ValueError(f"unknown export kind {kind!r}")
