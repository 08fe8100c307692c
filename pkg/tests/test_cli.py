import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from capo.cli import command_dispatch
from capo.config import config_digest, load_config

MICRO_OVERRIDES = [
    "scene.count=2",
    "domains.n_source=1",
    "domains.n_seen=1",
    "domains.n_unseen=1",
    "dataset.episodes_per_factor=5",
    "backbone.epochs=2",
    "backbone.max_frames=200",
    "prompt_training.epochs=2",
    "prompt_training.steps_per_epoch=2",
    "prompt_training.visual_batch=6",
    "prompt_training.action_batch=4",
    "prompt_training.text_batch=6",
    "policy.total_steps=480",
    "policy.envs=2",
    "policy.rollout=20",
    "eval.episodes_per_domain=2",
    "eval.seeds=[0]",
    "eval.max_steps=40",
    "ablation.total_steps=240",
    "ablation.seeds=[0]",
    "probe.samples=3",
    "export.samples=4",
]


def run_cli(command, out, extra=()):
    args = [command, "--out", str(out)]
    for item in MICRO_OVERRIDES:
        args += ["--set", item]
    for item in extra:
        args += ["--set", item]
    return command_dispatch(args)


@pytest.fixture(scope="module")
def pipeline_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("micro_run")
    assert run_cli("collect", out) == 0
    assert run_cli("pretrain-backbone", out) == 0
    assert run_cli("train-prompts", out) == 0
    assert run_cli("train-policy", out) == 0
    return out


class TestPhaseOrdering:
    def test_evaluate_fresh_directory_fails(self, tmp_path):
        rc = run_cli("evaluate", tmp_path / "fresh")
        assert rc != 0

    def test_train_policy_requires_prompts(self, tmp_path):
        out = tmp_path / "half"
        assert run_cli("collect", out) == 0
        assert run_cli("pretrain-backbone", out) == 0
        assert run_cli("train-policy", out) == 3  # missing prompt checkpoint

    def test_invalid_config_key_fails(self, tmp_path):
        rc = command_dispatch(["collect", "--out", str(tmp_path / "x"), "--set", "noexist.key=1"])
        assert rc == 2

    def test_bad_override_syntax_fails(self, tmp_path):
        rc = command_dispatch(["collect", "--out", str(tmp_path / "x"), "--set", "seed"])
        assert rc == 2


class TestArtifacts:
    def test_expected_files_exist(self, pipeline_dir):
        for rel in [
            "config.json",
            "scenes.json",
            "splits.json",
            "dataset/dataset.json",
            "dataset/alignment.json",
            "dataset/factor_00/manifest.jsonl",
            "checkpoints/backbone.nt",
            "checkpoints/prompts.nt",
            "checkpoints/policy_seed0.nt",
            "logs/prompt_training.jsonl",
            "logs/reward_seed0.csv",
        ]:
            assert (pipeline_dir / rel).exists(), rel

    def test_artifacts_embed_config_digest(self, pipeline_dir):
        from capo.checkpoint import load_archive

        cfg = load_config(pipeline_dir / "config.json")
        digest = config_digest(cfg)
        for name in ("backbone.nt", "prompts.nt", "policy_seed0.nt"):
            _, meta = load_archive(pipeline_dir / "checkpoints" / name)
            assert meta["config_digest"] == digest

    def test_evaluate_and_downstream_commands(self, pipeline_dir):
        assert run_cli("evaluate", pipeline_dir) == 0
        metrics = json.loads((pipeline_dir / "metrics" / "evaluate.json").read_text())
        for split in ("source", "seen", "unseen"):
            assert set(metrics[split]) == {"SR", "SPL", "NE", "EL"}
        assert run_cli("probe-gap", pipeline_dir) == 0
        assert run_cli("export", pipeline_dir) == 0
        assert (pipeline_dir / "exports" / "embeddings.csv").exists()
        assert run_cli("export", pipeline_dir, extra=["export.kind=alphas"]) == 0
        trace = (pipeline_dir / "exports" / "alpha_trace.csv").read_text().splitlines()
        assert trace[0].startswith("step,alpha1")
        assert len(trace[0].split(",")) == 10  # step + 9 domain prompts
        assert run_cli("export", pipeline_dir, extra=["export.kind=frames"]) == 0

    def test_evaluate_refuses_mismatched_prompts(self, pipeline_dir, tmp_path):
        # Re-point the prompts checkpoint at a different encoder digest.
        from capo.checkpoint import load_archive, save_archive

        ck = pipeline_dir / "checkpoints" / "prompts.nt"
        tensors, meta = load_archive(ck)
        backup = ck.read_bytes()
        try:
            meta["encoder_digest"] = "0" * 64
            save_archive(ck, tensors, meta)
            assert run_cli("evaluate", pipeline_dir) == 1
        finally:
            ck.write_bytes(backup)

    def test_alignment_pairs_file_schema(self, pipeline_dir):
        pairs = json.loads((pipeline_dir / "dataset" / "alignment.json").read_text())
        for p in pairs:
            assert set(p) == {"base", "other", "f1"}
            assert p["f1"] >= 0.7


class TestDeterminism:
    def test_micro_pipeline_bit_identical_metrics(self, tmp_path):
        outputs = []
        for name in ("a", "b"):
            out = tmp_path / name
            for cmd in ("collect", "pretrain-backbone", "train-prompts", "train-policy",
                        "evaluate"):
                assert run_cli(cmd, out) == 0
            payload = json.loads((out / "metrics" / "evaluate.json").read_text())
            del payload["config_digest"]  # depends on the out path
            outputs.append(json.dumps(payload, sort_keys=True))
        assert outputs[0] == outputs[1]


class TestConsoleEntryPoint:
    def test_subprocess_help(self):
        proc = subprocess.run(
            [sys.executable, "-m", "capo.cli"],
            capture_output=True,
            text=True,
        )
        assert proc.returncode != 0  # no subcommand
        proc = subprocess.run(
            [sys.executable, "-c", "from capo.cli import command_dispatch; import sys; sys.exit(command_dispatch(['collect', '--help']))"],
            capture_output=True,
            text=True,
        )
        assert proc.returncode == 0
        assert "--set" in proc.stdout

    def test_log_level_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv("CAPO_LOG_LEVEL", "warn")
        rc = command_dispatch(["evaluate", "--out", str(tmp_path / "nope")])
        assert rc != 0
