import json
import math

import numpy as np
import pytest
import torch

from capo import expert_data, prompt_learning as pl
from capo.checkpoint import module_digest
from capo.config import load_config
from capo.encoder import PromptPool, VisionEncoder, text_anchor_basis
from capo.envsim import ContractViolation, DomainFactor

from .conftest import fd_gradient_worst_error


@pytest.fixture(scope="module")
def encoder():
    return VisionEncoder(seed=0).freeze()


@pytest.fixture(scope="module")
def anchors():
    return torch.from_numpy(text_anchor_basis(0).astype(np.float32))


@pytest.fixture(scope="module")
def dataset(scene_batch):
    factors = [
        DomainFactor.reference(),
        DomainFactor(fov_group="wide", rotation_step=30.0, translation_step=0.5,
                     brightness=1.25),
        DomainFactor(fov_group="narrow", rotation_step=90.0, look_step=15.0, saturation=1.6),
    ]
    return expert_data.collect_and_align(scene_batch, factors, 10, 0.7, seed=17)


def unit_rows(n, d, seed, dtype=torch.float64):
    rng = np.random.Generator(np.random.PCG64(seed))
    z = torch.from_numpy(rng.standard_normal((n, d))).to(dtype)
    return z / z.norm(dim=-1, keepdim=True)


class TestInfoNCE:
    def test_batch_of_one_is_exactly_zero(self):
        z = unit_rows(1, 32, 0)
        assert float(pl.infonce_symmetric(z, z.clone())) == 0.0

    def test_orthogonal_pair_value(self):
        z = torch.zeros(2, 32, dtype=torch.float64)
        z[0, 0] = 1.0
        z[1, 1] = 1.0
        expected = math.log(1.0 + math.exp(-1.0))
        assert float(pl.infonce_symmetric(z, z.clone())) == pytest.approx(expected, abs=1e-12)

    def test_permutation_invariant(self):
        z = unit_rows(6, 32, 1)
        zp = unit_rows(6, 32, 2)
        perm = torch.tensor([3, 0, 5, 1, 4, 2])
        a = float(pl.infonce_symmetric(z, zp))
        b = float(pl.infonce_symmetric(z[perm], zp[perm]))
        assert a == pytest.approx(b, rel=1e-12)

    def test_rotation_invariant(self):
        # Depends only on dot products: any orthogonal map leaves it unchanged.
        z = unit_rows(5, 32, 3)
        zp = unit_rows(5, 32, 4)
        q, _ = torch.linalg.qr(torch.from_numpy(
            np.random.Generator(np.random.PCG64(5)).standard_normal((32, 32))))
        a = float(pl.infonce_symmetric(z, zp))
        b = float(pl.infonce_symmetric(z @ q, zp @ q))
        assert a == pytest.approx(b, rel=1e-9)

    def test_non_normalized_rejected(self):
        z = unit_rows(3, 32, 6)
        with pytest.raises(ContractViolation):
            pl.infonce_symmetric(z * 2.0, z)

    def test_nonnegative(self):
        for seed in range(5):
            z = unit_rows(8, 32, seed)
            zp = unit_rows(8, 32, seed + 100)
            assert float(pl.infonce_symmetric(z, zp)) >= 0.0


class TestVisualLoss:
    def test_identity_augmentor_mse_zero(self, encoder, rendered_frames):
        pool = PromptPool(seed=3)
        rng = np.random.Generator(np.random.PCG64(0))
        loss = pl.visual_loss(
            encoder, pool, 0, rendered_frames[:4], pl.IdentityAugmentor(), 1.0, rng
        )
        with torch.no_grad():
            z = encoder.encode(rendered_frames[:4], pool.prompts[0], pool.w_p)
        expected = pl.infonce_symmetric(z, z.clone())
        assert float(loss) == pytest.approx(float(expected), abs=1e-6)

    def test_lambda_zero_is_pure_infonce(self, encoder, rendered_frames):
        pool = PromptPool(seed=3)
        a = pl.visual_loss(
            encoder, pool, 1, rendered_frames[:4], pl.PhotometricAugmentor("contrast"),
            0.0, np.random.Generator(np.random.PCG64(1)),
        )
        with torch.no_grad():
            z = encoder.encode(rendered_frames[:4], pool.prompts[1], pool.w_p)
            rng = np.random.Generator(np.random.PCG64(1))
            views = np.stack([
                pl.PhotometricAugmentor("contrast")(rng, f) for f in rendered_frames[:4]
            ])
            zp = encoder.encode(views, pool.prompts[1], pool.w_p)
        assert float(a) == pytest.approx(float(pl.infonce_symmetric(z, zp)), abs=1e-6)

    def test_wrong_dimension_rejected(self, encoder, rendered_frames):
        pool = PromptPool(seed=3)
        with pytest.raises(pl.ConfigurationError):
            pl.visual_loss(
                encoder, pool, 0, rendered_frames[:2], pl.PhotometricAugmentor("hue"),
                1.0, np.random.Generator(np.random.PCG64(2)),
            )

    def test_augmentor_touches_single_dimension(self, rendered_frames):
        # A brightness augmentor output must be reproducible by a pure
        # brightness transform of the input (identity in other dims).
        rng = np.random.Generator(np.random.PCG64(3))
        aug = pl.PhotometricAugmentor("brightness")
        img = rendered_frames[0]
        out = aug(rng, img)
        rng2 = np.random.Generator(np.random.PCG64(3))
        value = float(rng2.uniform(*pl.AUGMENT_RANGES["brightness"]))
        from capo.envsim import apply_photometric

        assert np.array_equal(out, apply_photometric(img, value, 1.0, 1.0, 0.0))


class TestActionLoss:
    def test_aligned_prediction_zero(self):
        u = unit_rows(4, 16, 0)
        assert float(pl.byol_pair_loss(u, u * 2.5).sum()) == pytest.approx(0.0, abs=1e-12)

    def test_antipodal_is_four(self):
        u = unit_rows(1, 16, 1)
        assert float(pl.byol_pair_loss(u, -u)) == pytest.approx(4.0, abs=1e-12)

    def test_mismatched_actions_rejected(self, encoder, rendered_frames):
        pool = PromptPool(seed=4)
        nets = pl.OnlineTargetNets(seed=4)
        with pytest.raises(pl.SamplingError):
            pl.action_loss(
                encoder, pool, 4, rendered_frames[:2], rendered_frames[2:4], nets,
                np.array([0, 1]), np.array([0, 2]),
            )

    def test_target_branch_zero_gradient(self, encoder, rendered_frames):
        pool = PromptPool(seed=4)
        nets = pl.OnlineTargetNets(seed=4)
        acts = np.zeros(4, dtype=np.int64)
        loss = pl.action_loss(
            encoder, pool, 5, rendered_frames[:4], rendered_frames[4:8], nets, acts, acts
        )
        loss.backward()
        assert all(p.grad is None for p in nets.target_proj.parameters())
        assert pool.prompts[5].tokens.grad is not None
        assert any(p.grad is not None for p in nets.online_parameters())


class TestMomentumUpdate:
    def _pair(self, val_t, val_o):
        t = torch.nn.Linear(2, 2, bias=False)
        o = torch.nn.Linear(2, 2, bias=False)
        with torch.no_grad():
            t.weight.fill_(val_t)
            o.weight.fill_(val_o)
        return t, o

    def test_beta_one_noop(self):
        t, o = self._pair(0.5, 1.0)
        pl.momentum_update(t, o, 1.0)
        assert torch.equal(t.weight, torch.full((2, 2), 0.5))

    def test_beta_zero_copies(self):
        t, o = self._pair(0.5, 1.0)
        pl.momentum_update(t, o, 0.0)
        assert torch.equal(t.weight, torch.full((2, 2), 1.0))

    def test_direct_arithmetic(self):
        t, o = self._pair(0.0, 1.0)
        pl.momentum_update(t, o, 0.99)
        assert float(t.weight[0, 0]) == pytest.approx(0.01)

    def test_affine_composition(self):
        # Applying beta twice against a fixed online equals beta^2 once,
        # because nu' = b(b nu + (1-b) w) + (1-b) w = b^2 nu + (1-b^2) w.
        t1, o = self._pair(0.3, 1.2)
        t2, _ = self._pair(0.3, 1.2)
        beta = 0.9
        pl.momentum_update(t1, o, beta)
        pl.momentum_update(t1, o, beta)
        pl.momentum_update(t2, o, beta * beta)
        assert torch.allclose(t1.weight, t2.weight, atol=1e-7)

    def test_shape_mismatch_rejected(self):
        t = torch.nn.Linear(2, 2, bias=False)
        o = torch.nn.Linear(3, 3, bias=False)
        with pytest.raises(ValueError):
            pl.momentum_update(t, o, 0.5)


class TestTextLoss:
    def test_sigma_zero_equals_noiseless(self, encoder, anchors, rendered_frames):
        pool = PromptPool(seed=5)
        goals = np.array([0, 3, 7, 9])
        a = pl.text_loss(encoder, pool, pool.text_id, rendered_frames[:4], goals, anchors,
                         0.0, 1.0, seed=1)
        with torch.no_grad():
            z = encoder.encode(rendered_frames[:4], pool.prompts[pool.text_id], pool.w_p)
        tg = anchors[goals]
        logits = z @ tg.T
        manual = (-(logits.diagonal() - torch.logsumexp(logits, dim=1))).mean() + (
            (z - tg) ** 2
        ).sum(-1).mean()
        assert float(a) == float(manual)

    def test_anchor_perfect_alignment_value(self):
        # z~ equal to the anchors, two distinct orthonormal goals: the InfoNCE
        # term is log(1 + e^-1) and the MSE term vanishes.
        goals = np.array([2, 6])
        tg = torch.from_numpy(text_anchor_basis(0))[goals]
        logits = tg @ tg.T
        nce = float((-(logits.diagonal() - torch.logsumexp(logits, dim=1))).mean())
        assert nce == pytest.approx(math.log(1 + math.exp(-1.0)), abs=1e-12)

    def test_seeded_noise_reproducible(self, encoder, anchors, rendered_frames):
        pool = PromptPool(seed=5)
        goals = np.array([1, 4, 8])
        a = pl.text_loss(encoder, pool, pool.text_id, rendered_frames[:3], goals, anchors,
                         0.2, 1.0, seed=42)
        b = pl.text_loss(encoder, pool, pool.text_id, rendered_frames[:3], goals, anchors,
                         0.2, 1.0, seed=42)
        c = pl.text_loss(encoder, pool, pool.text_id, rendered_frames[:3], goals, anchors,
                         0.2, 1.0, seed=43)
        assert float(a) == float(b) != float(c)


class TestGradientChecks:
    """Central-difference oracles for all three losses, double precision."""

    @pytest.fixture()
    def double_setup(self, rendered_frames):
        enc = VisionEncoder(seed=6).double().freeze()
        pool = PromptPool(seed=6).double()
        nets = pl.OnlineTargetNets(seed=6).double()
        anchors = torch.from_numpy(text_anchor_basis(6))
        return enc, pool, nets, anchors, rendered_frames[:4]

    def test_visual_gradient(self, double_setup):
        enc, pool, nets, anchors, frames = double_setup

        def loss_fn():
            rng = np.random.Generator(np.random.PCG64(11))
            return pl.visual_loss(enc, pool, 2, frames, pl.PhotometricAugmentor("saturation"),
                                  1.0, rng)

        params = [pool.prompts[2].tokens, pool.prompts[2].pos, pool.w_p]
        assert fd_gradient_worst_error(loss_fn, params, n_coords=8, seed=21) <= 1e-3

    def test_action_gradient(self, double_setup):
        enc, pool, nets, anchors, frames = double_setup
        acts = np.zeros(4, dtype=np.int64)
        with torch.no_grad():
            zq = enc.encode(frames, pool.prompts[7], pool.w_p)
            zk = enc.encode(frames[::-1].copy(), pool.prompts[7], pool.w_p)
            fixed = (nets.target_proj(zq), nets.target_proj(zk))

        def loss_fn():
            return pl.action_loss(enc, pool, 7, frames, frames[::-1].copy(), nets, acts, acts,
                                  fixed_targets=fixed)

        params = [pool.prompts[7].tokens, pool.prompts[7].pos, pool.w_p]
        assert fd_gradient_worst_error(loss_fn, params, n_coords=8, seed=22) <= 1e-3

    def test_text_gradient(self, double_setup):
        enc, pool, nets, anchors, frames = double_setup
        goals = np.array([0, 5, 9, 11])

        def loss_fn():
            return pl.text_loss(enc, pool, pool.text_id, frames, goals, anchors, 0.1, 1.0,
                                seed=31)

        params = [pool.prompts[pool.text_id].tokens, pool.prompts[pool.text_id].pos, pool.w_p]
        assert fd_gradient_worst_error(loss_fn, params, n_coords=8, seed=23) <= 1e-3


class TestFrameIndex:
    def test_holdout_split_disjoint(self, dataset):
        index = pl.FrameIndex.build(dataset, 0.15, seed=1)
        assert len(np.intersect1d(index.train_idx, index.holdout_idx)) == 0
        assert len(index.train_idx) + len(index.holdout_idx) == len(index.frames)
        assert len(index.holdout_idx) > 0

    def test_action_pairs_same_action(self, dataset):
        index = pl.FrameIndex.build(dataset, 0.1, seed=2)
        rng = np.random.Generator(np.random.PCG64(0))
        _, _, aq, ak = index.sample_action_pairs(rng, "rotation", 16)
        assert np.array_equal(aq, ak)

    def test_fov_query_population_respects_bin(self, dataset):
        index = pl.FrameIndex.build(dataset, 0.1, seed=2)
        pop = index._query_population("fov-wide")
        groups = {index.factors[f].fov_group for f in index.factor_ids[pop]}
        assert groups == {"wide"}


class TestTrainPrompts:
    def test_smoke_training_contracts(self, dataset, tmp_path):
        cfg = load_config()
        cfg["prompt_training"].update(
            epochs=2, steps_per_epoch=2, visual_batch=6, action_batch=4, text_batch=6
        )
        enc = VisionEncoder(seed=7).freeze()
        pool = PromptPool(seed=7)
        anchors = torch.from_numpy(text_anchor_basis(7).astype(np.float32))
        digest_before = module_digest(enc)
        log_path = tmp_path / "log.jsonl"
        report = pl.train_prompts(
            dataset, enc, pool, anchors, cfg, seed=7, log_path=log_path
        )
        assert report["encoder_digest"] == digest_before
        assert report["branch_calls"] == {"visual": 4, "action": 4, "text": 4}
        lines = [json.loads(l) for l in log_path.read_text().splitlines()]
        assert {l["branch"] for l in lines} == {"visual", "action", "text"}
        assert all(np.isfinite(l["loss"]) for l in lines)
        assert all(l["lr"] > 0 for l in lines)

    def test_branch_parameter_partition(self, dataset):
        # One iteration: each branch must leave the other branches' prompt
        # tensors bit-identical.
        cfg = load_config()
        cfg["prompt_training"].update(
            epochs=1, steps_per_epoch=1, visual_batch=4, action_batch=4, text_batch=4
        )
        enc = VisionEncoder(seed=8).freeze()

        def snapshot(pool, ids):
            return [pool.prompts[i].tokens.detach().clone() for i in ids]

        pool = PromptPool(seed=8)
        anchors = torch.from_numpy(text_anchor_basis(8).astype(np.float32))
        before_action = snapshot(pool, pool.action_ids)
        before_text = snapshot(pool, [pool.text_id])
        pl.train_prompts(dataset, enc, pool, anchors, cfg, seed=8, branches=("visual",))
        assert all(
            torch.equal(a, b) for a, b in zip(before_action, snapshot(pool, pool.action_ids))
        )
        assert all(torch.equal(a, b) for a, b in zip(before_text, snapshot(pool, [pool.text_id])))
        # The cycled visual prompt must have moved.
        assert not torch.equal(
            pool.prompts[pool.appearance_ids[0]].tokens,
            PromptPool(seed=8).prompts[pool.appearance_ids[0]].tokens,
        )

    def test_wo_text_never_calls_text_loss(self, dataset, monkeypatch):
        cfg = load_config()
        cfg["prompt_training"].update(
            epochs=1, steps_per_epoch=2, visual_batch=4, action_batch=4, text_batch=4
        )
        calls = {"n": 0}
        original = pl.text_loss

        def counting(*args, **kwargs):
            calls["n"] += 1
            return original(*args, **kwargs)

        monkeypatch.setattr(pl, "text_loss", counting)
        enc = VisionEncoder(seed=9).freeze()
        pool = PromptPool(seed=9)
        anchors = torch.from_numpy(text_anchor_basis(9).astype(np.float32))
        pl.train_prompts(dataset, enc, pool, anchors, cfg, seed=9,
                         branches=("visual", "action"))
        assert calls["n"] == 0

    def test_visual_prompt_alignment_improves(self, dataset):
        # Brightness-perturbed pairs must embed closer after training than
        # before, measured on held-out frames.
        cfg = load_config()
        cfg["prompt_training"].update(
            epochs=4, steps_per_epoch=8, visual_batch=12, action_batch=4, text_batch=6
        )
        enc = VisionEncoder(seed=10).freeze()
        pool = PromptPool(seed=10)
        anchors = torch.from_numpy(text_anchor_basis(10).astype(np.float32))
        index = pl.FrameIndex.build(dataset, 0.15, seed=10)
        held = index.frames[index.holdout_idx[:24]]
        aug = pl.PhotometricAugmentor("brightness")
        pid = pool.appearance_ids[0]
        before = pl.perturbation_alignment(
            enc, pool, pid, held, aug, np.random.Generator(np.random.PCG64(0))
        )
        pl.train_prompts(dataset, enc, pool, anchors, cfg, seed=10, branches=("visual",),
                         holdout_fraction=0.15)
        after = pl.perturbation_alignment(
            enc, pool, pid, held, aug, np.random.Generator(np.random.PCG64(0))
        )
        assert after > before


class TestLossNonnegativity:
    def test_action_and_text_losses_nonnegative(self, encoder, anchors, rendered_frames):
        pool = PromptPool(seed=12)
        nets = pl.OnlineTargetNets(seed=12)
        acts = np.zeros(4, dtype=np.int64)
        a = pl.action_loss(encoder, pool, 4, rendered_frames[:4], rendered_frames[4:8],
                           nets, acts, acts)
        assert float(a) >= 0.0
        goals = np.array([0, 3, 6, 9])
        t = pl.text_loss(encoder, pool, pool.text_id, rendered_frames[:4], goals, anchors,
                         0.1, 1.0, seed=3)
        assert float(t) >= 0.0
