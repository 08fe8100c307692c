import math

import numpy as np
import pytest
import torch

from capo.evalkit import simplex_residual
from capo.orchestrator import ProjectionNet, dual_scores, fuse, fuse_with_weights, orchestrate


def unit(n, k, d, seed, dtype=torch.float32):
    rng = np.random.Generator(np.random.PCG64(seed))
    z = torch.from_numpy(rng.standard_normal((n, k, d))).to(dtype)
    return z / z.norm(dim=-1, keepdim=True)


@pytest.fixture()
def f_p():
    return ProjectionNet(out_dim=32, seed=0)


class TestDualScores:
    def test_self_similarity_cosine_one(self, f_p):
        z_v = unit(4, 1, 32, 0)[:, 0]
        z_k = z_v.unsqueeze(1).expand(-1, 9, -1)
        _, s_c = dual_scores(z_v, z_k, f_p)
        assert torch.allclose(s_c, torch.ones(4, 9), atol=1e-6)

    def test_zero_projection_zero_scores(self):
        f0 = ProjectionNet(out_dim=32, seed=1)
        with torch.no_grad():
            for p in f0.parameters():
                p.zero_()
        z_v = unit(3, 1, 32, 1)[:, 0]
        z_k = unit(3, 9, 32, 2)
        s_a, _ = dual_scores(z_v, z_k, f0)
        assert torch.equal(s_a, torch.zeros(3, 9))

    def test_cosine_branch_matches_independent_computation(self, f_p):
        z_v = unit(5, 1, 32, 3)[:, 0]
        z_k = unit(5, 9, 32, 4)
        _, s_c = dual_scores(z_v, z_k, f_p)
        manual = np.einsum(
            "nd,nkd->nk", z_v.numpy().astype(np.float64), z_k.numpy().astype(np.float64)
        )
        assert np.allclose(s_c.numpy(), manual, atol=1e-6)

    def test_learnable_branch_scale(self, f_p):
        z_v = unit(2, 1, 32, 5)[:, 0]
        z_k = unit(2, 9, 32, 6)
        s_a, _ = dual_scores(z_v, z_k, f_p)
        keys = f_p(z_k)
        manual = (z_v.unsqueeze(1) * keys).sum(-1) / math.sqrt(32)
        assert torch.allclose(s_a, manual, atol=1e-7)

    def test_dimension_mismatch(self, f_p):
        with pytest.raises(ValueError):
            dual_scores(torch.zeros(2, 16), torch.zeros(2, 9, 32), f_p)


class TestFuse:
    def test_equal_products_uniform_alpha(self):
        z_v = unit(3, 1, 32, 7)[:, 0]
        z_t = unit(3, 1, 32, 8)[:, 0]
        z_k = unit(3, 9, 32, 9)
        s = torch.ones(3, 9)
        z_f, alpha = fuse(z_v, z_t, z_k, s, s.clone())
        assert torch.allclose(alpha, torch.full((3, 9), 1.0 / 9.0), atol=1e-7)
        expected = z_v + z_t + z_k.mean(dim=1)
        assert torch.allclose(z_f, expected, atol=1e-6)

    def test_single_prompt(self):
        z_v = unit(1, 1, 32, 10)[:, 0]
        z_t = unit(1, 1, 32, 11)[:, 0]
        z_k = unit(1, 1, 32, 12)
        z_f, alpha = fuse(z_v, z_t, z_k, torch.ones(1, 1), torch.ones(1, 1))
        assert torch.equal(alpha, torch.ones(1, 1))
        assert torch.allclose(z_f, z_v + z_t + z_k[:, 0], atol=1e-7)

    def test_softmax_products_example(self):
        # Score products (1.0, 0.5) -> alpha ~= (0.6225, 0.3775).
        z_v = unit(1, 1, 2, 13)[:, 0]
        z_t = unit(1, 1, 2, 14)[:, 0]
        z_k = unit(1, 2, 2, 15)
        s_a = torch.tensor([[1.0, 0.5]])
        s_c = torch.ones(1, 2)
        _, alpha = fuse(z_v, z_t, z_k, s_a, s_c)
        expected = np.exp([1.0, 0.5]) / np.exp([1.0, 0.5]).sum()
        assert np.allclose(alpha.numpy()[0], expected, atol=1e-4)
        assert alpha.numpy()[0] == pytest.approx([0.6225, 0.3775], abs=2e-4)

    def test_alpha_on_open_simplex(self):
        for seed in range(5):
            z_v = unit(8, 1, 32, 20 + seed)[:, 0]
            z_t = unit(8, 1, 32, 40 + seed)[:, 0]
            z_k = unit(8, 9, 32, 60 + seed)
            f_p = ProjectionNet(out_dim=32, seed=seed)
            z_f, alpha = orchestrate(z_v, z_t, z_k, f_p)
            assert float((alpha.sum(dim=-1) - 1.0).abs().max()) <= 1e-6
            assert float(alpha.min()) > 0.0

    def test_shift_invariance(self):
        z_v = unit(2, 1, 32, 16)[:, 0]
        z_t = unit(2, 1, 32, 17)[:, 0]
        z_k = unit(2, 9, 32, 18)
        s_a = torch.randn(2, 9, generator=torch.Generator().manual_seed(0))
        ones = torch.ones(2, 9)
        _, alpha1 = fuse(z_v, z_t, z_k, s_a, ones)
        _, alpha2 = fuse(z_v, z_t, z_k, s_a + 7.5, ones)  # constant shift of products
        assert torch.allclose(alpha1, alpha2, atol=1e-6)

    def test_fused_norm_bound(self):
        # ||z_f|| <= 3 with unit embeddings and convex weights.
        for seed in range(5):
            z_v = unit(8, 1, 32, 80 + seed)[:, 0]
            z_t = unit(8, 1, 32, 90 + seed)[:, 0]
            z_k = unit(8, 9, 32, 100 + seed)
            f_p = ProjectionNet(out_dim=32, seed=seed)
            z_f, _ = orchestrate(z_v, z_t, z_k, f_p)
            assert float(z_f.norm(dim=-1).max()) <= 3.0 + 1e-6

    def test_residual_in_convex_hull(self):
        # z_f - z_v - z_t must sit in the convex hull of the prompt embeddings.
        z_v = unit(4, 1, 32, 19)[:, 0]
        z_t = unit(4, 1, 32, 21)[:, 0]
        z_k = unit(4, 9, 32, 22)
        f_p = ProjectionNet(out_dim=32, seed=3)
        with torch.no_grad():
            z_f, _ = orchestrate(z_v, z_t, z_k, f_p)
        target = (z_f - z_v - z_t).numpy().astype(np.float64)
        for i in range(4):
            res = simplex_residual(z_k[i].numpy().astype(np.float64), target[i])
            assert res.residual <= 1e-6

    def test_text_bypasses_attention(self):
        # Changing z_t shifts z_f additively without touching alpha.
        z_v = unit(2, 1, 32, 23)[:, 0]
        z_k = unit(2, 9, 32, 24)
        f_p = ProjectionNet(out_dim=32, seed=4)
        z_t1 = unit(2, 1, 32, 25)[:, 0]
        z_t2 = unit(2, 1, 32, 26)[:, 0]
        zf1, a1 = orchestrate(z_v, z_t1, z_k, f_p)
        zf2, a2 = orchestrate(z_v, z_t2, z_k, f_p)
        assert torch.equal(a1, a2)
        assert torch.allclose(zf2 - zf1, z_t2 - z_t1, atol=1e-7)

    def test_gradient_reaches_projection_only(self):
        # During fusion, gradients flow into f_p but the embeddings arrive
        # as constants (frozen upstream).
        z_v = unit(2, 1, 32, 27)[:, 0]
        z_t = unit(2, 1, 32, 28)[:, 0]
        z_k = unit(2, 9, 32, 29)
        f_p = ProjectionNet(out_dim=32, seed=5)
        z_f, _ = orchestrate(z_v, z_t, z_k, f_p)
        z_f.sum().backward()
        assert all(p.grad is not None for p in f_p.parameters())


class TestVariants:
    def test_avg_mode_uniform(self):
        z_v = unit(3, 1, 32, 30)[:, 0]
        z_t = unit(3, 1, 32, 31)[:, 0]
        z_k = unit(3, 9, 32, 32)
        f_p = ProjectionNet(out_dim=32, seed=6)
        z_f, alpha = orchestrate(z_v, z_t, z_k, f_p, mode="avg")
        assert torch.equal(alpha, torch.full((3, 9), 1.0 / 9.0))
        assert torch.allclose(z_f, fuse_with_weights(z_v, z_t, z_k, alpha), atol=1e-7)

    def test_att_and_cos_modes_differ_from_dual(self):
        z_v = unit(4, 1, 32, 33)[:, 0]
        z_t = unit(4, 1, 32, 34)[:, 0]
        z_k = unit(4, 9, 32, 35)
        f_p = ProjectionNet(out_dim=32, seed=7)
        _, a_dual = orchestrate(z_v, z_t, z_k, f_p, mode="dual")
        _, a_att = orchestrate(z_v, z_t, z_k, f_p, mode="att")
        _, a_cos = orchestrate(z_v, z_t, z_k, f_p, mode="cos")
        assert not torch.allclose(a_dual, a_att, atol=1e-5)
        assert not torch.allclose(a_dual, a_cos, atol=1e-5)

    def test_no_text_mode(self):
        z_v = unit(2, 1, 32, 36)[:, 0]
        z_k = unit(2, 9, 32, 37)
        f_p = ProjectionNet(out_dim=32, seed=8)
        z_f, alpha = orchestrate(z_v, None, z_k, f_p)
        assert torch.allclose(z_f, z_v + (alpha.unsqueeze(-1) * z_k).sum(1), atol=1e-6)

    def test_unknown_mode(self):
        z_v = unit(1, 1, 32, 38)[:, 0]
        z_k = unit(1, 9, 32, 39)
        with pytest.raises(ValueError):
            orchestrate(z_v, None, z_k, ProjectionNet(seed=9), mode="bogus")
