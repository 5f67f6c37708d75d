import numpy as np
import pytest
import torch

from andes.backbone import (
    MultiSpectralViT,
    PatchMask,
    ViTConfig,
    build_backbone,
    interpolate_pos_embed,
)
from andes.errors import NumericalAbort

TINY = ViTConfig(
    in_channels=8, patch_size=14, embed_dim=32, depth=2, heads=2,
    drop_path_rate=0.0, layerscale_init=1.0, pos_grid=4,
)


def rand_input(size, channels=8, batch=1, seed=0):
    gen = torch.Generator().manual_seed(seed)
    return torch.randn(batch, channels, size, size, generator=gen)


class TestPatchEmbed:
    def test_224_gives_256_tokens(self):
        cfg = ViTConfig(embed_dim=32, depth=1, heads=2, pos_grid=16, drop_path_rate=0.0)
        model = build_backbone(cfg, seed=0)
        out = model(rand_input(224))
        assert out.class_token.shape == (1, 32)
        assert out.patch_tokens.shape == (1, 256, 32)

    def test_98_gives_49_tokens(self):
        model = build_backbone(TINY, seed=0)
        tokens = model.embed_patches(rand_input(98))
        assert tokens.shape == (1, 49, 32)

    def test_zero_input_zero_bias_gives_zero_tokens(self):
        model = build_backbone(TINY, seed=1)
        with torch.no_grad():
            model.patch_embed.bias.zero_()
        tokens = model.embed_patches(torch.zeros(2, 8, 28, 28))
        assert torch.all(tokens == 0)

    def test_tokens_are_row_major(self):
        model = build_backbone(TINY, seed=2)
        x = torch.zeros(1, 8, 28, 28)
        x[0, :, 0:14, 14:28] = 1.0  # row 0, col 1 patch
        tokens = model.embed_patches(x)
        bias = model.patch_embed.bias
        # patches 0, 2, 3 see only zeros (bias output); patch 1 differs
        assert torch.allclose(tokens[0, 0], bias)
        assert torch.allclose(tokens[0, 2], bias)
        assert not torch.allclose(tokens[0, 1], bias)

    def test_shape_errors_name_dimension(self):
        model = build_backbone(TINY, seed=0)
        with pytest.raises(ValueError, match="channels"):
            model.embed_patches(torch.zeros(1, 3, 28, 28))
        with pytest.raises(ValueError, match="patch size"):
            model.embed_patches(torch.zeros(1, 8, 30, 30))


class TestPositionalInterpolation:
    def test_identity_grid_passthrough(self):
        pos = torch.randn(16, 8, dtype=torch.float64)
        out = interpolate_pos_embed(pos, (4, 4), (4, 4), 0.1)
        assert torch.equal(out, pos)

    def test_constant_embedding_invariant(self):
        pos = torch.full((256, 8), 0.7, dtype=torch.float64)
        down = interpolate_pos_embed(pos, (16, 16), (7, 7), 0.1)
        torch.testing.assert_close(down, torch.full((49, 8), 0.7, dtype=torch.float64))
        back = interpolate_pos_embed(down, (7, 7), (16, 16), 0.1)
        torch.testing.assert_close(back, pos)

    @staticmethod
    def _keys_weight(t, a=-0.75):
        at = abs(t)
        if at <= 1:
            return (a + 2) * at**3 - (a + 3) * at**2 + 1
        if at < 2:
            return a * (at**3 - 5 * at**2 + 8 * at - 4)
        return 0.0

    def _oracle(self, grid, th, tw, offset):
        gh, gw, d = grid.shape
        sy, sx = (th + offset) / gh, (tw + offset) / gw
        out = np.zeros((th, tw, d))
        for j in range(th):
            y = (j + 0.5) / sy - 0.5
            iy = int(np.floor(y))
            wy = [self._keys_weight(1 + (y - iy)), self._keys_weight(y - iy),
                  self._keys_weight(1 - (y - iy)), self._keys_weight(2 - (y - iy))]
            for i in range(tw):
                x = (i + 0.5) / sx - 0.5
                ix = int(np.floor(x))
                wx = [self._keys_weight(1 + (x - ix)), self._keys_weight(x - ix),
                      self._keys_weight(1 - (x - ix)), self._keys_weight(2 - (x - ix))]
                acc = np.zeros(d)
                for a in range(4):
                    yy = min(max(iy - 1 + a, 0), gh - 1)
                    for b in range(4):
                        xx = min(max(ix - 1 + b, 0), gw - 1)
                        acc += wy[a] * wx[b] * grid[yy, xx]
                out[j, i] = acc
        return out

    def test_matches_independent_bicubic_oracle(self):
        rng = np.random.default_rng(42)
        for base, target in ((2, 3), (4, 7), (16, 7)):
            grid = rng.normal(size=(base, base, 5))
            pos = torch.from_numpy(grid.reshape(base * base, 5))
            got = interpolate_pos_embed(pos, (base, base), (target, target), 0.1)
            want = self._oracle(grid, target, target, 0.1).reshape(target * target, 5)
            np.testing.assert_allclose(got.numpy(), want, atol=1e-12)


class TestForward:
    def test_eval_mode_deterministic(self):
        cfg = ViTConfig(embed_dim=32, depth=2, heads=2, drop_path_rate=0.3, pos_grid=4)
        model = build_backbone(cfg, seed=3)
        model.eval()
        x = rand_input(28, seed=5)
        o1, o2 = model(x), model(x)
        assert torch.equal(o1.class_token, o2.class_token)
        assert torch.equal(o1.patch_tokens, o2.patch_tokens)

    def test_drop_path_active_in_training(self):
        cfg = ViTConfig(embed_dim=32, depth=2, heads=2, drop_path_rate=0.9, pos_grid=4)
        model = build_backbone(cfg, seed=3)
        model.train()
        x = rand_input(28, batch=8, seed=5)
        torch.manual_seed(0)
        o1 = model(x).class_token
        torch.manual_seed(1)
        o2 = model(x).class_token
        assert not torch.equal(o1, o2)

    def test_layerscale_keeps_init_near_identity(self):
        x = rand_input(28, seed=6)
        outs = {}
        for ls in (0.0, 1e-5):
            cfg = ViTConfig(embed_dim=32, depth=2, heads=2, drop_path_rate=0.0,
                            layerscale_init=ls, pos_grid=4)
            model = build_backbone(cfg, seed=7)
            model.eval()
            outs[ls] = model(x)
        # With layerscale 0 the blocks are exact identities, so the deviation
        # at 1e-5 bounds the per-block residual contribution at init.
        diff = (outs[0.0].patch_tokens - outs[1e-5].patch_tokens).abs().max()
        assert diff < 1e-2
        assert diff > 0

    def test_nan_abort_names_block(self):
        model = build_backbone(TINY, seed=0)
        model.eval()
        with torch.no_grad():
            model.blocks[1].mlp.fc2.weight.fill_(float("nan"))
        with pytest.raises(NumericalAbort, match="block 1"):
            model(rand_input(28))


class TestMaskedForward:
    def test_empty_mask_is_exactly_forward(self):
        model = build_backbone(TINY, seed=4)
        model.eval()
        x = rand_input(28, batch=3, seed=9)
        plain = model(x)
        masked = model.forward_masked(x, PatchMask.empty(2, 2))
        assert torch.equal(plain.class_token, masked.class_token)
        assert torch.equal(plain.patch_tokens, masked.patch_tokens)

    def test_full_mask_erases_patch_content(self):
        model = build_backbone(TINY, seed=4)
        model.eval()
        x1, x2 = rand_input(28, seed=1), rand_input(28, seed=2)
        full = PatchMask(2, 2, np.ones(4, dtype=bool))
        o1 = model.forward_masked(x1, full)
        o2 = model.forward_masked(x2, full)
        # All patch content replaced by the mask token: outputs are input-independent.
        assert torch.allclose(o1.patch_tokens, o2.patch_tokens, atol=1e-6)

    def test_single_masked_patch_leaves_other_embeddings(self):
        model = build_backbone(TINY, seed=4)
        x = rand_input(28, seed=3)
        tokens = model.embed_patches(x)
        mask = torch.tensor([[True, False, False, False]])
        replaced = torch.where(mask.unsqueeze(-1), model.mask_token.to(tokens.dtype), tokens)
        assert torch.equal(replaced[0, 1:], tokens[0, 1:])
        assert torch.allclose(replaced[0, 0], model.mask_token[0, 0])

    def test_grid_mismatch_is_error(self):
        model = build_backbone(TINY, seed=4)
        with pytest.raises(ValueError, match="grid"):
            model.forward_masked(rand_input(28), PatchMask.empty(3, 3))


def finite_difference_check(model, x, eps, atol, rtol, n_per_tensor=5, seed=0):
    """Central-difference check of d(sum of class token)/d(theta)."""
    model.eval()
    loss = model(x).class_token.sum()
    loss.backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p in model.named_parameters():
        flat = p.detach().reshape(-1)
        # an unused parameter (e.g. the mask token without a mask) has no grad
        grad = p.grad.reshape(-1) if p.grad is not None else torch.zeros_like(flat)
        idx = rng.choice(flat.numel(), size=min(n_per_tensor, flat.numel()), replace=False)
        for i in idx:
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + eps
                f_plus = model(x).class_token.sum().item()
                flat[i] = orig - eps
                f_minus = model(x).class_token.sum().item()
                flat[i] = orig
            fd = (f_plus - f_minus) / (2 * eps)
            a = grad[i].item()
            err = abs(a - fd)
            bound = atol + rtol * max(abs(a), abs(fd))
            assert err <= bound, f"{name}[{i}]: analytic {a:.6g} vs fd {fd:.6g} (err {err:.2g})"
            worst = max(worst, err / max(abs(a), abs(fd), atol))
    return worst


class TestGradients:
    def test_float64_matches_finite_differences(self):
        model = build_backbone(TINY, seed=11).double()
        x = rand_input(28, seed=21).double()
        finite_difference_check(model, x, eps=1e-5, atol=1e-9, rtol=1e-5)

    def test_float32_matches_finite_differences(self):
        model = build_backbone(TINY, seed=12)
        x = rand_input(28, seed=22)
        finite_difference_check(model, x, eps=1e-2, atol=2e-4, rtol=1e-3)


class TestConfig:
    def test_head_divisibility(self):
        with pytest.raises(ValueError):
            ViTConfig(embed_dim=30, heads=4)

    def test_drop_path_schedule_modes(self):
        uniform = MultiSpectralViT(ViTConfig(embed_dim=32, depth=4, heads=2, drop_path_rate=0.3,
                                             drop_path_uniform=True, pos_grid=4))
        assert [b.drop_path.drop_prob for b in uniform.blocks] == [0.3] * 4
        linear = MultiSpectralViT(ViTConfig(embed_dim=32, depth=4, heads=2, drop_path_rate=0.3,
                                            drop_path_uniform=False, pos_grid=4))
        rates = [b.drop_path.drop_prob for b in linear.blocks]
        assert rates[0] == 0.0 and rates[-1] == pytest.approx(0.3)
        assert all(b >= a for a, b in zip(rates, rates[1:]))

    def test_same_seed_same_init(self):
        m1 = build_backbone(TINY, seed=5)
        m2 = build_backbone(TINY, seed=5)
        for p1, p2 in zip(m1.parameters(), m2.parameters()):
            assert torch.equal(p1, p2)
