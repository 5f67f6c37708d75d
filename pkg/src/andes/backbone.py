"""Channel-generalized vision transformer.

Produces one class token plus a row-major grid of patch tokens, supports a
learnable mask token for masked forwards, and interpolates its positional
table for view sizes other than the one it was built for.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import NumericalAbort


@dataclass(frozen=True)
class ViTConfig:
    in_channels: int = 8
    patch_size: int = 14
    embed_dim: int = 96
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    layerscale_init: float = 1e-5
    drop_path_rate: float = 0.3
    drop_path_uniform: bool = True
    pos_interp_offset: float = 0.1
    pos_grid: int = 16  # side of the stored positional table, in patches

    def __post_init__(self):
        if self.embed_dim % self.heads != 0:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if not 0.0 <= self.drop_path_rate < 1.0:
            raise ValueError(f"drop_path_rate must be in [0, 1), got {self.drop_path_rate}")


VIT_PRESETS = {
    "vit-micro": ViTConfig(embed_dim=96, depth=4, heads=4),
    "paper-vitl14": ViTConfig(embed_dim=1024, depth=24, heads=16),
}


@dataclass
class TokenOutput:
    class_token: torch.Tensor  # (B, D)
    patch_tokens: torch.Tensor  # (B, N, D)


@dataclass(frozen=True)
class PatchMask:
    grid_h: int
    grid_w: int
    mask: np.ndarray  # bool, flat length grid_h * grid_w, row-major

    def __post_init__(self):
        arr = np.asarray(self.mask, dtype=bool).reshape(-1)
        if arr.size != self.grid_h * self.grid_w:
            raise ValueError(f"mask length {arr.size} != {self.grid_h}x{self.grid_w}")
        object.__setattr__(self, "mask", arr)

    @property
    def count(self) -> int:
        return int(self.mask.sum())

    @staticmethod
    def empty(grid_h: int, grid_w: int) -> "PatchMask":
        return PatchMask(grid_h, grid_w, np.zeros(grid_h * grid_w, dtype=bool))


def trunc_normal_(tensor: torch.Tensor, std: float = 0.02, generator: torch.Generator | None = None) -> None:
    """Truncated-normal fill at +/-2 std via inverse-CDF, tied to `generator`."""
    lo = (1.0 + math.erf(-2.0 / math.sqrt(2.0))) / 2.0
    hi = (1.0 + math.erf(2.0 / math.sqrt(2.0))) / 2.0
    with torch.no_grad():
        tensor.uniform_(2 * lo - 1, 2 * hi - 1, generator=generator)
        tensor.erfinv_()
        tensor.mul_(std * math.sqrt(2.0))
        tensor.clamp_(-2.0 * std, 2.0 * std)


def interpolate_pos_embed(
    pos: torch.Tensor,
    base_grid: tuple[int, int],
    target_grid: tuple[int, int],
    offset: float,
) -> torch.Tensor:
    """Bicubic resample of a (base_h*base_w, D) positional table to a new grid.

    Sampling coordinates are scaled by (target + offset) / base per axis; an
    identical grid passes through untouched.
    """
    gh, gw = base_grid
    th, tw = target_grid
    if min(gh, gw, th, tw) < 1:
        raise ValueError("grids must be >= 1")
    if pos.shape[0] != gh * gw:
        raise ValueError(f"table has {pos.shape[0]} rows, expected {gh * gw}")
    if (th, tw) == (gh, gw):
        return pos
    dim = pos.shape[1]
    grid = pos.reshape(1, gh, gw, dim).permute(0, 3, 1, 2)
    out = F.interpolate(
        grid,
        scale_factor=((th + offset) / gh, (tw + offset) / gw),
        mode="bicubic",
        align_corners=False,
        antialias=False,
    )
    if out.shape[-2:] != (th, tw):
        raise RuntimeError(f"interpolated grid {tuple(out.shape[-2:])} != target {(th, tw)}")
    return out.permute(0, 2, 3, 1).reshape(th * tw, dim)


class DropPath(nn.Module):
    """Per-sample stochastic depth on a residual branch (training mode only)."""

    def __init__(self, drop_prob: float):
        super().__init__()
        self.drop_prob = drop_prob

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.drop_prob == 0.0 or not self.training:
            return x
        keep = 1.0 - self.drop_prob
        shape = (x.shape[0],) + (1,) * (x.ndim - 1)
        gate = torch.bernoulli(torch.full(shape, keep, dtype=x.dtype, device=x.device))
        return x * gate / keep


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = self.head_dim**-0.5
        self.qkv = nn.Linear(dim, dim * 3, bias=True)
        self.proj = nn.Linear(dim, dim, bias=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = torch.softmax((q @ k.transpose(-2, -1)) * self.scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden, bias=True)
        self.fc2 = nn.Linear(hidden, dim, bias=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float, layerscale_init: float, drop_path: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.ls1 = nn.Parameter(torch.full((dim,), layerscale_init))
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))
        self.ls2 = nn.Parameter(torch.full((dim,), layerscale_init))
        self.drop_path = DropPath(drop_path)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.drop_path(self.ls1 * self.attn(self.norm1(x)))
        x = x + self.drop_path(self.ls2 * self.mlp(self.norm2(x)))
        return x


class MultiSpectralViT(nn.Module):
    """Pre-norm ViT over an arbitrary number of input channels."""

    def __init__(self, cfg: ViTConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.patch_embed = nn.Conv2d(cfg.in_channels, d, cfg.patch_size, cfg.patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.mask_token = nn.Parameter(torch.zeros(1, 1, d))
        self.pos_embed = nn.Parameter(torch.zeros(1, 1 + cfg.pos_grid**2, d))
        if cfg.drop_path_uniform:
            rates = [cfg.drop_path_rate] * cfg.depth
        else:
            rates = [cfg.drop_path_rate * i / max(cfg.depth - 1, 1) for i in range(cfg.depth)]
        self.blocks = nn.ModuleList(
            Block(d, cfg.heads, cfg.mlp_ratio, cfg.layerscale_init, rates[i]) for i in range(cfg.depth)
        )
        self.norm = nn.LayerNorm(d)
        self.check_finite = True

    def init_weights(self, seed: int) -> None:
        """Deterministic init: truncated normal for weights/tokens, zero biases."""
        gen = torch.Generator().manual_seed(seed)
        for module in self.modules():
            if isinstance(module, (nn.Linear, nn.Conv2d)):
                trunc_normal_(module.weight, 0.02, gen)
                if module.bias is not None:
                    nn.init.zeros_(module.bias)
            elif isinstance(module, nn.LayerNorm):
                nn.init.ones_(module.weight)
                nn.init.zeros_(module.bias)
        trunc_normal_(self.cls_token, 0.02, gen)
        trunc_normal_(self.mask_token, 0.02, gen)
        trunc_normal_(self.pos_embed, 0.02, gen)
        for block in self.blocks:
            with torch.no_grad():
                block.ls1.fill_(self.cfg.layerscale_init)
                block.ls2.fill_(self.cfg.layerscale_init)

    def grid_for(self, size_px: int) -> int:
        if size_px % self.cfg.patch_size != 0:
            raise ValueError(f"view size {size_px} not divisible by patch size {self.cfg.patch_size}")
        return size_px // self.cfg.patch_size

    def embed_patches(self, x: torch.Tensor) -> torch.Tensor:
        """Strided-conv patch embedding -> (B, N, D), tokens row-major."""
        if x.ndim != 4:
            raise ValueError(f"expected (B, C, H, W) input, got shape {tuple(x.shape)}")
        if x.shape[1] != self.cfg.in_channels:
            raise ValueError(f"input has {x.shape[1]} channels, model expects {self.cfg.in_channels}")
        if x.shape[2] % self.cfg.patch_size or x.shape[3] % self.cfg.patch_size:
            raise ValueError(
                f"input {x.shape[2]}x{x.shape[3]} not divisible by patch size {self.cfg.patch_size}"
            )
        return self.patch_embed(x).flatten(2).transpose(1, 2)

    def _pos_for(self, grid_h: int, grid_w: int) -> torch.Tensor:
        patch_pos = interpolate_pos_embed(
            self.pos_embed[0, 1:],
            (self.cfg.pos_grid, self.cfg.pos_grid),
            (grid_h, grid_w),
            self.cfg.pos_interp_offset,
        )
        return torch.cat([self.pos_embed[0, :1], patch_pos], dim=0).unsqueeze(0)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> TokenOutput:
        """Run the transformer; `mask` is an optional (B, N) bool tensor whose
        True positions get the mask token instead of their patch embedding."""
        grid_h = x.shape[2] // self.cfg.patch_size
        grid_w = x.shape[3] // self.cfg.patch_size
        z = self.embed_patches(x)
        if mask is not None:
            if mask.shape != z.shape[:2]:
                raise ValueError(f"mask shape {tuple(mask.shape)} != token grid {tuple(z.shape[:2])}")
            z = torch.where(mask.unsqueeze(-1), self.mask_token.to(z.dtype), z)
        cls = self.cls_token.expand(z.shape[0], -1, -1).to(z.dtype)
        z = torch.cat([cls, z], dim=1)
        z = z + self._pos_for(grid_h, grid_w).to(z.dtype)
        for i, block in enumerate(self.blocks):
            z = block(z)
            if self.check_finite and not torch.isfinite(z).all():
                raise NumericalAbort(f"non-finite activations after block {i}")
        z = self.norm(z)
        return TokenOutput(class_token=z[:, 0], patch_tokens=z[:, 1:])

    def forward_masked(self, x: torch.Tensor, patch_mask: PatchMask) -> TokenOutput:
        grid_h = self.grid_for(x.shape[2])
        grid_w = self.grid_for(x.shape[3])
        if (patch_mask.grid_h, patch_mask.grid_w) != (grid_h, grid_w):
            raise ValueError(
                f"mask grid {patch_mask.grid_h}x{patch_mask.grid_w} != view grid {grid_h}x{grid_w}"
            )
        m = torch.from_numpy(patch_mask.mask).unsqueeze(0).expand(x.shape[0], -1)
        return self.forward(x, mask=m)


def build_backbone(cfg: ViTConfig, seed: int) -> MultiSpectralViT:
    model = MultiSpectralViT(cfg)
    model.init_weights(seed)
    return model


def views_to_tensor(views: list[np.ndarray]) -> torch.Tensor:
    """Stack same-sized (C, H, W) float arrays into a (B, C, H, W) tensor."""
    return torch.from_numpy(np.stack(views, axis=0))
