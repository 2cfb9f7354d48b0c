"""Pre-norm ViT blocks and backbone."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import MLP, LayerNorm, Linear, Module, parameter
from .tensor import Tensor
from .vim import ConfigError, PatchEmbed, PatchEmbedConfig, add_positional


@dataclass(frozen=True)
class VitConfig:
    depth: int = 4
    dim: int = 128
    heads: int = 4
    mlp_ratio: int = 4
    patch: int = 8
    height: int = 64
    width: int = 32

    def __post_init__(self):
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by {self.heads} heads")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    def patch_config(self) -> PatchEmbedConfig:
        return PatchEmbedConfig(self.height, self.width, self.patch, self.dim)


VIT_PRESETS = {
    "vit-micro": VitConfig(depth=2, dim=64, heads=2),
    "vit-tiny": VitConfig(depth=4, dim=128, heads=4),
    "vit-s": VitConfig(depth=12, dim=384, heads=6, patch=16, height=256, width=128),
    "vit-b": VitConfig(depth=12, dim=768, heads=12, patch=16, height=256, width=128),
}


class MultiHeadAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.heads = heads
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng)

    def attention(self, tokens: Tensor) -> tuple[Tensor, Tensor]:
        """Return (pre-projection head outputs merged to (..., T, D), attention weights)."""
        *lead, n, d = tokens.shape
        h = self.heads
        dh = d // h
        qkv = self.qkv(tokens).reshape(tuple(lead) + (n, 3, h, dh))
        nl = len(lead)
        # -> (3, *lead, h, T, dh)
        qkv = qkv.transpose((nl + 1,) + tuple(range(nl)) + (nl + 2, nl, nl + 3))
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = T.matmul(q, T.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh))
        weights = T.softmax(scores, axis=-1)
        out = T.matmul(weights, v)                       # (*lead, h, T, dh)
        out = T.swapaxes(out, -3, -2).reshape(tuple(lead) + (n, d))
        return out, weights

    def forward(self, tokens: Tensor) -> Tensor:
        out, _ = self.attention(tokens)
        return self.proj(out)


def mha(tokens: Tensor, attn: MultiHeadAttention) -> Tensor:
    return attn(tokens)


class VitBlock(Module):
    def __init__(self, cfg: VitConfig, rng: np.random.Generator):
        self.norm1 = LayerNorm(cfg.dim)
        self.attn = MultiHeadAttention(cfg.dim, cfg.heads, rng)
        self.norm2 = LayerNorm(cfg.dim)
        self.mlp = MLP(cfg.dim, cfg.mlp_ratio * cfg.dim, cfg.dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


def vit_block_forward(tokens: Tensor, block: VitBlock) -> Tensor:
    return block(tokens)


class VitBackbone(Module):
    def __init__(self, cfg: VitConfig, rng: np.random.Generator, positional: bool = True,
                 final_norm: bool = True):
        if cfg.depth < 1:
            raise ConfigError("ViT backbone needs at least one block")
        self.cfg = cfg
        pcfg = cfg.patch_config()
        self.patch_embed = PatchEmbed(pcfg, rng)
        self.pos_embed = parameter(rng.normal(0.0, 0.02, size=(pcfg.num_tokens, cfg.dim))) \
            if positional else None
        self.blocks = [VitBlock(cfg, rng) for _ in range(cfg.depth)]
        self.norm = LayerNorm(cfg.dim) if final_norm else None

    @property
    def num_tokens(self) -> int:
        return self.cfg.patch_config().num_tokens

    def embed(self, images) -> Tensor:
        x = self.patch_embed(images)
        return add_positional(x, self.pos_embed) if self.pos_embed is not None else x

    def forward(self, images, return_layers: bool = False):
        return self.forward_tokens(self.embed(images), return_layers)

    def forward_tokens(self, x: Tensor, return_layers: bool = False):
        layers = []
        for blk in self.blocks:
            x = blk(x)
            layers.append(x)
        out = self.norm(x) if self.norm is not None else x
        return (out, layers) if return_layers else out


def vit_backbone_forward(images, backbone: VitBackbone, return_layers: bool = False):
    return backbone(images, return_layers=return_layers)
