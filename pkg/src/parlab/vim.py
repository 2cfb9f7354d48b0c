"""Vision Mamba: patch tokens, bidirectional selective-scan blocks, backbone."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import LayerNorm, Linear, Module, parameter
from .ssm import inverse_softplus, selective_scan
from .tensor import Tensor


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PatchEmbedConfig:
    height: int = 64
    width: int = 32
    patch: int = 8
    dim: int = 64
    channels: int = 3

    def __post_init__(self):
        if self.height % self.patch or self.width % self.patch:
            raise ConfigError(
                f"patch size {self.patch} must divide image {self.height}x{self.width}")
        if self.dim < 1:
            raise ConfigError("embed dim must be >= 1")

    @property
    def grid(self) -> tuple[int, int]:
        return self.height // self.patch, self.width // self.patch

    @property
    def num_tokens(self) -> int:
        gh, gw = self.grid
        return gh * gw


@dataclass(frozen=True)
class VimConfig:
    depth: int = 4
    dim: int = 64
    expand: int = 2
    d_state: int = 8
    d_conv: int = 4
    patch: int = 8
    height: int = 64
    width: int = 32

    @property
    def inner(self) -> int:
        return self.expand * self.dim

    @property
    def dt_rank(self) -> int:
        return max(1, math.ceil(self.dim / 16))

    def patch_config(self) -> PatchEmbedConfig:
        return PatchEmbedConfig(self.height, self.width, self.patch, self.dim)


VIM_PRESETS = {
    "vim-micro": VimConfig(depth=2, dim=32),
    "vim-tiny": VimConfig(depth=4, dim=64),
    "vim-s": VimConfig(depth=24, dim=384, d_state=16, patch=16, height=256, width=128),
}


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, C, H, W) -> (B, T, C*P*P), non-overlapping patches in row-major order."""
    images = np.asarray(images)
    squeeze = images.ndim == 3
    if squeeze:
        images = images[None]
    b, c, h, w = images.shape
    if h % patch or w % patch:
        raise ConfigError(f"patch size {patch} must divide image {h}x{w}")
    gh, gw = h // patch, w // patch
    x = images.reshape(b, c, gh, patch, gw, patch).transpose(0, 2, 4, 1, 3, 5)
    x = x.reshape(b, gh * gw, c * patch * patch)
    return x[0] if squeeze else x


class PatchEmbed(Module):
    def __init__(self, cfg: PatchEmbedConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.proj = Linear(cfg.channels * cfg.patch * cfg.patch, cfg.dim, rng)

    def forward(self, images) -> Tensor:
        if isinstance(images, Tensor):
            images = images.data
        return self.proj(Tensor(patchify(images, self.cfg.patch)))


def add_positional(tokens: Tensor, pe: Tensor) -> Tensor:
    if tuple(tokens.shape[-2:]) != tuple(pe.shape):
        raise ValueError(f"positional table {pe.shape} does not match tokens {tokens.shape}")
    return tokens + pe


class SelectiveSSM(Module):
    """Projections producing (delta, B, C) from the input, plus A and the D skip."""

    def __init__(self, inner: int, d_state: int, dt_rank: int, rng: np.random.Generator,
                 dt_min: float = 1e-3, dt_max: float = 1e-1):
        self.d_state = d_state
        self.dt_rank = dt_rank
        self.x_proj = Linear(inner, dt_rank + 2 * d_state, rng, bias=False)
        self.dt_proj = Linear(dt_rank, inner, rng)
        dt = np.exp(rng.uniform(math.log(dt_min), math.log(dt_max), size=inner))
        self.dt_proj.bias.data[...] = inverse_softplus(dt)
        self.A_log = parameter(np.log(np.tile(np.arange(1, d_state + 1, dtype=np.float64), (inner, 1))))
        self.D = parameter(np.ones(inner))

    def params(self, x: Tensor):
        proj = self.x_proj(x)
        dt_low, B, C = T.split(proj, [self.dt_rank, self.d_state, self.d_state], axis=-1)
        delta = T.softplus(self.dt_proj(dt_low))
        return delta, B, C

    def forward(self, x: Tensor) -> Tensor:
        delta, B, C = self.params(x)
        A = -T.exp(self.A_log)
        return selective_scan(x, delta, A, B, C, self.D)


class ScanBranch(Module):
    """conv1d -> SiLU -> selective scan, in one scan direction."""

    def __init__(self, cfg: VimConfig, rng: np.random.Generator):
        k, e = cfg.d_conv, cfg.inner
        bound = 1.0 / math.sqrt(k)
        self.conv_w = parameter(rng.uniform(-bound, bound, size=(k, e)))
        self.conv_b = parameter(np.zeros(e))
        self.ssm = SelectiveSSM(e, cfg.d_state, cfg.dt_rank, rng)

    def forward(self, x: Tensor) -> Tensor:
        u = T.silu(T.conv1d_causal_depthwise(x, self.conv_w, self.conv_b))
        return self.ssm(u)


class MambaBlock(Module):
    """Pre-norm Mamba block with residual; bidirectional for vision.

    ``out = x + W_out(silu(z) * fwd(xi) + silu(z) * rev(bwd(rev(xi))))`` where
    ``(xi, z)`` are the two halves of the input projection of ``norm(x)``.
    """

    def __init__(self, cfg: VimConfig, rng: np.random.Generator, bidirectional: bool = True):
        self.cfg = cfg
        self.bidirectional = bidirectional
        self.norm = LayerNorm(cfg.dim)
        self.in_proj = Linear(cfg.dim, 2 * cfg.inner, rng)
        self.fwd = ScanBranch(cfg, rng)
        self.bwd = ScanBranch(cfg, rng) if bidirectional else None
        self.out_proj = Linear(cfg.inner, cfg.dim, rng)

    def branches(self, tokens: Tensor) -> tuple[Tensor, Tensor | None, Tensor]:
        u = self.norm(tokens)
        xi, z = T.split(self.in_proj(u), [self.cfg.inner, self.cfg.inner], axis=-1)
        f = self.fwd(xi)
        b = T.flip(self.bwd(T.flip(xi, -2)), -2) if self.bidirectional else None
        return f, b, z

    def forward(self, tokens: Tensor) -> Tensor:
        f, b, z = self.branches(tokens)
        gate = T.silu(z)
        mixed = gate * f
        if b is not None:
            mixed = mixed + gate * b
        return tokens + self.out_proj(mixed)

    def tie_branches(self) -> None:
        """Make the backward branch share the forward branch's parameter values."""
        for (_, pf), (_, pb) in zip(self.fwd.named_parameters(), self.bwd.named_parameters()):
            pb.data = pf.data.copy()


def vim_block_forward(tokens: Tensor, block: MambaBlock) -> Tensor:
    return block(tokens)


class VimBackbone(Module):
    def __init__(self, cfg: VimConfig, rng: np.random.Generator, final_norm: bool = True):
        if cfg.depth < 1:
            raise ConfigError("Vim backbone needs at least one block")
        self.cfg = cfg
        pcfg = cfg.patch_config()
        self.patch_embed = PatchEmbed(pcfg, rng)
        self.pos_embed = parameter(rng.normal(0.0, 0.02, size=(pcfg.num_tokens, cfg.dim)))
        self.blocks = [MambaBlock(cfg, rng) for _ in range(cfg.depth)]
        self.norm = LayerNorm(cfg.dim) if final_norm else None

    @property
    def num_tokens(self) -> int:
        return self.cfg.patch_config().num_tokens

    def embed(self, images) -> Tensor:
        return add_positional(self.patch_embed(images), self.pos_embed)

    def forward(self, images, return_layers: bool = False):
        return self.forward_tokens(self.embed(images), return_layers)

    def forward_tokens(self, x: Tensor, return_layers: bool = False):
        layers = []
        for blk in self.blocks:
            x = blk(x)
            layers.append(x)
        out = self.norm(x) if self.norm is not None else x
        return (out, layers) if return_layers else out


def vim_backbone_forward(images, backbone: VimBackbone) -> Tensor:
    return backbone(images)
