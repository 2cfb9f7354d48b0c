"""Hybrid Mamba/Transformer wirings (variants a-h), adapters and distillation losses."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .head import PROB_EPS, ParHead
from .models import ModelOutput, VitClassifier
from .nn import MLP, LayerNorm, Linear, Module, parameter
from .tensor import Tensor
from .vim import ConfigError, MambaBlock, VimBackbone, VimConfig
from .vit import VitBackbone, VitBlock, VitConfig

VARIANTS = {
    "a": "PaFusion",
    "b": "NASF",
    "c": "ASF",
    "d": "MaFormer",
    "e": "MaHDFT",
    "f": "AdaMTF",
    "g": "KDTM",
    "h": "MaKDF",
}
TEACHER_VARIANTS = ("e", "g", "h")


class HybridConfigError(ConfigError):
    pass


@dataclass(frozen=True)
class DistillLossConfig:
    mode: str = "logit"
    temperature: float = 2.0
    weight: float = 1.0

    def __post_init__(self):
        if self.mode not in ("feature", "logit"):
            raise ConfigError(f"distill mode must be 'feature' or 'logit', got {self.mode!r}")
        if not self.temperature > 0:
            raise ConfigError(f"distill temperature must be > 0, got {self.temperature}")
        if not self.weight >= 0:
            raise ConfigError(f"distill weight must be >= 0, got {self.weight}")


class DimAdapter(Module):
    """Independent linear maps Vim dim -> ViT dim (``up``) and back (``down``)."""

    def __init__(self, d_vim: int, d_vit: int, rng: np.random.Generator, init: str = "kaiming",
                 up: bool = True, down: bool = True):
        self.up = Linear(d_vim, d_vit, rng, init=init) if up else None
        self.down = Linear(d_vit, d_vim, rng, init=init) if down else None

    def to_vit(self, x: Tensor) -> Tensor:
        return self.up(x)

    def to_vim(self, x: Tensor) -> Tensor:
        return self.down(x)


def _feature_mse(student, teacher) -> Tensor:
    if isinstance(student, Tensor):
        student, teacher = [student], [teacher]
    if len(student) != len(teacher) or not student:
        raise ValueError(f"{len(student)} student features vs {len(teacher)} teacher features")
    total = None
    for s, t in zip(student, teacher):
        t_data = t.data if isinstance(t, Tensor) else np.asarray(t)
        if s.shape != t_data.shape:
            raise ValueError(f"feature shapes differ after adaptation: {s.shape} vs {t_data.shape}")
        diff = s - Tensor(t_data, dtype=s.dtype)
        term = (diff * diff).mean()
        total = term if total is None else total + term
    return total * (1.0 / len(student))


def binary_kl(teacher_logits, student_logits: Tensor, temperature: float) -> Tensor:
    """KL(teacher || student) over per-attribute Bernoulli outputs at temperature tau.

    Scaled by tau**2, summed over attributes and averaged over samples.
    """
    t = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    student_logits = T.as_tensor(student_logits)
    if t.shape != student_logits.shape:
        raise ValueError(f"logit shapes differ: {student_logits.shape} vs {t.shape}")
    pt = np.clip(T._sigmoid_np(t.astype(student_logits.dtype) / temperature), PROB_EPS, 1 - PROB_EPS)
    ps = T.clip(T.sigmoid(student_logits * (1.0 / temperature)), PROB_EPS, 1 - PROB_EPS)
    kl = pt * (np.log(pt) - T.log(ps)) + (1 - pt) * (np.log(1 - pt) - T.log(1.0 - ps))
    per = kl.sum(axis=-1) * (temperature ** 2)
    return per.mean() if per.ndim else per


def distill_loss(student_feats, student_logits, teacher_feats, teacher_logits,
                 cfg: DistillLossConfig) -> Tensor:
    """Unweighted distillation term; callers add ``cfg.weight * distill_loss(...)``."""
    if cfg.mode == "feature":
        return _feature_mse(student_feats, teacher_feats)
    return binary_kl(teacher_logits, student_logits, cfg.temperature)


def average_probs(logits_vit, logits_vim: Tensor) -> Tensor:
    """Mean of the two branches' sigmoid probabilities."""
    return (T.sigmoid(logits_vit) + T.sigmoid(logits_vim)) * 0.5


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise HybridConfigError(msg)


def _check_ratio(variant: str, vim_depth: int, vit_depth: int, ratio: int) -> None:
    _require(ratio >= 1, f"variant {variant}: ratio must be >= 1, got {ratio}")
    _require(vim_depth == ratio * vit_depth,
             f"variant {variant} requires vim_depth == ratio * vit_depth "
             f"(got {vim_depth} != {ratio} * {vit_depth})")


def _check_tokens(vim_cfg: VimConfig, vit_cfg: VitConfig) -> None:
    nv, nt = vim_cfg.patch_config().num_tokens, vit_cfg.patch_config().num_tokens
    _require(nv == nt, f"Vim and ViT token grids differ ({nv} vs {nt} tokens)")


class HybridModel(Module):
    variant = ""

    def forward(self, images) -> ModelOutput:
        feats, extras, aux = self.features(images)
        probs = T.sigmoid(self.head.logits(feats))
        return ModelOutput(probs, [probs], aux_loss=aux, features=feats, extras=extras)


class PaFusion(HybridModel):
    """(a) r Vim blocks and one ViT block in parallel, fused by a shared sum."""

    variant = "a"

    def __init__(self, vim_cfg, vit_cfg, num_attrs, rng, ratio=2):
        _check_ratio("a", vim_cfg.depth, vit_cfg.depth, ratio)
        _check_tokens(vim_cfg, vit_cfg)
        self.ratio = ratio
        self.vim = VimBackbone(vim_cfg, rng, final_norm=False)
        self.vit = VitBackbone(vit_cfg, rng)
        n = vit_cfg.depth
        self.adapters = [DimAdapter(vim_cfg.dim, vit_cfg.dim, rng, down=g < n - 1) for g in range(n)]
        self.head = ParHead(vit_cfg.dim, num_attrs, rng)

    def features(self, images):
        v, t = self.vim.embed(images), self.vit.embed(images)
        r = self.ratio
        for g, blk in enumerate(self.vit.blocks):
            for vb in self.vim.blocks[g * r:(g + 1) * r]:
                v = vb(v)
            s = blk(t) + self.adapters[g].to_vit(v)
            t = s
            if self.adapters[g].down is not None:
                v = self.adapters[g].to_vim(s)
        return self.vit.norm(t), {}, None


class NASF(HybridModel):
    """(b) the whole Vim stack, one dim change, then a short ViT tail."""

    variant = "b"

    def __init__(self, vim_cfg, vit_cfg, num_attrs, rng, ratio=2):
        self.vim = VimBackbone(vim_cfg, rng, final_norm=False)
        self.adapter = DimAdapter(vim_cfg.dim, vit_cfg.dim, rng, down=False)
        self.tail = [VitBlock(vit_cfg, rng) for _ in range(self.tail_depth(vit_cfg.depth))]
        self.norm = LayerNorm(vit_cfg.dim)
        self.head = ParHead(vit_cfg.dim, num_attrs, rng)

    @staticmethod
    def tail_depth(vit_depth: int) -> int:
        return max(1, math.ceil(vit_depth / 3))

    def features(self, images):
        x = self.vim(images)
        x = self.adapter.to_vit(x)
        for blk in self.tail:
            x = blk(x)
        return self.norm(x), {}, None


class ASF(HybridModel):
    """(c) alternating units: r Vim blocks -> up -> ViT block -> down."""

    variant = "c"

    def __init__(self, vim_cfg, vit_cfg, num_attrs, rng, ratio=2):
        _check_ratio("c", vim_cfg.depth, vit_cfg.depth, ratio)
        self.ratio = ratio
        self.vim = VimBackbone(vim_cfg, rng, final_norm=False)
        self.vit_blocks = [VitBlock(vit_cfg, rng) for _ in range(vit_cfg.depth)]
        self.adapters = [DimAdapter(vim_cfg.dim, vit_cfg.dim, rng) for _ in range(vit_cfg.depth)]
        self.final_up = Linear(vim_cfg.dim, vit_cfg.dim, rng)
        self.norm = LayerNorm(vit_cfg.dim)
        self.head = ParHead(vit_cfg.dim, num_attrs, rng)

    @property
    def units(self) -> int:
        return len(self.vit_blocks)

    def features(self, images):
        x = self.vim.embed(images)
        r = self.ratio
        for u, (blk, ad) in enumerate(zip(self.vit_blocks, self.adapters)):
            for vb in self.vim.blocks[u * r:(u + 1) * r]:
                x = vb(x)
            x = ad.to_vim(blk(ad.to_vit(x)))
        return self.norm(self.final_up(x)), {}, None


class MaFormer(HybridModel):
    """(d) a Vim side branch adds complementary features before each ViT block."""

    variant = "d"

    def __init__(self, vim_cfg, vit_cfg, num_attrs, rng, ratio=2):
        _check_ratio("d", vim_cfg.depth, vit_cfg.depth, ratio)
        self.ratio = ratio
        self.vit = VitBackbone(vit_cfg, rng)
        self.vim_blocks = [MambaBlock(vim_cfg, rng) for _ in range(vim_cfg.depth)]
        self.adapters = [DimAdapter(vim_cfg.dim, vit_cfg.dim, rng) for _ in range(vit_cfg.depth)]
        for ad in self.adapters:
            ad.up.weight.data[...] = 0.0
        self.head = ParHead(vit_cfg.dim, num_attrs, rng)

    def bridges(self) -> list[Module]:
        return [ad.up for ad in self.adapters]

    def features(self, images):
        u = self.vit.embed(images)
        r = self.ratio
        for s, (blk, ad) in enumerate(zip(self.vit.blocks, self.adapters)):
            m = ad.to_vim(u)
            for vb in self.vim_blocks[s * r:(s + 1) * r]:
                m = vb(m)
            u = blk(u + ad.to_vit(m))
        return self.vit.norm(u), {}, None


class TokenReducer(Module):
    """Shrink a (gh x gw) token grid to (oh x ow) by window pooling or a strided conv.

    ``pool`` averages each window then projects; ``conv`` flattens each window
    into one vector and projects it, which is a stride=kernel convolution.
    """

    def __init__(self, grid: tuple[int, int], out_grid: tuple[int, int], d_in: int, d_out: int,
                 rng: np.random.Generator, mode: str = "pool"):
        (gh, gw), (oh, ow) = grid, out_grid
        _require(gh % oh == 0 and gw % ow == 0,
                 f"reduced grid {oh}x{ow} must divide token grid {gh}x{gw}")
        _require(mode in ("pool", "conv"), f"unknown reduction mode {mode!r}")
        self.grid, self.out_grid, self.mode = grid, out_grid, mode
        self.win = (gh // oh, gw // ow)
        fan_in = d_in if mode == "pool" else d_in * self.win[0] * self.win[1]
        self.proj = Linear(fan_in, d_out, rng)

    @property
    def num_tokens(self) -> int:
        return self.out_grid[0] * self.out_grid[1]

    def forward(self, x: Tensor) -> Tensor:
        b, _, d = x.shape
        (oh, ow), (wh, ww) = self.out_grid, self.win
        x = x.reshape(b, oh, wh, ow, ww, d).transpose(0, 1, 3, 2, 4, 5)
        if self.mode == "pool":
            x = x.mean(axis=(3, 4)).reshape(b, oh * ow, d)
        else:
            x = x.reshape(b, oh * ow, wh * ww * d)
        return self.proj(x)


def _check_teacher(variant: str, teacher) -> None:
    _require(teacher is not None, f"variant {variant} needs a pre-trained teacher: missing teacher_ckpt")
    _require(isinstance(teacher, VitClassifier), f"variant {variant}: teacher must be a ViT classifier")
    _require(not teacher.trainable_parameters(),
             f"variant {variant}: teacher must be frozen before building the hybrid")


class MaHDFT(HybridModel):
    """(e) every frozen-teacher layer is reduced, concatenated and fused by Vim blocks."""

    variant = "e"

    def __init__(self, vim_cfg, teacher: VitClassifier, num_attrs, rng, fusion_layers=4,
                 reduce_grid=(2, 2), reduce_mode="pool"):
        _check_teacher("e", teacher)
        tcfg = teacher.cfg
        self.teacher = teacher
        grid = tcfg.patch_config().grid
        self.reducers = [TokenReducer(grid, tuple(reduce_grid), tcfg.dim, vim_cfg.dim, rng, reduce_mode)
                         for _ in range(tcfg.depth)]
        n = tcfg.depth * self.reducers[0].num_tokens
        self.pos_embed = parameter(rng.normal(0.0, 0.02, size=(n, vim_cfg.dim)))
        self.blocks = [MambaBlock(vim_cfg, rng) for _ in range(fusion_layers)]
        self.norm = LayerNorm(vim_cfg.dim)
        self.head = ParHead(vim_cfg.dim, num_attrs, rng)

    @property
    def fusion_length(self) -> int:
        return self.pos_embed.shape[0]

    def forward(self, images) -> ModelOutput:
        _, layers, logits_vit = self.teacher.forward_layers(images)
        x = T.concat([red(h) for red, h in zip(self.reducers, layers)], axis=-2) + self.pos_embed
        for blk in self.blocks:
            x = blk(x)
        feats = self.norm(x)
        logits_vim = self.head.logits(feats)
        p_vim = T.sigmoid(logits_vim)
        p_avg = average_probs(logits_vit, logits_vim)
        extras = {"logits_vit": logits_vit, "logits_vim": logits_vim, "probs_avg": p_avg}
        return ModelOutput(p_avg, [p_vim, p_avg], features=feats, extras=extras)


class AdaMTF(HybridModel):
    """(f) parallel Vim and ViT streams exchanging features through MLP adapters."""

    variant = "f"

    def __init__(self, vim_cfg, vit_cfg, num_attrs, rng, ratio=2, adapter_hidden=None):
        _check_ratio("f", vim_cfg.depth, vit_cfg.depth, ratio)
        _check_tokens(vim_cfg, vit_cfg)
        self.ratio = ratio
        self.vim = VimBackbone(vim_cfg, rng)
        self.vit = VitBackbone(vit_cfg, rng)
        hidden = adapter_hidden or vim_cfg.dim
        self.to_vim = [MLP(vit_cfg.dim, hidden, vim_cfg.dim, rng, zero_out=True)
                       for _ in range(vit_cfg.depth)]
        self.to_vit = [MLP(vim_cfg.dim, hidden, vit_cfg.dim, rng, zero_out=True)
                       for _ in range(vit_cfg.depth)]
        self.merge = Linear(vim_cfg.dim + vit_cfg.dim, vit_cfg.dim, rng)
        self.head = ParHead(vit_cfg.dim, num_attrs, rng)

    def bridges(self) -> list[Module]:
        return [m.fc2 for m in self.to_vim + self.to_vit]

    def features(self, images):
        v, t = self.vim.embed(images), self.vit.embed(images)
        r = self.ratio
        for s, blk in enumerate(self.vit.blocks):
            for vb in self.vim.blocks[s * r:(s + 1) * r]:
                v = vb(v)
            t = blk(t)
            v, t = v + self.to_vim[s](t), t + self.to_vit[s](v)
        fv, ft = self.vim.norm(v), self.vit.norm(t)
        feats = self.merge(T.concat([fv, ft], axis=-1))
        return feats, {"vim_stream": fv, "vit_stream": ft}, None


class KDTM(HybridModel):
    """(g) a Vim student distilled from a frozen ViT teacher (feature or logit level)."""

    variant = "g"

    def __init__(self, vim_cfg, teacher: VitClassifier, num_attrs, rng, ratio=2,
                 distill: DistillLossConfig = DistillLossConfig()):
        _check_teacher("g", teacher)
        self.distill = distill
        self.ratio = ratio
        self.teacher = teacher
        tcfg = teacher.cfg
        if distill.mode == "feature":
            _check_ratio("g", vim_cfg.depth, tcfg.depth, ratio)
            self.adapters = [Linear(vim_cfg.dim, tcfg.dim, rng) for _ in range(tcfg.depth)]
        else:
            self.adapters = []
        self.vim = VimBackbone(vim_cfg, rng)
        self.head = ParHead(vim_cfg.dim, num_attrs, rng)

    def pairs(self) -> list[tuple[int, int]]:
        """(student layer, teacher layer) index pairs used for feature distillation."""
        r = self.ratio
        return [(r * (k + 1) - 1, k) for k in range(len(self.adapters))]

    def forward(self, images) -> ModelOutput:
        feats, layers = self.vim(images, return_layers=True)
        logits = self.head.logits(feats)
        with T.no_grad():
            _, t_layers, t_logits = self.teacher.forward_layers(images)
        if self.distill.mode == "feature":
            student = [ad(layers[i]) for ad, (i, _) in zip(self.adapters, self.pairs())]
            teacher = [t_layers[k] for _, k in self.pairs()]
            d = distill_loss(student, None, teacher, None, self.distill)
        else:
            d = distill_loss(None, logits, None, t_logits, self.distill)
        probs = T.sigmoid(logits)
        return ModelOutput(probs, [probs], aux_loss=d * self.distill.weight, features=feats,
                           extras={"distill": d})


class MaKDF(HybridModel):
    """(h) a one-block Vim transition, distilled from the teacher, gated back into the student."""

    variant = "h"

    def __init__(self, vim_cfg, teacher: VitClassifier, num_attrs, rng, ratio=2,
                 transition_layer=None, distill_weight=1.0):
        _check_teacher("h", teacher)
        self.teacher = teacher
        self.distill_weight = distill_weight
        tcfg = teacher.cfg
        m = transition_layer if transition_layer is not None else max(1, vim_cfg.depth // 2)
        _require(1 <= m <= vim_cfg.depth,
                 f"variant h: transition layer must be in 1..{vim_cfg.depth}, got {m}")
        self.split = m
        self.teacher_layer = min(tcfg.depth, max(1, math.ceil(m / ratio))) - 1
        self.vim = VimBackbone(vim_cfg, rng)
        self.transition = MambaBlock(vim_cfg, rng)
        self.adapter = Linear(vim_cfg.dim, tcfg.dim, rng)
        self.gate = Linear(vim_cfg.dim, vim_cfg.dim, rng, init="zeros")
        self.head = ParHead(vim_cfg.dim, num_attrs, rng)

    def bridges(self) -> list[Module]:
        return [self.gate]

    def features(self, images):
        x = self.vim.embed(images)
        for blk in self.vim.blocks[:self.split]:
            x = blk(x)
        tr = self.transition(x)
        with T.no_grad():
            _, t_layers, _ = self.teacher.forward_layers(images)
        d = _feature_mse(self.adapter(tr), t_layers[self.teacher_layer])
        x = x + self.gate(tr)
        for blk in self.vim.blocks[self.split:]:
            x = blk(x)
        return self.vim.norm(x), {"distill": d}, d * self.distill_weight


def build_hybrid(variant: str, vim_cfg: VimConfig, vit_cfg: VitConfig, ratio: int = 2,
                 num_attrs: int = 8, rng: np.random.Generator | None = None,
                 teacher: VitClassifier | None = None, freeze_teacher: bool = True,
                 distill: DistillLossConfig = DistillLossConfig(), fusion_layers: int = 4,
                 reduce_grid=(2, 2), reduce_mode: str = "pool", transition_layer=None) -> HybridModel:
    """Construct and initialize one of the eight hybrid topologies."""
    if variant not in VARIANTS:
        raise HybridConfigError(f"unknown hybrid variant {variant!r}; expected one of {sorted(VARIANTS)}")
    rng = rng if rng is not None else np.random.default_rng(0)
    if variant in TEACHER_VARIANTS:
        _require(teacher is not None, f"variant {variant} needs a pre-trained teacher: missing teacher_ckpt")
        if freeze_teacher:
            teacher.freeze()
    if variant == "a":
        return PaFusion(vim_cfg, vit_cfg, num_attrs, rng, ratio)
    if variant == "b":
        return NASF(vim_cfg, vit_cfg, num_attrs, rng, ratio)
    if variant == "c":
        return ASF(vim_cfg, vit_cfg, num_attrs, rng, ratio)
    if variant == "d":
        return MaFormer(vim_cfg, vit_cfg, num_attrs, rng, ratio)
    if variant == "e":
        return MaHDFT(vim_cfg, teacher, num_attrs, rng, fusion_layers, reduce_grid, reduce_mode)
    if variant == "f":
        return AdaMTF(vim_cfg, vit_cfg, num_attrs, rng, ratio)
    if variant == "g":
        return KDTM(vim_cfg, teacher, num_attrs, rng, ratio, distill)
    return MaKDF(vim_cfg, teacher, num_attrs, rng, ratio, transition_layer, distill.weight)
