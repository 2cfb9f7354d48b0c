"""INI experiment config with ``[model]``, ``[train]`` and ``[data]`` sections.

Unknown sections or keys are errors. Relative paths resolve against the
config file's directory.
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from .hybrid import VARIANTS
from .vim import VIM_PRESETS, ConfigError, VimConfig
from .vit import VIT_PRESETS, VitConfig

MODEL_VARIANTS = ("vim", "vit", "vsf") + tuple(VARIANTS)


@dataclass
class ModelSection:
    variant: str = "vim"
    vim: str = "vim-tiny"
    vit: str = "vit-tiny"
    vim_depth: Optional[int] = None
    vim_dim: Optional[int] = None
    vim_d_state: Optional[int] = None
    vit_depth: Optional[int] = None
    vit_dim: Optional[int] = None
    vit_heads: Optional[int] = None
    patch: Optional[int] = None
    height: Optional[int] = None
    width: Optional[int] = None
    ratio: int = 2
    teacher_ckpt: str = ""
    text_blocks: int = 2
    fusion_blocks: int = 2
    fusion_bidirectional: bool = True
    attr_embeddings: str = ""
    init_backbone: str = ""
    freeze_backbone: bool = False
    distill_mode: str = "logit"
    reduce_grid: str = "2x2"
    reduce_mode: str = "pool"
    mahdft_layers: int = 4
    transition_layer: Optional[int] = None

    def vim_config(self) -> VimConfig:
        if self.vim not in VIM_PRESETS:
            raise ConfigError(f"unknown vim preset {self.vim!r}; choose from {sorted(VIM_PRESETS)}")
        over = {k: v for k, v in (("depth", self.vim_depth), ("dim", self.vim_dim),
                                  ("d_state", self.vim_d_state), ("patch", self.patch),
                                  ("height", self.height), ("width", self.width)) if v is not None}
        return replace(VIM_PRESETS[self.vim], **over)

    def vit_config(self) -> VitConfig:
        if self.vit not in VIT_PRESETS:
            raise ConfigError(f"unknown vit preset {self.vit!r}; choose from {sorted(VIT_PRESETS)}")
        over = {k: v for k, v in (("depth", self.vit_depth), ("dim", self.vit_dim),
                                  ("heads", self.vit_heads), ("patch", self.patch),
                                  ("height", self.height), ("width", self.width)) if v is not None}
        return replace(VIT_PRESETS[self.vit], **over)

    def grid(self) -> tuple[int, int]:
        try:
            h, w = (int(v) for v in self.reduce_grid.lower().split("x"))
        except ValueError:
            raise ConfigError(f"reduce_grid must look like '2x2', got {self.reduce_grid!r}") from None
        return h, w

    def validate(self) -> None:
        if self.variant not in MODEL_VARIANTS:
            raise ConfigError(f"model.variant must be one of {MODEL_VARIANTS}, got {self.variant!r}")
        if self.ratio < 1:
            raise ConfigError("model.ratio must be >= 1")
        if self.init_backbone and self.variant not in ("vim", "vsf"):
            raise ConfigError("model.init_backbone applies to the vim and vsf variants only")
        if self.freeze_backbone and not self.init_backbone:
            raise ConfigError("model.freeze_backbone needs model.init_backbone")
        self.vim_config()
        self.vit_config()
        self.grid()


@dataclass
class TrainSection:
    epochs: int = 20
    batch: int = 32
    lr: float = 1e-3
    seed: int = 0
    weight_mode: str = "deepmar"
    distill_lambda: float = 1.0
    distill_tau: float = 2.0
    precision: str = "float64"
    target_mA_bal: Optional[float] = None
    target_f1: Optional[float] = None

    def validate(self) -> None:
        if not self.lr > 0:
            raise ConfigError(f"train.lr must be > 0, got {self.lr}")
        if self.epochs < 1:
            raise ConfigError(f"train.epochs must be >= 1, got {self.epochs}")
        if self.batch < 1:
            raise ConfigError(f"train.batch must be >= 1, got {self.batch}")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"train.precision must be float32 or float64, got {self.precision!r}")


@dataclass
class DataSection:
    manifest: str = ""
    eval_manifest: str = ""
    augment: bool = False

    def validate(self) -> None:
        if not self.manifest:
            raise ConfigError("data.manifest is required")


@dataclass
class ExperimentConfig:
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    data: DataSection = field(default_factory=DataSection)

    def validate(self) -> "ExperimentConfig":
        self.model.validate()
        self.train.validate()
        self.data.validate()
        return self

    def to_text(self) -> str:
        out = []
        for name in ("model", "train", "data"):
            out.append(f"[{name}]")
            section = getattr(self, name)
            for f in fields(section):
                v = getattr(section, f.name)
                if v is None:
                    continue
                out.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
            out.append("")
        return "\n".join(out)


_SECTIONS = {"model": ModelSection, "train": TrainSection, "data": DataSection}
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _convert(section: str, key: str, raw: str, typ):
    base = typ
    if isinstance(typ, str):
        base = {"int": int, "float": float, "bool": bool, "str": str}.get(
            typ.replace("Optional[", "").rstrip("]"), str)
    try:
        if base is bool:
            low = raw.strip().lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        return base(raw.strip())
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {base.__name__}") from None


def parse_config(text: str, base_dir=None) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config syntax error: {exc}") from None
    unknown = set(cp.sections()) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    cfg = ExperimentConfig()
    for name, cls in _SECTIONS.items():
        if not cp.has_section(name):
            continue
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for key, raw in cp.items(name):
            if key not in types:
                raise ConfigError(f"unknown key {key!r} in [{name}]")
            values[key] = _convert(name, key, raw, types[key])
        setattr(cfg, name, cls(**values))
    if base_dir is not None:
        base = Path(base_dir)
        for sec, key in (("data", "manifest"), ("data", "eval_manifest"),
                         ("model", "teacher_ckpt"), ("model", "attr_embeddings"),
                         ("model", "init_backbone")):
            s = getattr(cfg, sec)
            v = getattr(s, key)
            if v and not Path(v).is_absolute():
                setattr(s, key, str((base / v).resolve()))
    return cfg.validate()


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    return parse_config(path.read_text(encoding="utf-8"), base_dir=path.parent)


def with_overrides(cfg: ExperimentConfig, **sections) -> ExperimentConfig:
    """Copy of ``cfg`` with per-section dicts of replacements, e.g. ``train={"epochs": 2}``."""
    new = dataclasses.replace(cfg)
    for name, over in sections.items():
        setattr(new, name, replace(getattr(cfg, name), **over))
    return new.validate()
