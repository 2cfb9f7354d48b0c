"""Model construction from config, the training loop, evaluation and checkpoint loading."""
from __future__ import annotations

import configparser
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .checkpoint import CheckpointError, read_checkpoint, save_checkpoint
from .config import ExperimentConfig, ModelSection, parse_config
from .data import augment_batch, load_dataset, read_manifest
from .head import LossWeights
from .hybrid import VARIANTS, DistillLossConfig, HybridConfigError, build_hybrid
from .metrics import MetricReport, compute_metrics
from .models import VimClassifier, VitClassifier, VSFClassifier, model_loss
from .nn import Module
from .text import AttributeVocab, read_aemb
from .vim import ConfigError, VimBackbone

# model fields that only point at files; they do not change the architecture
_PATH_FIELDS = ("teacher_ckpt", "attr_embeddings", "init_backbone")


def dtype_of(cfg: ExperimentConfig):
    return np.float32 if cfg.train.precision == "float32" else np.float64


def snapshot_text(cfg: ExperimentConfig, attrs: list[str]) -> str:
    return cfg.to_text() + "[meta]\nattrs = " + ",".join(attrs) + "\n"


def parse_snapshot(text: str) -> tuple[ExperimentConfig, list[str]]:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp.read_string(text)
    if not cp.has_option("meta", "attrs"):
        raise CheckpointError("config snapshot has no [meta] attrs")
    attrs = [a for a in cp.get("meta", "attrs").split(",") if a]
    head, _, _ = text.partition("[meta]")
    return parse_config(head), attrs


def architecture(model: ModelSection) -> dict:
    return {f.name: getattr(model, f.name) for f in fields(model) if f.name not in _PATH_FIELDS}


def load_teacher(path, vit_cfg) -> VitClassifier:
    text, state = read_checkpoint(path)
    tcfg, attrs = parse_snapshot(text)
    if tcfg.model.variant != "vit":
        raise CheckpointError(f"{path}: teacher must be a 'vit' checkpoint, got {tcfg.model.variant!r}")
    if tcfg.model.vit_config() != vit_cfg:
        raise CheckpointError(f"{path}: teacher architecture {tcfg.model.vit_config()} "
                              f"does not match the configured ViT {vit_cfg}")
    teacher = VitClassifier(vit_cfg, len(attrs), np.random.default_rng(0))
    teacher.load_state_dict(state)
    return teacher.freeze()


def load_backbone(backbone: VimBackbone, path) -> None:
    """Copy the Vim backbone weights of a trained ``vim`` checkpoint into ``backbone``."""
    text, state = read_checkpoint(path)
    src, _ = parse_snapshot(text)
    if src.model.variant != "vim":
        raise CheckpointError(f"{path}: init_backbone must be a 'vim' checkpoint, got {src.model.variant!r}")
    if src.model.vim_config() != backbone.cfg:
        raise CheckpointError(f"{path}: backbone architecture {src.model.vim_config()} "
                              f"does not match the configured Vim {backbone.cfg}")
    prefix = "backbone."
    backbone.load_state_dict({k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)})


def build_model(cfg: ExperimentConfig, attrs: list[str], rng: np.random.Generator,
                teacher: VitClassifier | None = None, init: bool = True) -> Module:
    """Instantiate the configured model.

    Teacher variants load ``teacher_ckpt`` unless given one. With ``init``,
    a configured ``init_backbone`` checkpoint seeds the Vim backbone, which
    ``freeze_backbone`` then excludes from training.
    """
    m = cfg.model
    n = len(attrs)
    vim_cfg, vit_cfg = m.vim_config(), m.vit_config()
    if m.variant == "vim":
        model = VimClassifier(vim_cfg, n, rng)
    elif m.variant == "vit":
        model = VitClassifier(vit_cfg, n, rng)
    elif m.variant == "vsf":
        external = read_aemb(m.attr_embeddings) if m.attr_embeddings else None
        model = VSFClassifier(vim_cfg, AttributeVocab(list(attrs)), rng, m.text_blocks,
                              m.fusion_blocks, m.fusion_bidirectional, external=external)
    elif m.variant in VARIANTS:
        if m.variant in ("e", "g", "h") and teacher is None:
            if not m.teacher_ckpt:
                raise HybridConfigError(f"variant {m.variant} needs a pre-trained teacher: "
                                        "missing teacher_ckpt")
            teacher = load_teacher(m.teacher_ckpt, vit_cfg)
        distill = DistillLossConfig(m.distill_mode, cfg.train.distill_tau, cfg.train.distill_lambda)
        model = build_hybrid(m.variant, vim_cfg, vit_cfg, m.ratio, n, rng, teacher=teacher,
                             distill=distill, fusion_layers=m.mahdft_layers, reduce_grid=m.grid(),
                             reduce_mode=m.reduce_mode, transition_layer=m.transition_layer)
    else:
        raise ConfigError(f"unknown variant {m.variant!r}")
    if init and m.init_backbone:
        load_backbone(model.backbone, m.init_backbone)
    if m.freeze_backbone:
        model.backbone.freeze()
    for name, p in model.named_parameters():
        p.name = name
    return model


def load_model(path, expect: ModelSection | None = None):
    """Rebuild a model from a checkpoint. Returns ``(model, config, attrs)``.

    When ``expect`` is given, the stored architecture must match it.
    """
    text, state = read_checkpoint(path)
    cfg, attrs = parse_snapshot(text)
    if expect is not None and architecture(expect) != architecture(cfg.model):
        diff = sorted(k for k, v in architecture(expect).items() if architecture(cfg.model)[k] != v)
        raise CheckpointError(f"{path}: config mismatch on model fields {diff}")
    with T.default_dtype(dtype_of(cfg)):
        teacher = None
        if cfg.model.variant in ("e", "g", "h"):
            teacher = VitClassifier(cfg.model.vit_config(), len(attrs), np.random.default_rng(0)).freeze()
        model = build_model(cfg, attrs, np.random.default_rng(0), teacher=teacher, init=False)
        try:
            model.load_state_dict(state)
        except (KeyError, ValueError) as exc:
            raise CheckpointError(f"{path}: config mismatch: {exc}") from None
    return model, cfg, attrs


def predict(model: Module, images: np.ndarray, batch: int = 64) -> np.ndarray:
    outs = []
    with T.no_grad():
        for s in range(0, len(images), batch):
            outs.append(model(images[s:s + batch]).probs.data)
    return np.concatenate(outs, axis=0)


def evaluate(model: Module, images: np.ndarray, labels: np.ndarray, batch: int = 64) -> MetricReport:
    if not len(images):
        raise ValueError("cannot evaluate on an empty sample set")
    return compute_metrics(predict(model, images, batch), labels)


def evaluate_checkpoint(ckpt, manifest_path, batch: int = 64) -> tuple[MetricReport, list[str]]:
    model, cfg, attrs = load_model(ckpt)
    man = read_manifest(manifest_path)
    if not len(man):
        raise ValueError(f"{manifest_path}: manifest has no samples")
    if man.attrs != attrs:
        raise ValueError(f"{manifest_path}: attributes {man.attrs} differ from the checkpoint's {attrs}")
    with T.default_dtype(dtype_of(cfg)):
        images, labels = load_dataset(man, dtype_of(cfg))
        return evaluate(model, images, labels, batch), attrs


@dataclass
class EpochLog:
    epoch: int
    loss: float
    metrics: dict
    seconds: float

    def line(self) -> str:
        ms = " ".join(f"{k}={v:.6f}" for k, v in self.metrics.items())
        return f"epoch={self.epoch} loss={self.loss:.6f} {ms} time={self.seconds:.1f}s"


@dataclass
class TrainResult:
    history: list[EpochLog]
    best: MetricReport
    best_path: Path
    final_path: Path
    model: Module = field(repr=False)


def _check_shapes(cfg: ExperimentConfig, man) -> None:
    for c in (cfg.model.vim_config(), cfg.model.vit_config()):
        if (c.height, c.width) != (man.height, man.width):
            raise ConfigError(f"model expects {c.height}x{c.width} images, manifest has "
                              f"{man.height}x{man.width}")


def train(cfg: ExperimentConfig, out_dir, log: Callable[[str], None] = print) -> TrainResult:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dtype = dtype_of(cfg)
    tc = cfg.train
    with T.default_dtype(dtype):
        man = read_manifest(cfg.data.manifest)
        _check_shapes(cfg, man)
        images, labels = load_dataset(man, dtype)
        if cfg.data.eval_manifest:
            ev_man = read_manifest(cfg.data.eval_manifest)
            if ev_man.attrs != man.attrs:
                raise ValueError("eval manifest attributes differ from the training manifest")
            ev_images, ev_labels = load_dataset(ev_man, dtype)
        else:
            ev_images, ev_labels = images, labels

        init_ss, shuffle_ss, aug_ss = np.random.SeedSequence(tc.seed).spawn(3)
        model = build_model(cfg, man.attrs, np.random.default_rng(init_ss))
        shuffle_rng, aug_rng = np.random.default_rng(shuffle_ss), np.random.default_rng(aug_ss)
        weights = LossWeights.from_labels(labels, tc.weight_mode)
        opt = T.Adam(model.trainable_parameters(), lr=tc.lr)
        snapshot = snapshot_text(cfg, man.attrs)
        best_path, final_path = out / "best.ckpt", out / "final.ckpt"
        history: list[EpochLog] = []
        best: MetricReport | None = None
        n = len(images)

        with open(out / "train.log", "w", encoding="utf-8") as fh:
            for epoch in range(1, tc.epochs + 1):
                t0 = time.perf_counter()
                perm = shuffle_rng.permutation(n)
                total = 0.0
                for step, s in enumerate(range(0, n, tc.batch)):
                    idx = perm[s:s + tc.batch]
                    x = augment_batch(images[idx], aug_rng, cfg.data.augment)
                    res = model(x)
                    where = f"epoch {epoch} step {step}"
                    for p in res.task_probs:
                        T.check_finite(p, where)
                    loss = model_loss(res, labels[idx], weights)
                    T.check_finite(loss, where + " loss")
                    opt.zero_grad()
                    loss.backward()
                    opt.step()
                    total += loss.item() * len(idx)
                report = evaluate(model, ev_images, ev_labels, max(tc.batch, 64))
                entry = EpochLog(epoch, total / n, report.as_dict(), time.perf_counter() - t0)
                history.append(entry)
                fh.write(entry.line() + "\n")
                fh.flush()
                log(entry.line())
                if best is None or report.mA_balanced > best.mA_balanced:
                    best = report
                    save_checkpoint(model, best_path, snapshot)
                if (tc.target_mA_bal is not None and report.mA_balanced >= tc.target_mA_bal
                        and (tc.target_f1 is None or report.f1 >= tc.target_f1)):
                    log(f"targets reached at epoch {epoch}; stopping")
                    break
        save_checkpoint(model, final_path, snapshot)
    return TrainResult(history, best, best_path, final_path, model)
