"""Single-backbone attribute classifiers and the shared model output record."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .head import LossWeights, ParHead, weighted_bce
from .nn import Module
from .tensor import Tensor
from .text import AttributeVocab, VSFStack
from .vim import VimBackbone, VimConfig
from .vit import VitBackbone, VitConfig


@dataclass
class ModelOutput:
    """``probs`` are the scores used for evaluation; ``task_probs`` each get a BCE term."""

    probs: Tensor
    task_probs: list[Tensor]
    aux_loss: Tensor | None = None
    features: Tensor | None = None
    extras: dict = field(default_factory=dict)


def model_loss(out: ModelOutput, labels, weights: LossWeights | None) -> Tensor:
    loss = weighted_bce(out.task_probs[0], labels, weights)
    for p in out.task_probs[1:]:
        loss = loss + weighted_bce(p, labels, weights)
    if out.aux_loss is not None:
        loss = loss + out.aux_loss
    return loss


class Classifier(Module):
    """Backbone features -> pooled head. Subclasses set ``backbone`` and ``head``."""

    def features(self, images) -> Tensor:
        return self.backbone(images)

    def logits(self, images) -> Tensor:
        return self.head.logits(self.features(images))

    def forward(self, images) -> ModelOutput:
        feats = self.features(images)
        probs = T.sigmoid(self.head.logits(feats))
        return ModelOutput(probs, [probs], features=feats)


class VimClassifier(Classifier):
    def __init__(self, cfg: VimConfig, num_attrs: int, rng: np.random.Generator):
        self.backbone = VimBackbone(cfg, rng)
        self.head = ParHead(cfg.dim, num_attrs, rng)


class VitClassifier(Classifier):
    def __init__(self, cfg: VitConfig, num_attrs: int, rng: np.random.Generator):
        self.cfg = cfg
        self.backbone = VitBackbone(cfg, rng)
        self.head = ParHead(cfg.dim, num_attrs, rng)

    def forward_layers(self, images):
        """Final features, every block's output, and logits of the retained head."""
        feats, layers = self.backbone(images, return_layers=True)
        return feats, layers, self.head.logits(feats)


class VSFClassifier(Module):
    """Vim visual tokens fused with attribute-phrase tokens; one logit per phrase row."""

    def __init__(self, cfg: VimConfig, vocab: AttributeVocab, rng: np.random.Generator,
                 text_blocks: int = 2, fusion_blocks: int = 2, fusion_bidirectional: bool = True,
                 external: np.ndarray | None = None):
        self.backbone = VimBackbone(cfg, rng)
        self.vsf = VSFStack(vocab, cfg, rng, text_blocks, fusion_blocks, fusion_bidirectional,
                            external=external)
        self.head = ParHead(cfg.dim, len(vocab), rng, mode="per_attribute")

    def forward(self, images) -> ModelOutput:
        fused = self.vsf(self.backbone(images))
        probs = T.sigmoid(self.head.logits(fused))
        return ModelOutput(probs, [probs], features=fused)
