"""Multi-label attribute head and the positive-ratio weighted BCE loss."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Linear, Module, parameter
from .tensor import Tensor

PROB_EPS = 1e-7
WEIGHT_MODES = ("deepmar", "literal", "uniform")


class ParHead(Module):
    """Per-attribute feed-forward scorers.

    ``pooled`` mode mean-pools tokens and maps them to ``L`` logits at once;
    ``per_attribute`` mode scores row ``j`` of an (..., L, D) feature block
    with attribute ``j``'s own weights.
    """

    def __init__(self, dim: int, num_attrs: int, rng: np.random.Generator, mode: str = "pooled"):
        if mode not in ("pooled", "per_attribute"):
            raise ValueError(f"unknown head mode {mode!r}")
        self.mode = mode
        self.num_attrs = num_attrs
        if mode == "pooled":
            self.fc = Linear(dim, num_attrs, rng)
        else:
            bound = 1.0 / math.sqrt(dim)
            self.weight = parameter(rng.uniform(-bound, bound, size=(num_attrs, dim)))
            self.bias = parameter(np.zeros(num_attrs))

    def logits(self, features: Tensor) -> Tensor:
        if self.mode == "pooled":
            return self.fc(features.mean(axis=-2))
        if features.shape[-2] != self.num_attrs:
            raise ValueError(f"expected {self.num_attrs} attribute rows, got {features.shape}")
        return (features * self.weight).sum(axis=-1) + self.bias

    def forward(self, features: Tensor) -> Tensor:
        return T.sigmoid(self.logits(features))


def head_forward(features: Tensor, head: ParHead) -> Tensor:
    return head(features)


def positive_ratios(labels) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.float64)
    if labels.ndim != 2 or labels.shape[0] == 0:
        raise ValueError("positive_ratios needs a non-empty (samples, attrs) label matrix")
    return labels.mean(axis=0)


@dataclass
class LossWeights:
    ratios: np.ndarray
    mode: str = "deepmar"

    def __post_init__(self):
        self.ratios = np.asarray(self.ratios, dtype=np.float64)
        if self.mode not in WEIGHT_MODES:
            raise ValueError(f"weight mode must be one of {WEIGHT_MODES}, got {self.mode!r}")

    @classmethod
    def from_labels(cls, labels, mode: str = "deepmar") -> "LossWeights":
        return cls(positive_ratios(labels), mode)

    def pos_neg(self) -> tuple[np.ndarray, np.ndarray]:
        """Weights applied to the positive and negative log terms."""
        r = self.ratios
        if self.mode == "deepmar":
            return np.exp(1.0 - r), np.exp(r)
        if self.mode == "literal":
            w = np.exp(r)
            return w, w
        ones = np.ones_like(r)
        return ones, ones


def weighted_bce(probs: Tensor, labels, weights: LossWeights | None = None) -> Tensor:
    """Sum over attributes of weighted binary cross-entropy, averaged over samples."""
    probs = T.as_tensor(probs)
    if np.isnan(probs.data).any():
        raise T.NonFiniteError("weighted_bce received NaN probabilities")
    y = np.asarray(labels, dtype=probs.dtype)
    p = T.clip(probs, PROB_EPS, 1.0 - PROB_EPS)
    if weights is None or weights.mode == "uniform":
        per = y * T.log(p) + (1.0 - y) * T.log(1.0 - p)
    else:
        wp, wn = (w.astype(probs.dtype) for w in weights.pos_neg())
        per = (wp * y) * T.log(p) + (wn * (1.0 - y)) * T.log(1.0 - p)
    total = -per.sum(axis=-1)
    return total.mean() if total.ndim else total
