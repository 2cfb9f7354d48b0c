"""Attribute-phrase tokens, the text Mamba stack and vision-semantic fusion."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .nn import Linear, Module, parameter
from .tensor import Tensor
from .vim import ConfigError, MambaBlock, VimConfig

UNK = "<unk>"
AEMB_MAGIC = b"AEMB"


def tokenize(phrase: str) -> list[str]:
    return phrase.lower().split()


@dataclass
class AttributeVocab:
    """Attribute phrases in fixed order plus a word vocabulary built from them.

    Id 0 is reserved for unknown words.
    """

    phrases: list[str]
    words: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.phrases:
            raise ValueError("attribute vocabulary must be non-empty")
        if not self.words:
            seen = {}
            for p in self.phrases:
                for w in tokenize(p):
                    seen.setdefault(w, None)
            self.words = [UNK] + list(seen)
        self._index = {w: i for i, w in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.phrases)

    @property
    def size(self) -> int:
        return len(self.words)

    def encode(self, phrase: str) -> list[int]:
        ids = [self._index.get(w, 0) for w in tokenize(phrase)]
        return ids or [0]

    def token_ids(self) -> list[list[int]]:
        return [self.encode(p) for p in self.phrases]


def read_aemb(path) -> np.ndarray:
    """Read an attribute-embedding file: ``AEMB``, u32 L, u32 dim, L*dim LE f32."""
    raw = Path(path).read_bytes()
    if raw[:4] != AEMB_MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}, expected {AEMB_MAGIC!r}")
    if len(raw) < 12:
        raise ValueError(f"{path}: truncated header")
    n, dim = struct.unpack_from("<II", raw, 4)
    expected = 12 + 4 * n * dim
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes for {n}x{dim}, got {len(raw)}")
    return np.frombuffer(raw, dtype="<f4", offset=12).reshape(n, dim).astype(np.float64)


def write_aemb(path, table) -> None:
    table = np.asarray(table, dtype="<f4")
    if table.ndim != 2:
        raise ValueError("embedding table must be 2-D (attrs, dim)")
    with open(path, "wb") as fh:
        fh.write(AEMB_MAGIC)
        fh.write(struct.pack("<II", *table.shape))
        fh.write(table.tobytes())


class AttributeEmbedder(Module):
    """Mean of each phrase's word embeddings, projected to the model dim.

    When ``external`` vectors are supplied (one per attribute, vocab order)
    they replace the learned word means.
    """

    def __init__(self, vocab: AttributeVocab, dim: int, rng: np.random.Generator,
                 word_dim: int | None = None, external: np.ndarray | None = None):
        self.vocab = vocab
        word_dim = word_dim or dim
        self.external = None
        if external is not None:
            external = np.asarray(external, dtype=np.float64)
            if external.shape[0] != len(vocab):
                raise ConfigError(f"external embeddings have {external.shape[0]} rows, "
                                  f"vocab has {len(vocab)} attributes")
            self.external = external
            word_dim = external.shape[1]
        else:
            self.table = parameter(rng.normal(0.0, 1.0, size=(vocab.size, word_dim)))
            ids = vocab.token_ids()
            pool = np.zeros((len(vocab), vocab.size))
            for j, row in enumerate(ids):
                for i in row:
                    pool[j, i] += 1.0 / len(row)
            self._pool = pool
        self.proj = Linear(word_dim, dim, rng)

    def forward(self) -> Tensor:
        if self.external is not None:
            pooled = Tensor(self.external)
        else:
            pooled = T.matmul(Tensor(self._pool), self.table)
        return self.proj(pooled)


def embed_attributes(embedder: AttributeEmbedder) -> Tensor:
    return embedder()


def text_mamba_forward(tokens: Tensor, blocks: list[MambaBlock]) -> Tensor:
    for blk in blocks:
        tokens = blk(tokens)
    return tokens


def vsf_fuse(visual: Tensor, semantic: Tensor, blocks: list[MambaBlock]) -> Tensor:
    """Run fusion blocks over ``[visual, semantic]`` and return the semantic rows."""
    if visual.shape[-1] != semantic.shape[-1]:
        raise ConfigError(f"visual dim {visual.shape[-1]} != semantic dim {semantic.shape[-1]}")
    n_attr = semantic.shape[-2]
    if semantic.ndim < visual.ndim:
        semantic = semantic + T.Tensor(np.zeros(visual.shape[:-2] + semantic.shape))
    x = T.concat([visual, semantic], axis=-2)
    for blk in blocks:
        x = blk(x)
    return x[..., -n_attr:, :]


class VSFStack(Module):
    """Text Mamba (unidirectional) then fusion Mamba over the joint sequence."""

    def __init__(self, vocab: AttributeVocab, cfg: VimConfig, rng: np.random.Generator,
                 text_blocks: int = 2, fusion_blocks: int = 2, fusion_bidirectional: bool = True,
                 external: np.ndarray | None = None):
        self.embedder = AttributeEmbedder(vocab, cfg.dim, rng, external=external)
        self.text_blocks = [MambaBlock(cfg, rng, bidirectional=False) for _ in range(text_blocks)]
        self.fusion_blocks = [MambaBlock(cfg, rng, bidirectional=fusion_bidirectional)
                              for _ in range(fusion_blocks)]

    def semantic_tokens(self) -> Tensor:
        return text_mamba_forward(self.embedder(), self.text_blocks)

    def forward(self, visual: Tensor) -> Tensor:
        return vsf_fuse(visual, self.semantic_tokens(), self.fusion_blocks)
