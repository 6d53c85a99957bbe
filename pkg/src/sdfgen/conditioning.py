"""Per-modality condition encoders feeding the denoiser's cross-attention.

Each modality maps to a fixed-length token sequence in a shared embedding
width; missing or dropped modalities contribute all-zero sequences of the
same canonical length, and aggregation is concatenation in a fixed order
(partial, class, text, silhouette).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import ParamStore, Tensor
from .geometry import TsdfGrid

EMBED_DIM = 32
MODALITY_ORDER = ("partial", "class", "text", "silhouette")
TOKENS_PER_MODALITY = {"partial": 8, "class": 1, "text": 8, "silhouette": 4}
TOTAL_TOKENS = sum(TOKENS_PER_MODALITY.values())  # 21
MAX_TEXT_TOKENS = TOKENS_PER_MODALITY["text"]


@dataclass
class PartialShape:
    grid: TsdfGrid
    mask: np.ndarray
    modality = "partial"


@dataclass
class ClassLabel:
    class_id: int
    modality = "class"


@dataclass
class KeywordText:
    token_ids: list[int]
    modality = "text"


@dataclass
class Silhouette:
    image: np.ndarray  # (64, 64) binary
    modality = "silhouette"


ConditionPayload = Union[PartialShape, ClassLabel, KeywordText, Silhouette]


@dataclass
class TokenSequence:
    modality: str
    tokens: Tensor  # (n_tokens, EMBED_DIM)

    def __post_init__(self):
        if self.tokens.ndim != 2 or self.tokens.shape[1] != EMBED_DIM:
            raise ValueError(f"token matrix must be (n, {EMBED_DIM}), got {self.tokens.shape}")


@dataclass
class ConditionEntry:
    payload: Optional[ConditionPayload]
    tokens: TokenSequence
    weight: float


@dataclass
class ConditionSet:
    """At most one entry per modality, with classifier-free guidance weights."""

    entries: list[ConditionEntry] = field(default_factory=list)

    def __post_init__(self):
        mods = [e.tokens.modality for e in self.entries]
        if len(mods) != len(set(mods)):
            raise ValueError(f"duplicate modalities in condition set: {mods}")

    def modalities(self) -> list[str]:
        return [e.tokens.modality for e in self.entries]

    def weights(self) -> list[float]:
        return [e.weight for e in self.entries]


class Conditioners:
    """Task-specific encoders; parameters live in the caller's store so they
    train jointly with the denoiser."""

    def __init__(self, store: ParamStore, rng: np.random.Generator,
                 n_classes: int, vocab_size: int, grid_resolution: int = 16):
        if vocab_size > 64:
            raise ValueError("keyword vocabulary is limited to 64 entries")
        self.n_classes = n_classes
        self.vocab_size = vocab_size
        self.grid_resolution = grid_resolution
        d = EMBED_DIM
        self.p1 = nn.Conv3d(store, "cond.partial.c1", 2, 8, 2, rng, stride=2)
        self.p2 = nn.Conv3d(store, "cond.partial.c2", 8, 16, 2, rng, stride=2)
        self.p3 = nn.Conv3d(store, "cond.partial.c3", 16, d, 2, rng, stride=2)
        self.class_emb = nn.Embedding(store, "cond.class", n_classes, d, rng, std=0.5)
        self.text_emb = nn.Embedding(store, "cond.text", vocab_size, d, rng, std=0.5)
        self.s1 = nn.Conv2d(store, "cond.sil.c1", 1, 8, 4, rng, stride=4)
        self.s2 = nn.Conv2d(store, "cond.sil.c2", 8, 16, 4, rng, stride=4)
        self.s3 = nn.Conv2d(store, "cond.sil.c3", 16, d, 2, rng, stride=2)

    # ---- batched encoders (training path) -------------------------------------

    def encode_partial_batch(self, grids: np.ndarray, masks: np.ndarray) -> Tensor:
        """(n, D, D, D) grids + masks -> (n, 8, EMBED_DIM) tokens."""
        x = ad.constant(np.stack([grids, masks.astype(np.float64)], axis=1))
        h = ad.silu(self.p1(x))
        h = ad.silu(self.p2(h))
        h = self.p3(h)                                  # (n, d, 2, 2, 2)
        h = ad.reshape(h, (h.shape[0], EMBED_DIM, 8))
        return ad.transpose(h, (0, 2, 1))

    def encode_class_batch(self, class_ids: np.ndarray) -> Tensor:
        ids = np.asarray(class_ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.n_classes):
            raise ValueError(f"class id out of range 0..{self.n_classes - 1}")
        return ad.reshape(self.class_emb(ids), (len(ids), 1, EMBED_DIM))

    def encode_text_batch(self, token_id_lists: Sequence[Sequence[int]]) -> Tensor:
        n = len(token_id_lists)
        ids = np.zeros((n, MAX_TEXT_TOKENS), dtype=np.int64)
        keep = np.zeros((n, MAX_TEXT_TOKENS, 1))
        for i, lst in enumerate(token_id_lists):
            if len(lst) > MAX_TEXT_TOKENS:
                raise ValueError(f"at most {MAX_TEXT_TOKENS} keyword tokens, got {len(lst)}")
            for j, t in enumerate(lst):
                if not (0 <= t < self.vocab_size):
                    raise ValueError(f"keyword token id {t} outside vocabulary")
                ids[i, j] = t
                keep[i, j, 0] = 1.0
        emb = self.text_emb(ids)                        # (n, 8, d)
        return ad.mul(emb, ad.constant(keep))           # zero rows past each list

    def encode_silhouette_batch(self, images: np.ndarray) -> Tensor:
        x = ad.constant(np.asarray(images, dtype=np.float64)[:, None])
        h = ad.silu(self.s1(x))
        h = ad.silu(self.s2(h))
        h = self.s3(h)                                  # (n, d, 2, 2)
        h = ad.reshape(h, (h.shape[0], EMBED_DIM, 4))
        return ad.transpose(h, (0, 2, 1))

    # ---- single-payload API ----------------------------------------------------

    def encode_condition(self, payload: ConditionPayload) -> TokenSequence:
        if isinstance(payload, PartialShape):
            if payload.grid.resolution != self.grid_resolution:
                raise ValueError("partial grid resolution mismatch")
            t = self.encode_partial_batch(payload.grid.values[None], payload.mask[None])
        elif isinstance(payload, ClassLabel):
            t = self.encode_class_batch(np.array([payload.class_id]))
        elif isinstance(payload, KeywordText):
            t = self.encode_text_batch([payload.token_ids])
        elif isinstance(payload, Silhouette):
            if payload.image.shape != (64, 64):
                raise ValueError(f"silhouette must be 64x64, got {payload.image.shape}")
            t = self.encode_silhouette_batch(payload.image[None])
        else:
            raise TypeError(f"unknown condition payload {type(payload)!r}")
        tokens = ad.reshape(t, t.shape[1:])
        return TokenSequence(payload.modality, tokens)


def zero_tokens(modality: str) -> TokenSequence:
    return TokenSequence(
        modality, ad.constant(np.zeros((TOKENS_PER_MODALITY[modality], EMBED_DIM)))
    )


def drop_condition(tokens: TokenSequence, p: float, rng: np.random.Generator) -> TokenSequence:
    """All-or-nothing dropout: with probability p the whole sequence becomes zeros."""
    if not (0.0 <= p <= 1.0):
        raise ValueError("dropout probability must be in [0, 1]")
    if p > 0.0 and rng.random() < p:
        return zero_tokens(tokens.modality)
    return tokens


def aggregate(sequences: Sequence[TokenSequence]) -> Tensor:
    """Concatenate along the token axis in canonical modality order.

    Missing modalities contribute their zero-filled canonical block, so the
    all-absent call yields the (21, EMBED_DIM) zero matrix used as the null
    condition.
    """
    by_mod: dict[str, TokenSequence] = {}
    for seq in sequences:
        if seq.modality in by_mod:
            raise ValueError(f"duplicate modality {seq.modality!r}")
        if seq.modality not in TOKENS_PER_MODALITY:
            raise ValueError(f"unknown modality {seq.modality!r}")
        if seq.tokens.shape != (TOKENS_PER_MODALITY[seq.modality], EMBED_DIM):
            raise ValueError(
                f"{seq.modality} tokens must be "
                f"({TOKENS_PER_MODALITY[seq.modality]}, {EMBED_DIM}), got {seq.tokens.shape}"
            )
        by_mod[seq.modality] = seq
    blocks = [by_mod[m].tokens if m in by_mod else zero_tokens(m).tokens
              for m in MODALITY_ORDER]
    return ad.concat(blocks, axis=0)
