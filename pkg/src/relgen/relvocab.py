"""Relation vocabulary, the embedding step and the rounding step."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .numerics import DEFAULT_DTYPE, masked_softmax

PROVENANCE = ("gt", "pseudo", "pad")


class RelationVocabulary(torch.nn.Module):
    """Predicate phrases plus the trainable embedding table."""

    def __init__(self, phrases: Sequence[str], embeddings, sigma0: float = 0.1,
                 dtype: torch.dtype = DEFAULT_DTYPE):
        super().__init__()
        phrases = list(phrases)
        if len(set(phrases)) != len(phrases):
            raise ValueError("vocabulary phrases must be unique")
        if len(phrases) < 2:
            raise ValueError("vocabulary needs at least two phrases")
        emb = torch.as_tensor(np.asarray(embeddings, dtype=np.float64), dtype=dtype)
        if emb.dim() != 2 or emb.shape[0] != len(phrases) or emb.shape[1] < 1:
            raise ValueError(f"embedding table must be |V| x d, got {tuple(emb.shape)}")
        if not torch.isfinite(emb).all():
            raise ValueError("embedding table has non-finite rows")
        if sigma0 < 0:
            raise ValueError("sigma0 must be >= 0")
        self.phrases = phrases
        self.index = {p: i for i, p in enumerate(phrases)}
        self.weight = torch.nn.Parameter(emb.clone())
        self.sigma0 = float(sigma0)

    @property
    def size(self) -> int:
        return len(self.phrases)

    @property
    def d(self) -> int:
        return self.weight.shape[1]

    def lookup(self, tokens) -> torch.Tensor:
        idx = torch.as_tensor(np.asarray(tokens), dtype=torch.long)
        if idx.numel() and (idx.min() < 0 or idx.max() >= self.size):
            raise IndexError("token index outside the vocabulary")
        return self.weight[idx]

    def to_json(self, path: str | Path) -> None:
        rows = [{"phrase": p, "embedding": [float(x) for x in row]}
                for p, row in zip(self.phrases, self.weight.detach().double().numpy())]
        Path(path).write_text(json.dumps(rows, indent=1))

    @classmethod
    def from_json(cls, path: str | Path, sigma0: float = 0.1, dtype: torch.dtype = DEFAULT_DTYPE):
        rows = json.loads(Path(path).read_text())
        return cls([r["phrase"] for r in rows], [r["embedding"] for r in rows], sigma0=sigma0, dtype=dtype)


@dataclass
class RelationSequence:
    tokens: np.ndarray
    provenance: list = field(default_factory=list)
    scores: np.ndarray | None = None

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if not self.provenance:
            self.provenance = ["gt"] * len(self.tokens)
        if len(self.provenance) != len(self.tokens):
            raise ValueError("provenance must tag every slot")
        bad = set(self.provenance) - set(PROVENANCE)
        if bad:
            raise ValueError(f"unknown provenance tags {bad}")
        if self.scores is not None:
            self.scores = np.asarray(self.scores, dtype=np.float64)
            if self.scores.shape != self.tokens.shape or np.any((self.scores < 0) | (self.scores > 1)):
                raise ValueError("scores must be per-slot probabilities")

    def __len__(self) -> int:
        return len(self.tokens)

    def validate(self, vocab_size: int, L: int | None = None) -> None:
        if L is not None and len(self.tokens) != L:
            raise ValueError(f"sequence length {len(self.tokens)} != L={L}")
        if len(self.tokens) and (self.tokens.min() < 0 or self.tokens.max() >= vocab_size):
            raise IndexError("token index outside the vocabulary")

    def real_mask(self) -> np.ndarray:
        return np.array([p != "pad" for p in self.provenance], dtype=bool)


def embed_step(tokens, vocab: RelationVocabulary, rng: torch.Generator | None,
               sigma0: float | None = None) -> torch.Tensor:
    """Draw x0 ~ N(Emb(v), sigma0^2 I) row-wise; differentiable in the table.

    ``tokens`` may be a RelationSequence, an [L] or a [B, L] index array.
    """
    if isinstance(tokens, RelationSequence):
        tokens = tokens.tokens
    sigma0 = vocab.sigma0 if sigma0 is None else sigma0
    mean = vocab.lookup(tokens)
    if sigma0 == 0:
        return mean
    noise = torch.randn(mean.shape, generator=rng, dtype=mean.dtype)
    return mean + sigma0 * noise


def rounding_logits(x0: torch.Tensor, embeddings: torch.Tensor, tau_r: float = 1.0) -> torch.Tensor:
    """-||x0_row - Emb(w)||^2 / tau_r for every vocabulary entry w."""
    if tau_r <= 0:
        raise ValueError("tau_r must be positive")
    diff = x0.unsqueeze(-2) - embeddings
    return -(diff * diff).sum(-1) / tau_r


def round_distribution(x0_row: torch.Tensor, vocab: RelationVocabulary | torch.Tensor,
                       tau_r: float = 1.0) -> torch.Tensor:
    table = vocab.weight if isinstance(vocab, RelationVocabulary) else vocab
    return masked_softmax(rounding_logits(x0_row, table, tau_r))


def rounding_nll(x0: torch.Tensor, tokens, vocab: RelationVocabulary, tau_r: float = 1.0,
                 slot_mask=None) -> torch.Tensor:
    """Mean over counted slots of -log p(v_i | x0_i).

    ``slot_mask`` (same leading shape as ``tokens``) drops padded slots.
    """
    logits = rounding_logits(x0, vocab.weight, tau_r)
    logp = torch.log_softmax(logits, dim=-1)
    idx = torch.as_tensor(np.asarray(tokens), dtype=torch.long)
    nll = -logp.gather(-1, idx.unsqueeze(-1)).squeeze(-1)
    if slot_mask is None:
        return nll.mean()
    m = torch.as_tensor(np.asarray(slot_mask), dtype=nll.dtype)
    return (nll * m).sum() / m.sum().clamp_min(1.0)


def decode_sequence(x0: torch.Tensor, vocab: RelationVocabulary, tau_r: float = 1.0):
    """Argmax rounding per row; returns the sequence and the per-row distributions.

    ``torch.argmax`` returns the first maximal index, which gives the
    lowest-index tie rule. Decoded slots are tagged ``pseudo``: they are
    model labels, not annotations.
    """
    with torch.no_grad():
        probs = round_distribution(x0, vocab, tau_r)
        tokens = torch.argmax(probs, dim=-1)
        scores = probs.gather(-1, tokens.unsqueeze(-1)).squeeze(-1)
    tok = tokens.numpy()
    sc = np.clip(scores.double().numpy(), 0.0, 1.0)
    if tok.ndim == 1:
        return RelationSequence(tok, ["pseudo"] * len(tok), sc), probs
    return [RelationSequence(t, ["pseudo"] * len(t), s) for t, s in zip(tok, sc)], probs
