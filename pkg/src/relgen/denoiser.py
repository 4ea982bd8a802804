"""Transformer-decoder denoiser f(x_t, t, tau(y)) and the condition encoder tau."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .numerics import DEFAULT_DTYPE, load_checkpoint, masked_softmax, save_checkpoint
from .relvocab import RelationVocabulary


@dataclass
class DenoiserConfig:
    d: int = 32
    n_layers: int = 2
    n_heads: int = 2
    ffn_dim: int = 128
    L: int = 8
    d_feat: int = 32
    T: int = 200
    tau_hidden: int | None = None

    def __post_init__(self):
        if self.d % self.n_heads:
            raise ValueError(f"d={self.d} is not divisible by n_heads={self.n_heads}")
        if self.L < 1 or self.n_layers < 1 or self.T < 1:
            raise ValueError("L, n_layers and T must be >= 1")
        if self.tau_hidden is None:
            self.tau_hidden = self.ffn_dim

    @property
    def d_y(self) -> int:
        return 5 * self.d_feat

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ConditionSet:
    """Per-pair condition features, zero-padded to ``L`` rows.

    ``y`` rows concatenate subject visual, object visual, union visual,
    subject text and object text embeddings. ``pairs`` carries the
    (subject id, object id) of each real row.
    """

    y: np.ndarray
    y_so: np.ndarray
    mask: np.ndarray
    n: int
    pairs: list | None = None

    def validate(self, L: int | None = None) -> None:
        if L is not None and self.y.shape[0] != L:
            raise ValueError(f"condition rows {self.y.shape[0]} != L={L}")
        if self.n > self.y.shape[0]:
            raise ValueError("more real pairs than rows")
        if np.any(self.y[~self.mask.astype(bool)] != 0):
            raise ValueError("masked-out condition rows must be zero")
        norms = np.linalg.norm(self.y_so[: self.n], axis=1)
        if not np.allclose(norms, 1.0, atol=1e-9):
            raise ValueError("union-region embeddings must be unit-norm")

    @classmethod
    def from_rows(cls, y_rows, y_so_rows, L: int, pairs=None) -> "ConditionSet":
        y_rows = np.asarray(y_rows, dtype=np.float64)
        y_so_rows = np.asarray(y_so_rows, dtype=np.float64)
        n = min(len(y_rows), L)
        y = np.zeros((L, y_rows.shape[1]))
        y_so = np.zeros((L, y_so_rows.shape[1]))
        y[:n] = y_rows[:n]
        y_so[:n] = y_so_rows[:n]
        mask = np.zeros(L, dtype=bool)
        mask[:n] = True
        return cls(y, y_so, mask, n, None if pairs is None else list(pairs)[:n])


def collate_conditions(conds, dtype: torch.dtype = DEFAULT_DTYPE):
    """Stack condition sets into ([B, L, d_y], [B, L] bool) tensors."""
    y = torch.as_tensor(np.stack([c.y for c in conds]), dtype=dtype)
    mask = torch.as_tensor(np.stack([c.mask for c in conds]), dtype=torch.bool)
    return y, mask


def timestep_embedding(t: torch.Tensor, dim: int, dtype: torch.dtype = DEFAULT_DTYPE) -> torch.Tensor:
    """Sinusoidal embedding of integer steps, [B] -> [B, dim]."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb.to(dtype)


class ConditionEncoder(nn.Module):
    """tau: two-layer ReLU MLP applied row-wise to the raw features."""

    def __init__(self, d_y: int, hidden: int, d: int, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.d_y = d_y
        self.fc1 = nn.Linear(d_y, hidden, dtype=dtype)
        self.fc2 = nn.Linear(hidden, d, dtype=dtype)

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        if y.shape[-1] != self.d_y:
            raise ValueError(f"condition width {y.shape[-1]} != d_y={self.d_y}")
        return self.fc2(torch.relu(self.fc1(y)))


class MultiHeadAttention(nn.Module):
    """Softmax(Q K^T / sqrt(d_head)) V per head; projections without bias."""

    def __init__(self, d: int, n_heads: int, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.d, self.h = d, n_heads
        self.w_q = nn.Linear(d, d, bias=False, dtype=dtype)
        self.w_k = nn.Linear(d, d, bias=False, dtype=dtype)
        self.w_v = nn.Linear(d, d, bias=False, dtype=dtype)
        self.w_o = nn.Linear(d, d, dtype=dtype)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, n, _ = x.shape
        return x.view(b, n, self.h, self.d // self.h).transpose(1, 2)

    def forward(self, queries: torch.Tensor, keys: torch.Tensor, values: torch.Tensor,
                mask: torch.Tensor | None = None) -> torch.Tensor:
        q = self._split(self.w_q(queries))
        k = self._split(self.w_k(keys))
        v = self._split(self.w_v(values))
        logits = q @ k.transpose(-1, -2) / math.sqrt(self.d // self.h)
        m = None if mask is None else mask[:, None, None, :]
        attn = masked_softmax(logits, m)
        out = (attn @ v).transpose(1, 2).reshape(queries.shape)
        return self.w_o(out)


def cross_attention(attn: MultiHeadAttention, queries, keys, values, mask=None) -> torch.Tensor:
    """Unbatched convenience wrapper: [L, d] queries against [N, d] keys."""
    if mask is not None and not torch.as_tensor(mask).any():
        raise ValueError("cross_attention: every pair is masked")
    squeeze = queries.dim() == 2
    if squeeze:
        queries, keys, values = queries[None], keys[None], values[None]
        mask = None if mask is None else torch.as_tensor(mask, dtype=torch.bool)[None]
    out = attn(queries, keys, values, mask)
    return out[0] if squeeze else out


class DecoderLayer(nn.Module):
    """Post-norm block: self-attention, cross-attention, FFN."""

    def __init__(self, d: int, n_heads: int, ffn_dim: int, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.self_attn = MultiHeadAttention(d, n_heads, dtype)
        self.cross_attn = MultiHeadAttention(d, n_heads, dtype)
        self.ffn = nn.Sequential(nn.Linear(d, ffn_dim, dtype=dtype), nn.ReLU(),
                                 nn.Linear(ffn_dim, d, dtype=dtype))
        self.norm1 = nn.LayerNorm(d, dtype=dtype)
        self.norm2 = nn.LayerNorm(d, dtype=dtype)
        self.norm3 = nn.LayerNorm(d, dtype=dtype)

    def forward(self, h, ctx, ctx_mask):
        h = self.norm1(h + self.self_attn(h, h, h))
        h = self.norm2(h + self.cross_attn(h, ctx, ctx, ctx_mask))
        return self.norm3(h + self.ffn(h))


class Denoiser(nn.Module):
    """Decoder stack mapping (x_t, t, projected conditions) to an x0 prediction.

    Slots carry no positional encoding: the relation sequence is a set, and
    conditions enter only through masked cross-attention, so both are
    permutation-symmetric.
    """

    def __init__(self, cfg: DenoiserConfig, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.cfg = cfg
        d = cfg.d
        self.in_proj = nn.Linear(d, d, dtype=dtype)
        self.time_proj = nn.Linear(d, d, dtype=dtype)
        self.layers = nn.ModuleList(DecoderLayer(d, cfg.n_heads, cfg.ffn_dim, dtype)
                                    for _ in range(cfg.n_layers))
        self.out_proj = nn.Linear(d, d, dtype=dtype)

    def forward(self, x_t: torch.Tensor, t: torch.Tensor, ctx: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
        if t.numel() == 1 and x_t.shape[0] != 1:
            t = t.expand(x_t.shape[0])
        if t.min() < 1 or t.max() > self.cfg.T:
            raise ValueError(f"t outside [1, {self.cfg.T}]")
        h = self.in_proj(x_t) + self.time_proj(timestep_embedding(t, self.cfg.d, x_t.dtype))[:, None, :]
        for layer in self.layers:
            h = layer(h, ctx, mask)
        return self.out_proj(h)


class RelationModel(nn.Module):
    """Everything trainable: decoder, condition encoder and the embedding table.

    Parameter names are ``denoiser.*``, ``tau.*`` and ``emb.*``.
    """

    def __init__(self, cfg: DenoiserConfig, vocab: RelationVocabulary, tau_r: float = 1.0,
                 dtype=DEFAULT_DTYPE):
        super().__init__()
        if vocab.d != cfg.d:
            raise ValueError(f"embedding width {vocab.d} != latent width d={cfg.d}")
        self.cfg = cfg
        self.dtype = dtype
        self.tau_r = float(tau_r)
        self.denoiser = Denoiser(cfg, dtype)
        self.tau = ConditionEncoder(cfg.d_y, cfg.tau_hidden, cfg.d, dtype)
        self.emb = vocab

    def reset_parameters(self, rng: torch.Generator) -> "RelationModel":
        """Re-draw every decoder/encoder weight from ``rng``; the embedding table is kept.

        Linear layers use U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and
        biases; layer norms start at identity.
        """
        with torch.no_grad():
            for mod in list(self.denoiser.modules()) + list(self.tau.modules()):
                if isinstance(mod, nn.Linear):
                    bound = 1.0 / math.sqrt(mod.in_features)
                    mod.weight.copy_((torch.rand(mod.weight.shape, generator=rng, dtype=torch.float64) * 2 - 1)
                                     * bound)
                    if mod.bias is not None:
                        mod.bias.copy_((torch.rand(mod.bias.shape, generator=rng, dtype=torch.float64) * 2 - 1)
                                       * bound)
                elif isinstance(mod, nn.LayerNorm):
                    mod.weight.fill_(1.0)
                    mod.bias.zero_()
        return self

    def encode_conditions(self, y: torch.Tensor, mask: torch.Tensor):
        """Row-wise tau(y); the mask passes through unchanged."""
        return self.tau(y), mask

    def forward(self, x_t, t, y, mask, ctx=None):
        if ctx is None:
            ctx, _ = self.encode_conditions(y, mask)
        return self.denoiser(x_t, t, ctx, mask)

    def params(self) -> dict[str, torch.Tensor]:
        return dict(self.named_parameters())

    def header(self, schedule=None) -> dict:
        h = {"config": self.cfg.to_dict(), "phrases": self.emb.phrases, "sigma0": self.emb.sigma0,
             "tau_r": self.tau_r}
        if schedule is not None:
            h["schedule"] = schedule.header()
        return h

    def save(self, path, schedule=None, extra: dict | None = None) -> None:
        header = self.header(schedule)
        if extra:
            header.update(extra)
        save_checkpoint(path, self.params(), header)

    @classmethod
    def load(cls, path, dtype=DEFAULT_DTYPE):
        """Returns (model, header)."""
        header, arrays = load_checkpoint(path)
        cfg = DenoiserConfig(**header["config"])
        vocab = RelationVocabulary(header["phrases"], arrays["emb.weight"], sigma0=header["sigma0"], dtype=dtype)
        model = cls(cfg, vocab, tau_r=header["tau_r"], dtype=dtype)
        params = model.params()
        missing = set(params) - set(arrays)
        if missing:
            raise ValueError(f"checkpoint lacks parameters: {sorted(missing)}")
        with torch.no_grad():
            for name, p in params.items():
                p.copy_(torch.as_tensor(arrays[name], dtype=dtype))
        return model, header


def denoise(model: RelationModel, x_t: torch.Tensor, t: int, cond: ConditionSet) -> torch.Tensor:
    """Single-example x0 prediction, [L, d] -> [L, d]."""
    y, mask = collate_conditions([cond], model.dtype)
    return model(x_t[None], torch.tensor([t]), y, mask)[0]
