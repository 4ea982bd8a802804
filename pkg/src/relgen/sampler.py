"""Deterministic DDIM generation and the re-noising enhancement mode."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .denoiser import ConditionSet, RelationModel, collate_conditions
from .numerics import make_generator
from .relvocab import RelationSequence, decode_sequence
from .schedule import VarianceSchedule, q_sample


@dataclass
class SamplerConfig:
    n_steps: int = 50
    eta: float = 0.0
    t_prime: int = 25
    K: int = 1

    def validate(self, T: int) -> None:
        if not 1 <= self.n_steps <= T:
            raise ValueError(f"n_steps must lie in [1, T={T}], got {self.n_steps}")
        if not 0 <= self.t_prime <= T:
            raise ValueError(f"t_prime must lie in [0, T={T}], got {self.t_prime}")
        if self.eta < 0:
            raise ValueError("eta must be >= 0")
        if self.K < 1:
            raise ValueError("K must be >= 1")


def ddim_timesteps(T: int, n_steps: int) -> list[int]:
    """Uniformly spaced, strictly decreasing steps from T down to 1."""
    if n_steps < 1 or n_steps > T:
        raise ValueError(f"need 1 <= n_steps <= T, got n_steps={n_steps}, T={T}")
    if n_steps == 1:
        return [int(T)]
    grid = np.floor(np.linspace(T, 1, n_steps) + 0.5).astype(int)
    return [int(v) for v in grid]


def ddim_step(x_t: torch.Tensor, x0_hat: torch.Tensor, t: int, t_prev: int, schedule: VarianceSchedule,
              eta: float = 0.0, rng: torch.Generator | None = None) -> torch.Tensor:
    """One DDIM move from step t to t_prev (t_prev = 0 returns x0_hat)."""
    if not t > t_prev >= 0:
        raise ValueError(f"need t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    ab_t = schedule.alpha_bar[t]
    ab_prev = schedule.alpha_bar[t_prev]
    eps_hat = (x_t - math.sqrt(ab_t) * x0_hat) / math.sqrt(1.0 - ab_t)
    sigma = 0.0
    if eta > 0:
        sigma = eta * math.sqrt((1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - ab_t / ab_prev))
    out = math.sqrt(ab_prev) * x0_hat + math.sqrt(max(1.0 - ab_prev - sigma ** 2, 0.0)) * eps_hat
    if sigma > 0:
        out = out + sigma * torch.randn(x_t.shape, generator=rng, dtype=x_t.dtype)
    return out


@dataclass
class Generation:
    seq: RelationSequence
    probs: np.ndarray       # [L, |V|] rounding distribution per slot
    x0: np.ndarray          # final latent


@torch.no_grad()
def _denoise_loop(x: torch.Tensor, steps: list[int], conds, model: RelationModel, schedule: VarianceSchedule,
                  eta: float, rngs) -> torch.Tensor:
    y, mask = collate_conditions(conds, model.dtype)
    ctx, _ = model.encode_conditions(y, mask)
    for i, t in enumerate(steps):
        t_prev = steps[i + 1] if i + 1 < len(steps) else 0
        x0_hat = model.denoiser(x, torch.full((x.shape[0],), t, dtype=torch.long), ctx, mask)
        if eta > 0:
            x = torch.stack([ddim_step(x[b], x0_hat[b], t, t_prev, schedule, eta, rngs[b])
                             for b in range(x.shape[0])])
        else:
            x = ddim_step(x, x0_hat, t, t_prev, schedule)
    return x


def _finish(x0: torch.Tensor, model: RelationModel) -> list[Generation]:
    seqs, probs = decode_sequence(x0, model.emb, model.tau_r)
    return [Generation(s, p.double().numpy(), x.double().numpy()) for s, p, x in zip(seqs, probs, x0)]


def generate_batch(conds: list[ConditionSet], model: RelationModel, schedule: VarianceSchedule,
                   cfg: SamplerConfig, rngs: list[torch.Generator]) -> list[Generation]:
    """Generate for several scenes at once; scene b draws only from ``rngs[b]``."""
    L, d = model.cfg.L, model.cfg.d
    x = torch.stack([torch.randn((L, d), generator=g, dtype=model.dtype) for g in rngs])
    steps = ddim_timesteps(schedule.T, cfg.n_steps)
    return _finish(_denoise_loop(x, steps, conds, model, schedule, cfg.eta, rngs), model)


def generate(cond: ConditionSet, model: RelationModel, schedule: VarianceSchedule, cfg: SamplerConfig,
             rng: torch.Generator) -> Generation:
    return generate_batch([cond], model, schedule, cfg, [rng])[0]


def enhancement_steps(T: int, n_steps: int, t_prime: int) -> list[int]:
    """The DDIM grid restricted to t < t_prime, started at t_prime itself."""
    if t_prime == 0:
        return []
    return [t_prime] + [t for t in ddim_timesteps(T, n_steps) if t < t_prime]


def expand_pair_relations(pair_relations: list[list[int]], K: int, L: int):
    """Build an L-slot sequence holding K copies of every pair's relations.

    Returns (tokens, slot_pair) truncated at L; slots beyond the content are
    filled by cycling the content so every slot stays associated with a
    pair. Each copy gets its own noise when re-noised.
    """
    tokens, owner = [], []
    for j, rels in enumerate(pair_relations):
        for r in rels:
            for _ in range(K):
                tokens.append(int(r))
                owner.append(j)
    if not tokens:
        raise ValueError("no relations to enhance")
    tokens, owner = tokens[:L], owner[:L]
    i = 0
    while len(tokens) < L:
        tokens.append(tokens[i])
        owner.append(owner[i])
        i += 1
    return np.array(tokens), np.array(owner)


def enhance_batch(existing: list[RelationSequence], conds: list[ConditionSet], model: RelationModel,
                  schedule: VarianceSchedule, cfg: SamplerConfig, rngs: list[torch.Generator]) -> list[Generation]:
    """Re-noise existing relations to t_prime and denoise them back.

    Slot order is kept, so a caller's slot-to-pair association survives.
    """
    if not 0 <= cfg.t_prime <= schedule.T:
        raise ValueError(f"t_prime must lie in [0, {schedule.T}]")
    x0 = torch.stack([model.emb.lookup(s.tokens).detach() for s in existing])
    eps = torch.stack([torch.randn(x0.shape[1:], generator=g, dtype=model.dtype) for g in rngs])
    if cfg.t_prime == 0:
        return _finish(x0, model)
    x = q_sample(x0, cfg.t_prime, eps, schedule)
    steps = enhancement_steps(schedule.T, cfg.n_steps, cfg.t_prime)
    return _finish(_denoise_loop(x, steps, conds, model, schedule, cfg.eta, rngs), model)


def enhance(existing: RelationSequence, cond: ConditionSet, model: RelationModel, schedule: VarianceSchedule,
            t_prime: int, rng: torch.Generator, n_steps: int = 50, eta: float = 0.0) -> Generation:
    cfg = SamplerConfig(n_steps=min(n_steps, schedule.T), eta=eta, t_prime=t_prime)
    return enhance_batch([existing], [cond], model, schedule, cfg, [rng])[0]


def scene_generators(seed: int, scene_ids) -> list[torch.Generator]:
    """One independent stream per scene, so results ignore batching and worker count."""
    return [make_generator(seed, int(i)) for i in scene_ids]
