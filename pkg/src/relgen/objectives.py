"""Training losses: simplified diffusion objective, matching BCE, VLB estimator."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .denoiser import RelationModel, collate_conditions
from .numerics import DEFAULT_DTYPE
from .relvocab import embed_step, rounding_nll
from .schedule import VarianceSchedule, mu_theta_from_x0hat, posterior_mean_var, q_sample

DEFAULT_LAMBDA = 1.0
DEFAULT_KAPPA = 0.05


@dataclass
class Batch:
    tokens: np.ndarray        # [B, L]
    slot_mask: np.ndarray     # [B, L] True for non-pad slots
    y: torch.Tensor           # [B, L, d_y]
    cond_mask: torch.Tensor   # [B, L]
    M: np.ndarray             # [B, L, L] matching targets, columns padded to L
    match_rows: np.ndarray    # [B, L] True for slots carrying an annotated relation

    @property
    def shape(self):
        return self.tokens.shape


def collate_examples(examples, dtype: torch.dtype = DEFAULT_DTYPE) -> Batch:
    """Stack TrainingExamples (anything with ``seq``, ``cond`` and ``M``)."""
    L = len(examples[0].seq)
    tokens = np.stack([ex.seq.tokens for ex in examples])
    slot_mask = np.stack([ex.seq.real_mask() for ex in examples])
    y, cmask = collate_conditions([ex.cond for ex in examples], dtype)
    M = np.zeros((len(examples), L, L))
    rows = np.zeros((len(examples), L), dtype=bool)
    for b, ex in enumerate(examples):
        m = np.asarray(ex.M.M if hasattr(ex.M, "M") else ex.M)
        M[b, : m.shape[0], : m.shape[1]] = m
        rows[b] = np.array([p == "gt" for p in ex.seq.provenance])
    return Batch(tokens, slot_mask, y, cmask, M, rows)


@dataclass
class NoiseDraw:
    """Every random quantity one loss evaluation consumes."""

    x0_noise: torch.Tensor
    t: np.ndarray
    eps: torch.Tensor
    eps1: torch.Tensor
    t_match: np.ndarray
    eps_match: torch.Tensor


def draw_noise(shape, schedule: VarianceSchedule, rng: torch.Generator,
               dtype: torch.dtype = DEFAULT_DTYPE) -> NoiseDraw:
    """Draw in a fixed order so a seed pins the whole evaluation.

    t ~ U{2..T} for the diffusion term (t = 1 when T = 1, where it is
    unused); the matching step is an independent U{0..T} draw.
    """
    B = shape[0]
    x0_noise = torch.randn(shape, generator=rng, dtype=dtype)
    lo = 2 if schedule.T >= 2 else 1
    t = torch.randint(lo, schedule.T + 1, (B,), generator=rng).numpy()
    eps = torch.randn(shape, generator=rng, dtype=dtype)
    eps1 = torch.randn(shape, generator=rng, dtype=dtype)
    t_match = torch.randint(0, schedule.T + 1, (B,), generator=rng).numpy()
    eps_match = torch.randn(shape, generator=rng, dtype=dtype)
    return NoiseDraw(x0_noise, t, eps, eps1, t_match, eps_match)


@dataclass
class LossReport:
    l_simple: torch.Tensor
    l_t_term: torch.Tensor
    l_anchor_term: torch.Tensor
    l_round: torch.Tensor
    l_match: torch.Tensor
    l_total: torch.Tensor
    t: np.ndarray
    t_match: np.ndarray | None = None

    def as_dict(self) -> dict:
        return {k: float(getattr(self, k).detach()) for k in
                ("l_simple", "l_t_term", "l_anchor_term", "l_round", "l_match", "l_total")}


def pairwise_cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """[..., L, d] x [..., N, d] -> [..., L, N]; zero-norm rows give 0."""
    na = a.norm(dim=-1, keepdim=True)
    nb = b.norm(dim=-1, keepdim=True)
    a_hat = a / torch.where(na > 0, na, torch.ones_like(na))
    b_hat = b / torch.where(nb > 0, nb, torch.ones_like(nb))
    return a_hat @ b_hat.transpose(-1, -2)


def loss_match(x_t: torch.Tensor, ctx: torch.Tensor, M, kappa: float = DEFAULT_KAPPA,
               row_mask=None, col_mask=None) -> torch.Tensor:
    """Mean BCE(sigmoid(cos(x_t_i, ctx_j) / kappa), M_ij) over valid entries."""
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    S = pairwise_cosine(x_t, ctx)
    target = torch.as_tensor(np.asarray(M), dtype=S.dtype)
    if target.shape != S.shape:
        target = target[..., : S.shape[-2], : S.shape[-1]]
    bce = F.binary_cross_entropy_with_logits(S / kappa, target, reduction="none")
    valid = torch.ones_like(S, dtype=torch.bool)
    if row_mask is not None:
        valid = valid & torch.as_tensor(np.asarray(row_mask), dtype=torch.bool)[..., :, None]
    if col_mask is not None:
        valid = valid & torch.as_tensor(np.asarray(col_mask), dtype=torch.bool)[..., None, :]
    w = valid.to(S.dtype)
    return (bce * w).sum() / w.sum().clamp_min(1.0)


def _simple_terms(batch: Batch, model: RelationModel, schedule: VarianceSchedule, noise: NoiseDraw):
    vocab = model.emb
    mean = vocab.lookup(batch.tokens)
    x0 = mean + vocab.sigma0 * noise.x0_noise
    ctx, cmask = model.encode_conditions(batch.y, batch.cond_mask)
    if schedule.T >= 2:
        x_t = q_sample(x0, noise.t, noise.eps, schedule)
        t_term = ((x0 - model.denoiser(x_t, torch.as_tensor(noise.t), ctx, cmask)) ** 2).mean()
    else:
        t_term = x0.new_zeros(())
    x1 = q_sample(x0, 1, noise.eps1, schedule)
    ones = torch.ones(len(batch.tokens), dtype=torch.long)
    anchor = ((mean - model.denoiser(x1, ones, ctx, cmask)) ** 2).mean()
    l_round = rounding_nll(x0, batch.tokens, vocab, model.tau_r, batch.slot_mask)
    return x0, ctx, t_term, anchor, l_round


def loss_simple(batch: Batch, model: RelationModel, schedule: VarianceSchedule, rng: torch.Generator | None = None,
                noise: NoiseDraw | None = None) -> LossReport:
    """MSE at one uniform t in 2..T, the t = 1 anchor MSE and the rounding NLL.

    MSE terms are means over all L*d entries; the rounding NLL is a mean
    over non-pad slots.
    """
    if noise is None:
        noise = draw_noise((*batch.shape, model.cfg.d), schedule, rng, model.dtype)
    _, _, t_term, anchor, l_round = _simple_terms(batch, model, schedule, noise)
    l_simple = t_term + anchor + l_round
    zero = l_simple.new_zeros(())
    return LossReport(l_simple, t_term, anchor, l_round, zero, l_simple, noise.t)


def loss_total(batch: Batch, model: RelationModel, schedule: VarianceSchedule, lam: float = DEFAULT_LAMBDA,
               kappa: float = DEFAULT_KAPPA, rng: torch.Generator | None = None,
               noise: NoiseDraw | None = None) -> LossReport:
    """l_simple + lam * l_match, the matching term at an independent t in 0..T."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    if noise is None:
        noise = draw_noise((*batch.shape, model.cfg.d), schedule, rng, model.dtype)
    x0, ctx, t_term, anchor, l_round = _simple_terms(batch, model, schedule, noise)
    l_simple = t_term + anchor + l_round
    x_m = q_sample(x0, noise.t_match, noise.eps_match, schedule)
    l_match = loss_match(x_m, ctx, batch.M, kappa, batch.match_rows, batch.cond_mask.numpy())
    total = l_simple + lam * l_match if lam else l_simple
    return LossReport(l_simple, t_term, anchor, l_round, l_match, total, noise.t, noise.t_match)


def gaussian_kl(mu_q, var_q, mu_p, var_p) -> torch.Tensor:
    """Sum over entries of KL(N(mu_q, var_q) || N(mu_p, var_p)), isotropic variances."""
    mu_q = torch.as_tensor(mu_q)
    diff = torch.as_tensor(mu_p, dtype=mu_q.dtype) - mu_q
    ratio = var_q / var_p
    n = mu_q.numel()
    return 0.5 * (n * (ratio - 1.0 - math.log(ratio)) + (diff * diff).sum() / var_p)


def kl_term(x0: torch.Tensor, x_t: torch.Tensor, x0_hat: torch.Tensor, t: int,
            schedule: VarianceSchedule) -> torch.Tensor:
    """KL(q(x_{t-1}|x_t,x0) || p(x_{t-1}|x_t)) with shared variance, t >= 2."""
    t = schedule.check_t(t, 2)
    mu_tilde, var = posterior_mean_var(x_t, x0, t, schedule)
    mu = mu_theta_from_x0hat(x0_hat, x_t, t, schedule)
    return gaussian_kl(mu_tilde, float(var), mu, float(var))


def prior_kl(x0: torch.Tensor, schedule: VarianceSchedule) -> torch.Tensor:
    """KL(q(x_T | x0) || N(0, I)), closed form."""
    ab = schedule.alpha_bar[schedule.T]
    return gaussian_kl(math.sqrt(ab) * x0, 1.0 - ab, torch.zeros_like(x0), 1.0)


@torch.no_grad()
def vlb_estimate(example, model: RelationModel, schedule: VarianceSchedule, rng: torch.Generator,
                 n_mc: int = 1) -> dict:
    """Monte-Carlo VLB breakdown for one example (sums over entries, constants dropped).

    ``L_t_sampled`` is the mean KL at uniformly drawn t in 2..T;
    ``L_t_sum`` scales it by T - 1 to estimate the full sum.
    """
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    batch = collate_examples([example], model.dtype)
    ctx, cmask = model.encode_conditions(batch.y, batch.cond_mask)
    mean = model.emb.lookup(batch.tokens)[0]
    d = model.cfg.d
    L = mean.shape[0]
    LT, Lt, L0, Lr, ts = [], [], [], [], []
    for _ in range(n_mc):
        x0 = embed_step(batch.tokens[0], model.emb, rng)
        LT.append(float(prior_kl(x0, schedule)))
        if schedule.T >= 2:
            t = int(torch.randint(2, schedule.T + 1, (1,), generator=rng))
            x_t = q_sample(x0, t, torch.randn((L, d), generator=rng, dtype=model.dtype), schedule)
            f = model.denoiser(x_t[None], torch.tensor([t]), ctx, cmask)[0]
            Lt.append(float(kl_term(x0, x_t, f, t, schedule)))
            ts.append(t)
        x1 = q_sample(x0, 1, torch.randn((L, d), generator=rng, dtype=model.dtype), schedule)
        f1 = model.denoiser(x1[None], torch.tensor([1]), ctx, cmask)[0]
        L0.append(float(((mean - f1) ** 2).sum() / (2 * schedule.sigma1_sq)))
        nll = rounding_nll(x0, batch.tokens[0], model.emb, model.tau_r, batch.slot_mask[0])
        Lr.append(float(nll) * float(batch.slot_mask[0].sum()))
    Lt_arr = np.array(Lt) if Lt else np.zeros(1)
    return {
        "L_T": float(np.mean(LT)),
        "L_t_sampled": float(Lt_arr.mean()),
        "L_t_sum": float(Lt_arr.mean() * max(schedule.T - 1, 0)),
        "L_0": float(np.mean(L0)),
        "L_round": float(np.mean(Lr)),
        "t": ts,
        "draws": {"L_T": LT, "L_t": Lt, "L_0": L0, "L_round": Lr},
    }
