"""Variance schedules, forward noising and the Gaussian posterior."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

SCHEDULE_KINDS = ("linear", "sqrt")


@dataclass(frozen=True)
class VarianceSchedule:
    """Per-step tables indexed by t = 0..T.

    Index 0 is the clean-data anchor: ``alpha_bar[0] = 1`` and ``beta[0] = 0``.
    ``sigma_tilde_sq[1]`` holds ``sigma1_sq``, the independently chosen
    variance of the final step.
    """

    T: int
    kind: str
    beta_min: float
    beta_max: float
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma_tilde_sq: np.ndarray
    coef_x0: np.ndarray
    coef_xt: np.ndarray
    sigma1_sq: float = 1e-8

    def header(self) -> dict:
        return {"T": self.T, "kind": self.kind, "beta_min": self.beta_min, "beta_max": self.beta_max,
                "sigma1_sq": self.sigma1_sq}

    def check_t(self, t: int, lo: int = 1) -> int:
        t = int(t)
        if not lo <= t <= self.T:
            raise ValueError(f"t={t} outside [{lo}, {self.T}]")
        return t


def schedule_from_betas(betas, kind: str = "custom", beta_min: float | None = None,
                        beta_max: float | None = None, sigma1: float = 1e-4,
                        allow_zero: bool = False) -> VarianceSchedule:
    """Tables for explicit per-step betas.

    ``allow_zero`` admits noiseless steps after the first (degenerate, for
    testing identities only).
    """
    betas = np.asarray(betas, dtype=np.float64)
    if betas.ndim != 1 or betas.size < 1:
        raise ValueError("need at least one step")
    lower_ok = (betas >= 0) if allow_zero else (betas > 0)
    if not np.all(lower_ok & (betas < 1)) or betas[0] <= 0:
        raise ValueError("every beta must lie in (0, 1)")
    T = betas.size
    beta = np.concatenate([[0.0], betas])
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    prev = np.concatenate([[1.0], alpha_bar[:-1]])
    sigma_tilde_sq = np.zeros(T + 1)
    coef_x0 = np.zeros(T + 1)
    coef_xt = np.zeros(T + 1)
    denom = 1.0 - alpha_bar[1:]
    sigma_tilde_sq[1:] = (1.0 - prev[1:]) / denom * beta[1:]
    coef_x0[1:] = np.sqrt(prev[1:]) * beta[1:] / denom
    coef_xt[1:] = np.sqrt(alpha[1:]) * (1.0 - prev[1:]) / denom
    # alpha_bar[0] = 1 makes these exactly 1 and 0; pin them against rounding
    coef_x0[1], coef_xt[1] = 1.0, 0.0
    sigma_tilde_sq[1] = sigma1 ** 2
    return VarianceSchedule(T=T, kind=kind, beta_min=float(betas.min() if beta_min is None else beta_min),
                            beta_max=float(betas.max() if beta_max is None else beta_max), beta=beta,
                            alpha=alpha, alpha_bar=alpha_bar, sigma_tilde_sq=sigma_tilde_sq,
                            coef_x0=coef_x0, coef_xt=coef_xt, sigma1_sq=sigma1 ** 2)


def build_schedule(T: int, kind: str = "linear", beta_min: float = 1e-4, beta_max: float = 0.02,
                   sigma1: float = 1e-4, rescale: bool = True) -> VarianceSchedule:
    """Build a schedule with ``T`` steps.

    ``linear`` interpolates beta from ``beta_min`` to ``beta_max``; with
    ``rescale`` that range is first multiplied by 1000/T so short schedules
    still end near pure noise (the scaled values must stay below 1).
    ``sqrt`` follows ``alpha_bar(s) = 1 - sqrt(s + 1e-4)`` on s = t/T with
    betas clipped to [beta_min, 0.999]; ``beta_max`` does not apply to it.
    """
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    if kind not in SCHEDULE_KINDS:
        raise ValueError(f"unknown schedule kind {kind!r}; expected one of {SCHEDULE_KINDS}")
    if not 0 < beta_min <= beta_max < 1:
        raise ValueError(f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    T = int(T)
    lo, hi = beta_min, beta_max
    if rescale:
        lo, hi = beta_min * 1000.0 / T, beta_max * 1000.0 / T
        if hi >= 1:
            raise ValueError(f"beta_max scaled by 1000/T = {hi} is not below 1; lower beta_max or raise T")
    if kind == "linear":
        betas = np.linspace(lo, hi, T) if T > 1 else np.array([lo])
    else:
        s = np.arange(T + 1) / T
        ab = 1.0 - np.sqrt(s + 1e-4)
        betas = np.clip(1.0 - ab[1:] / np.maximum(ab[:-1], 1e-12), beta_min, 0.999)
    return schedule_from_betas(betas, kind=kind, beta_min=beta_min, beta_max=beta_max, sigma1=sigma1)


def from_header(h: dict) -> VarianceSchedule:
    return build_schedule(h["T"], h["kind"], h["beta_min"], h["beta_max"],
                          sigma1=float(np.sqrt(h.get("sigma1_sq", 1e-8))))


def _as_col(values, like: torch.Tensor) -> torch.Tensor:
    """Per-example scalars broadcast against a [B, ...] tensor."""
    v = torch.as_tensor(values, dtype=like.dtype)
    if v.dim() == 0:
        return v
    return v.reshape(-1, *([1] * (like.dim() - 1)))


def _t_array(t, schedule: VarianceSchedule, lo: int) -> np.ndarray:
    arr = np.asarray(t.cpu().numpy() if isinstance(t, torch.Tensor) else t, dtype=np.int64)
    if arr.size and (arr.min() < lo or arr.max() > schedule.T):
        raise ValueError(f"t outside [{lo}, {schedule.T}]: {arr}")
    return arr


def q_sample(x0: torch.Tensor, t, epsilon: torch.Tensor, schedule: VarianceSchedule) -> torch.Tensor:
    """x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps.

    ``t`` is an int or one step per leading batch entry. t = 0 returns x0.
    """
    if epsilon.shape != x0.shape:
        raise ValueError("epsilon must have the shape of x0")
    ts = _t_array(t, schedule, 0)
    ab = schedule.alpha_bar[ts]
    return _as_col(np.sqrt(ab), x0) * x0 + _as_col(np.sqrt(1.0 - ab), x0) * epsilon


def posterior_mean_var(x_t: torch.Tensor, x0: torch.Tensor, t, schedule: VarianceSchedule):
    """Mean and variance of q(x_{t-1} | x_t, x0). t = 1 gives mean x0."""
    ts = _t_array(t, schedule, 1)
    mean = _as_col(schedule.coef_x0[ts], x0) * x0 + _as_col(schedule.coef_xt[ts], x_t) * x_t
    return mean, schedule.sigma_tilde_sq[ts]


def mu_theta_from_x0hat(x0_hat: torch.Tensor, x_t: torch.Tensor, t, schedule: VarianceSchedule) -> torch.Tensor:
    ts = _t_array(t, schedule, 1)
    return _as_col(schedule.coef_x0[ts], x0_hat) * x0_hat + _as_col(schedule.coef_xt[ts], x_t) * x_t
