"""Run configuration: every hyperparameter in one validated record."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .denoiser import DenoiserConfig
from .matcher import SIMILARITY_MODES


class ConfigError(ValueError):
    """A configuration value violates its module's preconditions."""


@dataclass(frozen=True)
class RunConfig:
    # model
    d: int = 32
    n_layers: int = 2
    n_heads: int = 2
    ffn_dim: int = 128
    tau_hidden: int | None = None
    L: int = 8
    # diffusion
    T: int = 200
    schedule_kind: str = "linear"
    beta_min: float = 1e-4
    beta_max: float = 0.02
    sigma1: float = 1e-4
    sigma0: float = 0.1
    tau_r: float = 1.0
    # objective and optimisation
    lam: float = 1.0
    kappa: float = 0.05
    lr: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 32
    steps: int = 3000
    log_every: int = 100
    ckpt_every: int = 1000
    # sampling
    ddim_steps: int = 50
    eta: float = 0.0
    t_prime: int = 25
    K: int = 1
    similarity_mode: str = "union_visual"
    # synthetic world
    world_seed: int = 0
    nu: float = 0.05
    eval_nu: float = 0.0
    pseudo_top_k: int = 1
    n_train: int = 512
    n_test: int = 128
    # run
    seed: int = 0
    workers: int = 1
    world_path: str | None = None
    data_path: str | None = None
    out_dir: str | None = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        def need(cond, name, what):
            if not cond:
                raise ConfigError(f"{name}: {what} (got {getattr(self, name)!r})")

        for name in ("d", "n_layers", "n_heads", "ffn_dim", "L", "T", "batch_size",
                     "log_every", "ckpt_every", "ddim_steps", "K", "pseudo_top_k", "n_train", "n_test", "workers"):
            need(isinstance(getattr(self, name), int) and getattr(self, name) >= 1, name, "must be an integer >= 1")
        need(self.steps >= 0, "steps", "must be >= 0")
        need(self.d % self.n_heads == 0, "n_heads", "must divide d")
        need(self.tau_hidden is None or self.tau_hidden >= 1, "tau_hidden", "must be >= 1")
        need(self.schedule_kind in ("linear", "sqrt"), "schedule_kind", "must be 'linear' or 'sqrt'")
        need(0 < self.beta_min <= self.beta_max < 1, "beta_min", "need 0 < beta_min <= beta_max < 1")
        need(self.sigma1 > 0, "sigma1", "must be > 0")
        need(self.sigma0 >= 0, "sigma0", "must be >= 0")
        need(self.tau_r > 0, "tau_r", "must be > 0")
        need(self.lam >= 0, "lam", "must be >= 0")
        need(self.kappa > 0, "kappa", "must be > 0")
        need(self.lr > 0, "lr", "must be > 0")
        need(0 <= self.beta1 < 1, "beta1", "must lie in [0, 1)")
        need(0 <= self.beta2 < 1, "beta2", "must lie in [0, 1)")
        need(self.ddim_steps <= self.T, "ddim_steps", "must be <= T")
        need(self.eta >= 0, "eta", "must be >= 0")
        need(0 <= self.t_prime <= self.T, "t_prime", "must lie in [0, T]")
        need(self.similarity_mode in SIMILARITY_MODES, "similarity_mode", f"must be one of {SIMILARITY_MODES}")
        need(self.nu >= 0, "nu", "must be >= 0")
        need(self.eval_nu >= 0, "eval_nu", "must be >= 0")

    def model_config(self) -> DenoiserConfig:
        return DenoiserConfig(d=self.d, n_layers=self.n_layers, n_heads=self.n_heads, ffn_dim=self.ffn_dim,
                              L=self.L, d_feat=self.d, T=self.T, tau_hidden=self.tau_hidden)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: malformed JSON ({exc})") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        return cls.from_dict(doc)

    def override(self, **changes) -> "RunConfig":
        changes = {k: v for k, v in changes.items() if v is not None}
        unknown = sorted(set(changes) - {f.name for f in fields(self)})
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return replace(self, **changes)


DESK = RunConfig()

# Full-scale values; the synthetic world still has 48 predicates.
FULL = RunConfig(d=512, n_layers=6, n_heads=8, ffn_dim=2048, tau_hidden=2048, L=32, T=2000, lr=1e-4,
                 batch_size=128, steps=40000, t_prime=250)

PRESETS = {"desk": DESK, "full": FULL}
