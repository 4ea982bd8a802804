"""Tensor plumbing: gradients, Adam, masked softmax, checkpoints, seeded RNG.

Tensors are plain ``torch.Tensor`` objects; torch's autograd records the
graph and this module wraps it with the checks the rest of the package
relies on (scalar losses, finite values, zero gradients for unused
parameters).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch

CHECKPOINT_MAGIC = b"RELGEN1"
CHECKPOINT_VERSION = 1

DEFAULT_DTYPE = torch.float32
VERIFY_DTYPE = torch.float64


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or Inf shows up in a loss or gradient."""


def derive_seed(seed: int, *keys: int) -> int:
    """Deterministic child seed for an independent stream (e.g. per scene)."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *[int(k) for k in keys]])
    return int(ss.generate_state(1, dtype=np.uint64)[0] & 0x7FFFFFFFFFFFFFFF)


def make_generator(seed: int, *keys: int) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(derive_seed(seed, *keys) if keys else int(seed))
    return gen


def randn(shape: Sequence[int], rng: torch.Generator, dtype: torch.dtype = DEFAULT_DTYPE) -> torch.Tensor:
    return torch.randn(tuple(shape), generator=rng, dtype=dtype)


def check_finite(x: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise NonFiniteError(f"{what} contains NaN or Inf")
    return x


def gradient_of(loss: torch.Tensor, params: Mapping[str, torch.Tensor] | Sequence[torch.Tensor],
                retain_graph: bool = False) -> dict | list:
    """Reverse-mode gradients of a scalar ``loss`` w.r.t. ``params``.

    Parameters the loss does not depend on get zero gradients. Returns a
    dict when given a mapping, otherwise a list in the same order.
    """
    if loss.dim() != 0 and loss.numel() != 1:
        raise ValueError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    check_finite(loss.detach(), "loss")
    named = isinstance(params, Mapping)
    tensors = list(params.values()) if named else list(params)
    grads = torch.autograd.grad(loss.reshape(()), tensors, allow_unused=True,
                                retain_graph=retain_graph)
    out = []
    for p, g in zip(tensors, grads):
        g = torch.zeros_like(p) if g is None else g
        out.append(check_finite(g, "gradient"))
    if named:
        return dict(zip(params.keys(), out))
    return out


def masked_softmax(logits: torch.Tensor, mask: torch.Tensor | None = None, dim: int = -1) -> torch.Tensor:
    """Softmax along ``dim`` restricted to positions where ``mask`` is true.

    Masked positions come out exactly zero. A row with no valid position is
    an error.
    """
    if mask is None:
        shifted = logits - logits.amax(dim=dim, keepdim=True).detach()
        e = torch.exp(shifted)
        return e / e.sum(dim=dim, keepdim=True)
    mask = mask.to(torch.bool).expand_as(logits)
    if not mask.any(dim=dim).all():
        raise ValueError("masked_softmax: a row has every position masked")
    neg = torch.finfo(logits.dtype).min
    filled = torch.where(mask, logits, torch.full_like(logits, neg))
    shifted = filled - filled.amax(dim=dim, keepdim=True).detach()
    e = torch.where(mask, torch.exp(shifted), torch.zeros_like(logits))
    return e / e.sum(dim=dim, keepdim=True)


@dataclass
class OptimizerState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: Mapping[str, torch.Tensor], grads: Mapping[str, torch.Tensor],
              state: OptimizerState) -> OptimizerState:
    """Bias-corrected Adam update, applied in place to ``params``."""
    if state.step < 0:
        raise ValueError("optimizer step counter must be >= 0")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {tuple(g.shape)} != parameter shape "
                                 f"{tuple(p.shape)} for {name!r}")
            m = state.m.get(name)
            v = state.v.get(name)
            if m is None:
                m = torch.zeros_like(p)
                v = torch.zeros_like(p)
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * g * g
            state.m[name], state.v[name] = m, v
            p.sub_(state.lr * (m / c1) / (torch.sqrt(v / c2) + state.eps))
    return state


def finite_difference_check(fn: Callable[[], torch.Tensor], params: Mapping[str, torch.Tensor],
                            h: float = 1e-5, floor: float = 1e-6,
                            max_entries: int | None = None,
                            rng: np.random.Generator | None = None,
                            retry_h: Sequence[float] = (), retry_above: float = 1e-4,
                            retried: dict | None = None) -> dict[str, float]:
    """Max relative error between autograd and central differences per block.

    ``fn`` must rebuild the loss from scratch on each call (re-seeding any
    noise it draws). Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    ``max_entries`` subsamples large blocks.

    An entry whose error exceeds ``retry_above`` is re-measured at each step
    in ``retry_h`` and keeps the smallest error. A difference that straddles a
    ReLU kink is wrong at one step size only; a wrong analytic gradient is
    wrong at all of them. ``retried`` collects per-block retry counts.
    """
    loss = fn()
    analytic = gradient_of(loss, params)

    def central(flat, i, step):
        orig = flat[i].item()
        with torch.no_grad():
            flat[i] = orig + step
            up = fn().item()
            flat[i] = orig - step
            down = fn().item()
            flat[i] = orig
        return (up - down) / (2 * step)

    report = {}
    for name, p in params.items():
        flat = p.data.view(-1)
        idx = np.arange(flat.numel())
        if max_entries is not None and idx.size > max_entries:
            rng = rng or np.random.default_rng(0)
            idx = np.sort(rng.choice(idx, size=max_entries, replace=False))
        a_flat = analytic[name].reshape(-1)
        worst, n_retry = 0.0, 0
        for i in idx:
            a = a_flat[i].item()
            num = central(flat, i, h)
            err = abs(a - num) / max(abs(a), abs(num), floor)
            if err > retry_above and retry_h:
                n_retry += 1
                for step in retry_h:
                    num = central(flat, i, step)
                    err = min(err, abs(a - num) / max(abs(a), abs(num), floor))
            worst = max(worst, err)
        report[name] = worst
        if retried is not None and n_retry:
            retried[name] = n_retry
    return report


def save_checkpoint(path: str | Path, params: Mapping[str, torch.Tensor], header: dict | None = None) -> None:
    """Write ``RELGEN1`` + JSON header + per-parameter float32 records."""
    hdr = json.dumps(header or {}, sort_keys=True).encode("utf-8")
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(hdr)), hdr,
              struct.pack("<I", len(params))]
    for name, p in params.items():
        raw = name.encode("utf-8")
        arr = p.detach().cpu().numpy().astype("<f4", copy=False)
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a RELGEN1 checkpoint")
    off = len(CHECKPOINT_MAGIC)
    version, hlen = struct.unpack_from("<II", data, off)
    off += 8
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[off:off + hlen].decode("utf-8"))
    off += hlen
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", data, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}I", data, off)
        off += 4 * rank
        n = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(shape)
        off += 4 * n
        params[name] = arr.copy()
    return header, params


def named_parameters(modules: Iterable[tuple[str, torch.nn.Module | torch.Tensor]]) -> dict[str, torch.Tensor]:
    """Flatten ``(prefix, module_or_tensor)`` pairs into one name->tensor map."""
    out = {}
    for prefix, obj in modules:
        if isinstance(obj, torch.Tensor):
            out[prefix] = obj
        else:
            for name, p in obj.named_parameters():
                out[f"{prefix}.{name}"] = p
    return out
