"""Built-in invariant and oracle checks, runnable from the command line."""

from __future__ import annotations

import dataclasses
import itertools
import json
import tempfile
import time
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig
from .denoiser import DenoiserConfig, RelationModel
from .evalsuite import spice_pr_curve, t2i_retrieval
from .matcher import assignment_cost, hungarian, multi_round_match
from .numerics import (OptimizerState, adam_step, finite_difference_check, load_checkpoint, make_generator,
                       masked_softmax, save_checkpoint)
from .objectives import collate_examples, loss_match, loss_total
from .relvocab import RelationSequence, RelationVocabulary, decode_sequence, embed_step
from .sampler import SamplerConfig, ddim_step, ddim_timesteps, enhance_batch
from .schedule import VarianceSchedule, build_schedule, mu_theta_from_x0hat, posterior_mean_var, q_sample
from .synthworld import (build_concept_space, build_examples, default_world, gen_dataset, load_dataset,
                         mock_encode, save_dataset, vocabulary_from_space)

F64 = torch.float64


def corrupt_schedule(s: VarianceSchedule, t: int = 7, factor: float = 1.01) -> VarianceSchedule:
    """Copy of ``s`` with one posterior coefficient scaled; used to show the checks bite."""
    coef = s.coef_x0.copy()
    coef[t] *= factor
    return dataclasses.replace(s, coef_x0=coef)


def tiny_model(d=16, L=4, n_layers=1, n_heads=2, vocab_size=5, seed=0, dtype=F64):
    gen = np.random.default_rng(seed)
    cfg = DenoiserConfig(d=d, n_layers=n_layers, n_heads=n_heads, ffn_dim=2 * d, L=L, d_feat=d, T=50)
    vocab = RelationVocabulary([f"p{i}" for i in range(vocab_size)], gen.standard_normal((vocab_size, d)),
                               sigma0=0.1, dtype=dtype)
    return RelationModel(cfg, vocab, dtype=dtype).reset_parameters(make_generator(seed, 1))


class _Example:
    def __init__(self, seq, cond, M):
        self.seq, self.cond, self.M = seq, cond, M


def tiny_examples(model: RelationModel, n_pairs=(2, 1), seed=0):
    from .denoiser import ConditionSet
    gen = np.random.default_rng(seed)
    L, d_y, d = model.cfg.L, model.cfg.d_y, model.cfg.d_feat
    out = []
    for n in n_pairs:
        so = gen.standard_normal((n, d))
        so /= np.linalg.norm(so, axis=1, keepdims=True)
        cond = ConditionSet.from_rows(gen.standard_normal((n, d_y)), so, L)
        tokens = gen.integers(0, model.emb.size, L)
        prov = ["gt"] * n + ["pseudo"] * (L - n - 1) + ["pad"]
        M = np.zeros((L, n))
        M[np.arange(n), np.arange(n)] = 1.0
        out.append(_Example(RelationSequence(tokens, prov), cond, M))
    return out


def check_gradients(schedule=None) -> tuple[bool, str]:
    model = tiny_model()
    sched = schedule or build_schedule(50)
    batch = collate_examples(tiny_examples(model), F64)

    def loss():
        return loss_total(batch, model, sched, 1.0, 0.5, rng=make_generator(3)).l_total

    errs = finite_difference_check(loss, model.params(), max_entries=24, rng=np.random.default_rng(0))
    worst = max(errs.values())
    return worst < 1e-4, f"max relative error {worst:.2e} over {len(errs)} blocks"


def check_proportionality(schedule=None) -> tuple[bool, str]:
    s = schedule or build_schedule(2000)
    gen = np.random.default_rng(1)
    worst = 0.0
    # 100 random steps, then every step once so a single bad table entry is caught
    for t in list(gen.integers(2, s.T + 1, 100)) + list(range(2, s.T + 1)):
        t = int(t)
        x0, xt, f = (torch.as_tensor(gen.standard_normal((4, 8))) for _ in range(3))
        mu_tilde, _ = posterior_mean_var(xt, x0, t, s)
        mu = mu_theta_from_x0hat(f, xt, t, s)
        lhs = float(((mu_tilde - mu) ** 2).sum())
        # coefficient recomputed from the raw betas, independent of the stored table
        c = np.sqrt(np.prod(1 - s.beta[1:t])) * s.beta[t] / (1 - np.prod(1 - s.beta[1:t + 1]))
        rhs = c ** 2 * float(((x0 - f) ** 2).sum())
        worst = max(worst, abs(lhs - rhs) / abs(rhs))
    return worst < 1e-10, f"max relative error {worst:.2e}"


def check_schedule_moments(schedule=None) -> tuple[bool, str]:
    s = schedule or build_schedule(200)
    g = make_generator(5)
    x0 = torch.tensor([1.5, -0.7], dtype=F64)
    worst = 0.0
    for t in (1, 17, 60, 130, 200):
        eps = torch.randn((100_000, 2), generator=g, dtype=F64)
        xt = q_sample(x0.expand(100_000, 2), t, eps, s)
        m_err = (xt.mean(0) - np.sqrt(s.alpha_bar[t]) * x0).abs().max().item()
        v_rel = ((xt.var(0) - (1 - s.alpha_bar[t])).abs() / (1 - s.alpha_bar[t])).max().item()
        m_rel = m_err / max(np.sqrt(s.alpha_bar[t]) * 1.5, np.sqrt(1 - s.alpha_bar[t]))
        worst = max(worst, m_rel, v_rel)
    return worst < 0.02, f"worst relative moment error {worst:.3%}"


def check_schedule_tables(schedule=None) -> tuple[bool, str]:
    s = schedule or build_schedule(2000)
    ab = np.cumprod(1 - s.beta[1:])
    ok = np.all(np.diff(s.alpha_bar) < 0) and np.allclose(s.alpha_bar[1:], ab, rtol=0, atol=1e-12)
    prev = np.concatenate([[1.0], ab[:-1]])
    ok &= np.allclose(s.coef_x0[1:], np.sqrt(prev) * s.beta[1:] / (1 - ab), rtol=1e-12, atol=0)
    ok &= np.allclose(s.coef_xt[1:], np.sqrt(1 - s.beta[1:]) * (1 - prev) / (1 - ab), rtol=1e-12, atol=0)
    return bool(ok), "product identity, monotonicity and posterior coefficients"


def check_hungarian(n_mats: int = 200) -> tuple[bool, str]:
    gen = np.random.default_rng(2)
    bad = 0
    for k in range(n_mats):
        n = 1 + k % 7
        c = gen.standard_normal((n, n)) if k % 2 else gen.integers(0, 4, (n, n)).astype(float)
        best = min(sum(c[p[j], j] for j in range(n)) for p in itertools.permutations(range(n)))
        bad += assignment_cost(c, hungarian(c)) != best
    return bad == 0, f"{n_mats - bad}/{n_mats} optimal"


def check_multi_round(n_cases: int = 50) -> tuple[bool, str]:
    gen = np.random.default_rng(3)
    bad = 0
    for _ in range(n_cases):
        S = gen.uniform(-1, 1, (8, 3))
        a = multi_round_match(S)
        first = {p: r for r, p, k in a.links if k == 1}
        best = max(sum(S[rows[j], j] for j in range(3)) for rows in itertools.permutations(range(8), 3))
        got = sum(S[first[j], j] for j in range(3))
        once = sorted(r for r, _, _ in a.links) == list(range(8))
        bad += (abs(got - best) > 1e-12) or not once
    return bad == 0, f"{n_cases - bad}/{n_cases} optimal round-1 injections"


def check_round_trip() -> tuple[bool, str]:
    gen = np.random.default_rng(4)
    vocab = RelationVocabulary([f"p{i}" for i in range(12)], gen.standard_normal((12, 8)), dtype=F64)
    bad = 0
    for _ in range(200):
        v = gen.integers(0, 12, 6)
        seq, _ = decode_sequence(embed_step(v, vocab, None, sigma0=0.0), vocab)
        bad += not np.array_equal(seq.tokens, v)
    return bad == 0, f"{200 - bad}/200 sequences recovered"


def check_enhance_identity() -> tuple[bool, str]:
    model = tiny_model()
    exs = tiny_examples(model)
    sched = build_schedule(50)
    cfg = SamplerConfig(n_steps=5, t_prime=0)
    gens = enhance_batch([e.seq for e in exs], [e.cond for e in exs], model, sched, cfg,
                         [make_generator(0, i) for i in range(len(exs))])
    ok = all(np.array_equal(g.seq.tokens, e.seq.tokens) for g, e in zip(gens, exs))
    return ok, "t_prime = 0 leaves tokens unchanged"


def check_ddim_telescoping() -> tuple[bool, str]:
    s = build_schedule(200)
    g = make_generator(6)
    x0 = torch.randn((4, 8), generator=g, dtype=F64)
    x = torch.randn((4, 8), generator=g, dtype=F64)
    steps = ddim_timesteps(200, 50)
    for i, t in enumerate(steps):
        x = ddim_step(x, x0, t, steps[i + 1] if i + 1 < len(steps) else 0, s)
    err = (x - x0).abs().max().item()
    return err < 1e-10, f"max deviation {err:.1e}"


def check_masked_softmax() -> tuple[bool, str]:
    p = masked_softmax(torch.tensor([1.0, 2.0, 3.0], dtype=F64))
    e = np.exp([1.0, 2.0, 3.0])
    err = float(np.abs(p.numpy() - e / e.sum()).max())
    q = masked_softmax(torch.tensor([5.0, 1.0, 2.0], dtype=F64), torch.tensor([False, True, True]))
    ok = err < 1e-12 and q[0].item() == 0.0 and abs(q.sum().item() - 1) < 1e-12
    return ok, f"oracle error {err:.1e}, masked entry exactly 0"


def check_adam() -> tuple[bool, str]:
    x = {"x": torch.tensor([2.0], dtype=F64)}
    st = OptimizerState(lr=0.1)
    m = v = 0.0
    ref = 2.0
    for k in (1, 2):
        g = 2 * ref
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref -= 0.1 * (m / (1 - 0.9 ** k)) / (np.sqrt(v / (1 - 0.999 ** k)) + 1e-8)
        adam_step(x, {"x": 2 * x["x"].clone()}, st)
    err = abs(x["x"].item() - ref)
    return err < 1e-12, f"hand-stepped deviation {err:.1e}"


def check_loss_match() -> tuple[bool, str]:
    gen = np.random.default_rng(7)
    x, c = torch.as_tensor(gen.standard_normal((3, 4))), torch.as_tensor(gen.standard_normal((2, 4)))
    M = np.array([[1, 0], [0, 1], [0, 0]], dtype=float)
    got = loss_match(x, c, M, 0.05).item()
    S = (x.numpy() / np.linalg.norm(x.numpy(), axis=1, keepdims=True)) @ \
        (c.numpy() / np.linalg.norm(c.numpy(), axis=1, keepdims=True)).T
    z = S / 0.05
    ref = float(np.mean(M * np.logaddexp(0, -z) + (1 - M) * np.logaddexp(0, z)))
    return abs(got - ref) < 1e-12, f"oracle deviation {abs(got - ref):.1e}"


def check_checkpoint() -> tuple[bool, str]:
    model = tiny_model(dtype=torch.float32)
    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "m.ckpt"
        model.save(path, build_schedule(50))
        ok = path.read_bytes()[:7] == b"RELGEN1"
        header, arrays = load_checkpoint(path)
        ok &= all(np.array_equal(arrays[k], p.detach().numpy()) for k, p in model.params().items())
        again, _ = RelationModel.load(path)
        ok &= all(torch.equal(again.params()[k], p) for k, p in model.params().items())
    return bool(ok), f"{len(arrays)} parameter records round-tripped"


def check_dataset() -> tuple[bool, str]:
    world = default_world(0)
    space = build_concept_space(world)
    scenes = gen_dataset(64, world, 11)
    with tempfile.TemporaryDirectory() as d:
        a, b = Path(d) / "a.jsonl", Path(d) / "b.jsonl"
        save_dataset(scenes, a)
        save_dataset(gen_dataset(64, world, 11), b)
        back = load_dataset(a)
        ok = a.read_bytes() == b.read_bytes() and [s.to_record() for s in back] == [s.to_record() for s in scenes]
    for s in scenes:
        s.validate(world)
    vocab = vocabulary_from_space(world, space)
    for ex in build_examples(scenes, vocab, 8, space, 0):
        ex.validate(vocab.size, 8)
    return ok, "byte-identical regeneration, lossless reload, valid training examples"


def check_config() -> tuple[bool, str]:
    cfg = RunConfig(seed=3, lam=0.5)
    with tempfile.TemporaryDirectory() as d:
        cfg.save(Path(d) / "c.json")
        back = RunConfig.load(Path(d) / "c.json")
    return back == cfg, "save/load is lossless"


def check_spice() -> tuple[bool, str]:
    targets = [{("a", "p", "b"), ("a", "q", "b")}, {("c", "r", "d")}]
    ranked = [[("a", "p", "b"), ("x", "y", "z"), ("a", "q", "b")], [("c", "r", "d"), ("c", "r", "d")]]
    curve = spice_pr_curve(ranked, targets, [1, 2, 3])
    mono = all(b[2] >= a[2] for a, b in zip(curve, curve[1:]))
    perfect = spice_pr_curve([sorted(t) for t in targets], targets, [2])[0]
    return mono and perfect[1:] == (1.0, 1.0), f"curve {curve}"


def check_t2i() -> tuple[bool, str]:
    world = default_world(0)
    space = build_concept_space(world)
    scenes, seen = [], set()
    for s in gen_dataset(200, world, 12):
        key = frozenset(c for tr in s.targets() for c in tr)
        if key not in seen:
            seen.add(key)
            scenes.append(s)
        if len(scenes) == 64:
            break
    imgs = np.stack([mock_encode("image", ([c for _, c, _ in s.objects], [p for _, p, _ in s.triplets]),
                                 space, None, 0.0) for s in scenes])
    r = t2i_retrieval([sorted(s.targets()) for s in scenes], imgs, space)
    return r[1] == 1.0, f"GT captions R@1 = {r[1]:.3f}"


CHECKS = [
    ("gradient_finite_difference", check_gradients),
    ("posterior_proportionality", check_proportionality),
    ("schedule_moments", check_schedule_moments),
    ("schedule_tables", check_schedule_tables),
    ("hungarian_brute_force", check_hungarian),
    ("multi_round_injection", check_multi_round),
    ("rounding_round_trip", check_round_trip),
    ("enhance_identity", check_enhance_identity),
    ("ddim_telescoping", check_ddim_telescoping),
    ("masked_softmax_oracle", check_masked_softmax),
    ("adam_hand_oracle", check_adam),
    ("matching_bce_oracle", check_loss_match),
    ("checkpoint_round_trip", check_checkpoint),
    ("dataset_round_trip", check_dataset),
    ("config_round_trip", check_config),
    ("spice_properties", check_spice),
    ("t2i_gt_captions", check_t2i),
]

SCHEDULE_CHECKS = {"gradient_finite_difference", "posterior_proportionality", "schedule_moments", "schedule_tables"}


def run_selftest(echo=print, schedule: VarianceSchedule | None = None) -> list[dict]:
    """Run every check; ``schedule`` replaces the T=2000 table the schedule checks use."""
    results = []
    for name, fn in CHECKS:
        t0 = time.time()
        try:
            if name in SCHEDULE_CHECKS and schedule is not None and name != "gradient_finite_difference":
                ok, detail = fn(schedule)
            else:
                ok, detail = fn()
        except Exception as exc:  # a crashing check is a failing check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append({"check": name, "ok": bool(ok), "detail": detail, "seconds": round(time.time() - t0, 2)})
        if echo:
            echo(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return results


def summary(results) -> str:
    return json.dumps({"passed": sum(r["ok"] for r in results), "total": len(results)})
