"""End-to-end wiring: world setup, training loop, scene prediction, enhancement, baselines."""

from __future__ import annotations

import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig
from .denoiser import RelationModel
from .evalsuite import CommonsensePrior, TripletPrediction, gt_triplets, recall_at_k
from .matcher import multi_round_match, similarity_matrix
from .numerics import OptimizerState, adam_step, check_finite, derive_seed, gradient_of, make_generator
from .objectives import collate_examples, loss_total
from .relvocab import RelationSequence
from .sampler import SamplerConfig, enhance_batch, expand_pair_relations, generate_batch, scene_generators
from .schedule import VarianceSchedule, build_schedule
from .synthworld import (ConceptSpace, SceneInstance, WorldConfig, build_concept_space, build_examples,
                         default_world, mock_encode, scene_conditions, vocabulary_from_space)

CHUNK = 32   # scenes per generation batch; fixed so results ignore the worker count


@dataclass
class Setup:
    world: WorldConfig
    space: ConceptSpace

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "Setup":
        if cfg.world_path:
            world = WorldConfig.from_json(cfg.world_path)
        else:
            world = default_world(cfg.world_seed, d_feat=cfg.d, nu=cfg.nu)
        if world.d_feat != cfg.d:
            raise ValueError(f"world d_feat={world.d_feat} must equal latent width d={cfg.d}")
        return cls(world, build_concept_space(world))

    def prior(self) -> CommonsensePrior:
        return CommonsensePrior.from_world(self.world)

    def synonym_map(self) -> dict:
        return self.world.synonym_map()

    def image_embeddings(self, scenes, seed: int, nu: float) -> np.ndarray:
        out = []
        for s in scenes:
            payload = ([c for _, c, _ in s.objects], [p for _, p, _ in s.triplets])
            out.append(mock_encode("image", payload, self.space, np.random.default_rng([seed, s.id, 3]), nu))
        return np.stack(out)


def new_model(cfg: RunConfig, setup: Setup, dtype=torch.float32) -> RelationModel:
    vocab = vocabulary_from_space(setup.world, setup.space, sigma0=cfg.sigma0, dtype=dtype)
    model = RelationModel(cfg.model_config(), vocab, tau_r=cfg.tau_r, dtype=dtype)
    return model.reset_parameters(make_generator(cfg.seed, 1))


def schedule_for(cfg: RunConfig) -> VarianceSchedule:
    return build_schedule(cfg.T, cfg.schedule_kind, cfg.beta_min, cfg.beta_max, cfg.sigma1)


def training_examples(scenes, setup: Setup, cfg: RunConfig, model: RelationModel):
    return build_examples(scenes, model.emb, cfg.L, setup.space, cfg.seed, cfg.nu, pseudo_top_k=cfg.pseudo_top_k)


def train(model: RelationModel, schedule: VarianceSchedule, examples, cfg: RunConfig,
          log_path: str | Path | None = None, ckpt_dir: str | Path | None = None, extra_header=None,
          echo=None) -> list[dict]:
    """Adam on l_total; returns the per-step loss history.

    Every ``log_every`` steps one JSON line with the window means is written;
    checkpoints go to ``ckpt_dir`` every ``ckpt_every`` steps and at the end.
    """
    params = model.params()
    state = OptimizerState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
    pick = np.random.default_rng(derive_seed(cfg.seed, 2))
    noise_rng = make_generator(cfg.seed, 3)
    history, window = [], []
    log_file = open(log_path, "w") if log_path else None
    ckpt_dir = Path(ckpt_dir) if ckpt_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    bs = min(cfg.batch_size, len(examples))
    t0 = time.time()
    try:
        for step in range(1, cfg.steps + 1):
            idx = pick.choice(len(examples), size=bs, replace=False)
            batch = collate_examples([examples[i] for i in idx], model.dtype)
            rep = loss_total(batch, model, schedule, cfg.lam, cfg.kappa, rng=noise_rng)
            check_finite(rep.l_total.detach(), f"l_total at step {step}")
            grads = gradient_of(rep.l_total, params)
            adam_step(params, grads, state)
            row = {"step": step, **rep.as_dict()}
            history.append(row)
            window.append(row)
            if step % cfg.log_every == 0 or step == cfg.steps:
                line = {"step": step}
                for k in ("l_simple", "l_round", "l_match", "l_total"):
                    line[k] = float(np.mean([r[k] for r in window]))
                window = []
                if log_file:
                    log_file.write(json.dumps(line) + "\n")
                    log_file.flush()
                if echo:
                    echo(f"{json.dumps(line)}  ({time.time() - t0:.1f}s)")
            if ckpt_dir and (step % cfg.ckpt_every == 0 or step == cfg.steps):
                model.save(ckpt_dir / f"step{step:06d}.ckpt", schedule, extra_header)
        if ckpt_dir:
            model.save(ckpt_dir / "final.ckpt", schedule, extra_header)
    finally:
        if log_file:
            log_file.close()
    return history


def running_average(values, window: int = 100) -> np.ndarray:
    """Trailing mean; entry i averages values[max(0, i-window+1) .. i]."""
    v = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(v)])
    i = np.arange(1, len(v) + 1)
    lo = np.maximum(0, i - window)
    return (c[i] - c[lo]) / (i - lo)


def _pair_objects(scene: SceneInstance, pair) -> tuple:
    s, o = pair
    return scene.obj(s), scene.obj(o)


def assemble_triplets(scene: SceneInstance, cond, tokens, scores, slot_pair, phrases) -> list[TripletPrediction]:
    """One triplet per (pair, predicate), keeping the best slot score; sorted by score."""
    best = {}
    for i, (tok, j) in enumerate(zip(tokens, slot_pair)):
        key = (int(j), int(tok))
        if key not in best or scores[i] > best[key]:
            best[key] = float(scores[i])
    preds = []
    for (j, tok), sc in sorted(best.items(), key=lambda kv: (-kv[1], kv[0][0], phrases[kv[0][1]])):
        subj, obj = _pair_objects(scene, cond.pairs[j])
        preds.append(TripletPrediction(tuple(subj), phrases[tok], tuple(obj), sc))
    return preds


def match_slots(tokens, cond, model: RelationModel, mode: str) -> list[int]:
    """Pair index for each slot by multi-round matching on relation embeddings."""
    with torch.no_grad():
        emb_rows = model.emb.lookup(tokens).double().numpy()
        projected = None
        if mode == "projected":
            y = torch.as_tensor(cond.y[None], dtype=model.dtype)
            projected = model.tau(y)[0].double().numpy()
    S = similarity_matrix(emb_rows, cond, mode, projected)
    pair_of = multi_round_match(S).pair_of()
    return [pair_of[i] for i in range(len(tokens))]


def _predict_chunk(args):
    scenes, model, schedule, cfg, seed, space, mode = args
    conds = [scene_conditions(s, space, cfg.L, np.random.default_rng([seed, s.id, 2]), cfg.eval_nu)
             for s in scenes]
    scfg = SamplerConfig(n_steps=cfg.ddim_steps, eta=cfg.eta, t_prime=cfg.t_prime, K=cfg.K)
    gens = generate_batch(conds, model, schedule, scfg, scene_generators(seed, [s.id for s in scenes]))
    out = {}
    for scene, cond, gen in zip(scenes, conds, gens):
        slot_pair = match_slots(gen.seq.tokens, cond, model, mode)
        out[scene.id] = assemble_triplets(scene, cond, gen.seq.tokens, gen.seq.scores, slot_pair,
                                          model.emb.phrases)
    return out


def _run_chunks(fn, jobs, workers: int) -> dict:
    out = {}
    if workers <= 1 or len(jobs) <= 1:
        for job in jobs:
            out.update(fn(job))
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for part in pool.map(fn, jobs):
                out.update(part)
    return out


def predict_scenes(scenes, model: RelationModel, schedule: VarianceSchedule, cfg: RunConfig, setup: Setup,
                   seed: int | None = None, mode: str | None = None, workers: int | None = None) -> dict:
    """{scene_id: [TripletPrediction]} from generation plus multi-round matching."""
    seed = cfg.seed if seed is None else seed
    mode = mode or cfg.similarity_mode
    jobs = [(scenes[i:i + CHUNK], model, schedule, cfg, seed, setup.space, mode)
            for i in range(0, len(scenes), CHUNK)]
    return _run_chunks(_predict_chunk, jobs, workers or cfg.workers)


def _same_object(pred_part, obj) -> bool:
    return pred_part[1] == obj[1] and np.allclose(pred_part[2], obj[2], atol=1e-9)


def pair_relations_from_predictions(scene: SceneInstance, cond, preds, index) -> list[list[int]]:
    """Predicted predicate indices per condition pair, best score first."""
    rel = [[] for _ in range(cond.n)]
    for p in sort_by_score(preds):
        for j, pair in enumerate(cond.pairs):
            subj, obj = _pair_objects(scene, pair)
            if _same_object(p.subject, subj) and _same_object(p.object, obj):
                rel[j].append(index[p.predicate])
                break
    return rel


def sort_by_score(preds):
    return sorted(preds, key=lambda p: -p.score)


def _enhance_chunk(args):
    scenes, preds, model, schedule, cfg, seed, space, t_prime, K = args
    conds, seqs, owners, kept = [], [], [], []
    for s in scenes:
        cond = scene_conditions(s, space, cfg.L, np.random.default_rng([seed, s.id, 2]), cfg.eval_nu)
        rel = pair_relations_from_predictions(s, cond, preds.get(s.id, []), model.emb.index)
        if not any(rel):
            continue
        tokens, owner = expand_pair_relations(rel, K, cfg.L)
        conds.append(cond)
        seqs.append(RelationSequence(tokens, ["pseudo"] * len(tokens)))
        owners.append(owner)
        kept.append(s)
    out = {s.id: [] for s in scenes}
    if not kept:
        return out
    scfg = SamplerConfig(n_steps=cfg.ddim_steps, eta=cfg.eta, t_prime=t_prime, K=K)
    gens = enhance_batch(seqs, conds, model, schedule, scfg, scene_generators(derive_seed(seed, 5), [s.id for s in kept]))
    for s, cond, gen, owner in zip(kept, conds, gens, owners):
        out[s.id] = assemble_triplets(s, cond, gen.seq.tokens, gen.seq.scores, owner, model.emb.phrases)
    return out


def enhance_scenes(scenes, predictions: dict, model: RelationModel, schedule: VarianceSchedule, cfg: RunConfig,
                   setup: Setup, seed: int | None = None, t_prime: int | None = None, K: int | None = None,
                   workers: int | None = None) -> dict:
    """Re-noise each scene's predicted relations to t_prime and denoise them back.

    Every slot keeps the pair it was built for; scores come from the new
    rounding distribution.
    """
    seed = cfg.seed if seed is None else seed
    t_prime = cfg.t_prime if t_prime is None else t_prime
    K = cfg.K if K is None else K
    jobs = [(scenes[i:i + CHUNK], predictions, model, schedule, cfg, seed, setup.space, t_prime, K)
            for i in range(0, len(scenes), CHUNK)]
    return _run_chunks(_enhance_chunk, jobs, workers or cfg.workers)


def random_predictions(scenes, world: WorldConfig, L: int, rng: np.random.Generator) -> dict:
    """L triplets per scene: uniform predicate, uniform GT-annotated pair, uniform score."""
    out = {}
    for s in scenes:
        pairs = s.pairs()[:L]
        preds = []
        for _ in range(L):
            subj, obj = _pair_objects(s, pairs[int(rng.integers(len(pairs)))])
            preds.append(TripletPrediction(tuple(subj), world.predicates[int(rng.integers(len(world.predicates)))],
                                           tuple(obj), float(rng.random())))
        out[s.id] = sort_by_score(preds)
    return out


def random_baseline_recall(scenes, world: WorldConfig, L: int, K: int, seed: int, n_draws: int = 20,
                           synonym_map=None) -> float:
    """Recall@K of random predictions, averaged over ``n_draws`` seeded draws."""
    gts = [gt_triplets(s) for s in scenes]
    vals = []
    for k in range(n_draws):
        preds = random_predictions(scenes, world, L, np.random.default_rng([seed, k]))
        vals.append(recall_at_k([preds[s.id] for s in scenes], gts, K, synonym_map))
    return float(np.mean(vals))


def prior_predictions(scenes, prior: CommonsensePrior, L: int) -> dict:
    """One triplet per pair: the prior's argmax predicate, scored by its probability."""
    out = {}
    for s in scenes:
        preds = []
        for pair in s.pairs()[:L]:
            subj, obj = _pair_objects(s, pair)
            p = prior.argmax(subj[1], obj[1])
            preds.append(TripletPrediction(tuple(subj), p, tuple(obj), prior.prob(p, subj[1], obj[1])))
        out[s.id] = sort_by_score(preds)
    return out
