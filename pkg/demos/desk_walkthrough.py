"""Train a small relation generator on the synthetic world and inspect what it predicts.

Runs in a few minutes on one CPU core:

    python3 demos/desk_walkthrough.py --steps 1500
"""

import argparse

import torch

from relgen.config import DESK
from relgen.evalsuite import gt_triplets, recall_at_k, rerank_with_prior
from relgen.pipeline import (Setup, enhance_scenes, new_model, predict_scenes, prior_predictions,
                             random_baseline_recall, running_average, schedule_for, train, training_examples)
from relgen.synthworld import gen_dataset


def recall(scenes, preds, syn, k=5):
    return recall_at_k([preds[s.id] for s in scenes], [gt_triplets(s) for s in scenes], k, syn)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=1500)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    torch.set_num_threads(1)

    cfg = DESK.override(steps=args.steps, seed=args.seed, log_every=max(1, args.steps // 6))
    setup = Setup.from_config(cfg)
    print(f"world: {len(setup.world.objects)} object categories, {len(setup.world.predicates)} predicates, "
          f"{len(setup.world.compat)} compatible (subject, predicate, object) entries")

    train_scenes = gen_dataset(cfg.n_train, setup.world, seed=1000 + cfg.seed)
    test_scenes = gen_dataset(cfg.n_test, setup.world, seed=2000, start_id=100000)
    scene = train_scenes[0]
    print("\na training scene:")
    for sid, p, oid in scene.triplets:
        print(f"  {scene.obj(sid)[1]} --{p}--> {scene.obj(oid)[1]}")

    model, schedule = new_model(cfg, setup), schedule_for(cfg)
    examples = training_examples(train_scenes, setup, cfg, model)
    ex = examples[0]
    print("its relation sequence (L = 8, GT first, pseudo labels after):")
    print("  " + ", ".join(f"{model.emb.phrases[t]} [{p}]" for t, p in zip(ex.seq.tokens, ex.seq.provenance)))

    print(f"\ntraining {cfg.steps} steps (lam = {cfg.lam}, lr = {cfg.lr})")
    history = train(model, schedule, examples, cfg, echo=print)
    ra = running_average([h["l_simple"] for h in history])
    print(f"running-average l_simple: step 100 {ra[min(99, len(ra) - 1)]:.3f}, final {ra[-1]:.3f}")

    preds = predict_scenes(test_scenes, model, schedule, cfg, setup)
    syn = setup.synonym_map()
    r5 = recall(test_scenes, preds, syn)
    rand = random_baseline_recall(test_scenes, setup.world, cfg.L, 5, seed=0, synonym_map=syn)
    prior_only = recall(test_scenes, prior_predictions(test_scenes, setup.prior(), cfg.L), syn)
    print(f"\nheld-out R@5: model {r5:.3f}, random predicates {rand:.3f}, prior argmax {prior_only:.3f}")

    s = test_scenes[0]
    print("\nheld-out scene, ground truth:")
    for g in gt_triplets(s):
        print(f"  {g[0][0]} --{g[1]}--> {g[2][0]}")
    print("model triplets (score):")
    for p in preds[s.id][:6]:
        print(f"  {p.subject[1]} --{p.predicate}--> {p.object[1]}  ({p.score:.2f})")

    enhanced = enhance_scenes(test_scenes, preds, model, schedule, cfg, setup)
    print(f"\nafter enhancement at t' = {cfg.t_prime}: R@5 {recall(test_scenes, enhanced, syn):.3f}")
    prior = setup.prior()
    reranked = {}
    for k, v in preds.items():
        reranked[k] = rerank_with_prior(v, prior)
        for p in reranked[k]:
            p.score = p.refined_score
    print(f"re-ranked with the commonsense prior: R@5 {recall(test_scenes, reranked, syn):.3f}")


if __name__ == "__main__":
    main()
