"""Command-line entry point: gen-data, train, sample, enhance, eval, selftest."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import torch

from .config import PRESETS, ConfigError, RunConfig
from .denoiser import RelationModel
from .evalsuite import load_predictions, metrics_report, rerank_with_prior, save_predictions
from .numerics import NonFiniteError
from .schedule import from_header

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


def _seed(args, cfg: RunConfig) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("RELGEN_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"RELGEN_SEED must be an integer, got {env!r}") from exc
    return cfg.seed


def _parse_set(items) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def _load_config(args, base: RunConfig | None = None) -> RunConfig:
    cfg = base or PRESETS[args.preset]
    if getattr(args, "config", None):
        doc = json.loads(Path(args.config).read_text())
        if "compat" in doc:        # a world file rather than a run config
            cfg = cfg.override(world_path=str(args.config))
        else:
            cfg = RunConfig.from_dict({**cfg.to_dict(), **doc})
    overrides = _parse_set(getattr(args, "set", None))
    for key in ("steps", "lr", "lam", "kappa", "batch_size", "t_prime", "K", "workers", "similarity_mode"):
        val = getattr(args, key, None)
        if val is not None:
            overrides[key] = val
    cfg = cfg.override(**overrides)
    return cfg.override(seed=_seed(args, cfg))


def _setup(cfg):
    from .pipeline import Setup
    return Setup.from_config(cfg)


def cmd_gen_data(args) -> int:
    from .synthworld import gen_dataset, save_dataset, vocabulary_from_space
    cfg = _load_config(args)
    setup = _setup(cfg)
    n = args.n_scenes or cfg.n_train
    save_dataset(gen_dataset(n, setup.world, cfg.seed, start_id=args.start_id), args.out)
    if args.world_out:
        setup.world.to_json(args.world_out)
    if args.space_out:
        setup.space.to_json(args.space_out)
    if args.vocab_out:
        vocabulary_from_space(setup.world, setup.space).to_json(args.vocab_out)
    print(f"wrote {n} scenes to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .pipeline import new_model, schedule_for, train, training_examples
    from .synthworld import load_dataset
    cfg = _load_config(args)
    setup = _setup(cfg)
    scenes = load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    model = new_model(cfg, setup)
    schedule = schedule_for(cfg)
    examples = training_examples(scenes, setup, cfg, model)
    train(model, schedule, examples, cfg, log_path=out / "log.jsonl", ckpt_dir=out,
          extra_header={"run_config": cfg.to_dict()}, echo=print if args.verbose else None)
    print(f"trained {cfg.steps} steps; final checkpoint {out / 'final.ckpt'}")
    return EXIT_OK


def _load_model(args):
    model, header = RelationModel.load(args.checkpoint)
    cfg = RunConfig.from_dict(header.get("run_config", {}))
    cfg = _load_config(args, base=cfg)
    return model, from_header(header["schedule"]), cfg


def cmd_sample(args) -> int:
    from .pipeline import predict_scenes
    from .synthworld import load_dataset
    model, schedule, cfg = _load_model(args)
    if args.eval_nu is not None:
        cfg = cfg.override(eval_nu=args.eval_nu)
    preds = predict_scenes(load_dataset(args.data), model, schedule, cfg, _setup(cfg),
                           mode=args.mode, workers=cfg.workers)
    save_predictions(preds, args.out)
    print(f"wrote predictions for {len(preds)} scenes to {args.out}")
    return EXIT_OK


def cmd_enhance(args) -> int:
    from .pipeline import enhance_scenes
    from .synthworld import load_dataset
    model, schedule, cfg = _load_model(args)
    preds = enhance_scenes(load_dataset(args.data), load_predictions(args.predictions), model, schedule, cfg,
                           _setup(cfg), workers=cfg.workers)
    save_predictions(preds, args.out)
    print(f"wrote enhanced predictions for {len(preds)} scenes to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .synthworld import load_dataset
    if args.checkpoint:
        _, _, cfg = _load_model(args)
    else:
        cfg = _load_config(args)
    setup = _setup(cfg)
    scenes = load_dataset(args.data)
    preds = load_predictions(args.predictions)
    if args.rerank:
        prior = setup.prior()
        preds = {k: rerank_with_prior(v, prior) for k, v in preds.items()}
        for v in preds.values():
            for p in v:
                p.score = p.refined_score
    images = setup.image_embeddings(scenes, cfg.seed, cfg.eval_nu)
    report = metrics_report(scenes, preds, setup.space, setup.synonym_map(), images)
    text = json.dumps(report, indent=1)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .schedule import build_schedule
    from .selftest import corrupt_schedule, run_selftest, summary
    sched = corrupt_schedule(build_schedule(2000)) if args.corrupt_schedule else None
    results = run_selftest(print, schedule=sched)
    print(summary(results))
    return EXIT_OK if all(r["ok"] for r in results) else EXIT_INVALID


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="relgen", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="run-config JSON (or a world JSON for gen-data)")
            sp.add_argument("--preset", choices=sorted(PRESETS), default="desk")
            sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config field")
        sp.add_argument("--seed", type=int, help="overrides config; RELGEN_SEED is the fallback")
        sp.add_argument("--workers", type=int)

    g = sub.add_parser("gen-data", help="generate a synthetic scene dataset")
    common(g)
    g.add_argument("--out", required=True)
    g.add_argument("--n-scenes", type=int)
    g.add_argument("--start-id", type=int, default=0)
    g.add_argument("--world-out")
    g.add_argument("--space-out")
    g.add_argument("--vocab-out")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    common(t)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="output directory for log and checkpoints")
    t.add_argument("--steps", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--lam", type=float)
    t.add_argument("--kappa", type=float)
    t.add_argument("--batch-size", type=int, dest="batch_size")
    t.add_argument("--verbose", action="store_true")
    t.set_defaults(fn=cmd_train)

    s = sub.add_parser("sample", help="predict triplets for every scene")
    common(s)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--mode", choices=["union_visual", "projected"], dest="similarity_mode")
    s.add_argument("--eval-nu", type=float)
    s.set_defaults(fn=cmd_sample, mode=None)

    e = sub.add_parser("enhance", help="re-noise and denoise existing predictions")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--predictions", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--t-prime", type=int, dest="t_prime")
    e.add_argument("--k", type=int, dest="K")
    e.set_defaults(fn=cmd_enhance)

    v = sub.add_parser("eval", help="compute the metrics report")
    common(v)
    v.add_argument("--data", required=True)
    v.add_argument("--predictions", required=True)
    v.add_argument("--checkpoint")
    v.add_argument("--out")
    v.add_argument("--rerank", action="store_true", help="re-rank with the commonsense prior first")
    v.set_defaults(fn=cmd_eval)

    st = sub.add_parser("selftest", help="run the built-in invariant checks")
    st.add_argument("--corrupt-schedule", action="store_true", help="perturb one posterior coefficient")
    st.set_defaults(fn=cmd_selftest)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    torch.set_num_threads(1)
    try:
        return args.fn(args)
    except (ConfigError, ValueError, KeyError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (NonFiniteError, RuntimeError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # anything unexpected is a runtime failure, not bad input
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
