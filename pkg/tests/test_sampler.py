import math

import numpy as np
import pytest
import torch

from conftest import make_examples, make_model
from relgen.numerics import make_generator
from relgen.relvocab import RelationSequence
from relgen.sampler import (SamplerConfig, ddim_step, ddim_timesteps, enhance, enhance_batch, enhancement_steps,
                            expand_pair_relations, generate, generate_batch, scene_generators)
from relgen.schedule import build_schedule, q_sample

F64 = torch.float64


def test_timesteps_small_cases():
    assert ddim_timesteps(4, 4) == [4, 3, 2, 1]
    assert ddim_timesteps(4, 1) == [4]
    with pytest.raises(ValueError):
        ddim_timesteps(4, 5)
    with pytest.raises(ValueError):
        ddim_timesteps(4, 0)


@pytest.mark.parametrize("T,n", [(2000, 50), (200, 50), (200, 200), (50, 7), (3, 2)])
def test_timesteps_uniform_spacing(T, n):
    steps = ddim_timesteps(T, n)
    gaps = -np.diff(steps)
    assert len(steps) == n and steps[0] == T and steps[-1] == 1
    assert np.all(gaps > 0) and gaps.max() - gaps.min() <= 1


def test_sampler_config_validation():
    SamplerConfig(50, 0.0, 25, 1).validate(200)
    for bad in (SamplerConfig(n_steps=0), SamplerConfig(n_steps=201), SamplerConfig(t_prime=201),
                SamplerConfig(eta=-1.0), SamplerConfig(K=0)):
        with pytest.raises(ValueError):
            bad.validate(200)


def test_ddim_step_to_zero_returns_prediction():
    s = build_schedule(200)
    g = make_generator(0)
    x_t, x0_hat = torch.randn(4, 3, generator=g, dtype=F64), torch.randn(4, 3, generator=g, dtype=F64)
    assert torch.equal(ddim_step(x_t, x0_hat, 17, 0, s), x0_hat)
    with pytest.raises(ValueError):
        ddim_step(x_t, x0_hat, 5, 5, s)


def test_ddim_step_recovers_noise_and_matches_formula():
    s = build_schedule(200)
    g = make_generator(1)
    x0, eps = torch.randn(4, 3, generator=g, dtype=F64), torch.randn(4, 3, generator=g, dtype=F64)
    t, tp = 120, 80
    x_t = q_sample(x0, t, eps, s)
    ab_t, ab_p = s.alpha_bar[t], s.alpha_bar[tp]
    eps_hat = (x_t - math.sqrt(ab_t) * x0) / math.sqrt(1 - ab_t)
    assert torch.allclose(eps_hat, eps, rtol=0, atol=1e-12)
    f = torch.randn(4, 3, generator=g, dtype=F64)
    e = (x_t - math.sqrt(ab_t) * f) / math.sqrt(1 - ab_t)
    direct = math.sqrt(ab_p) * f + math.sqrt(1 - ab_p) * e
    assert torch.allclose(ddim_step(x_t, f, t, tp, s), direct, rtol=0, atol=1e-12)


def test_ddim_stochastic_step_is_seeded():
    s = build_schedule(200)
    x_t, f = torch.ones(2, 3, dtype=F64), torch.zeros(2, 3, dtype=F64)
    a = ddim_step(x_t, f, 100, 50, s, eta=1.0, rng=make_generator(2))
    b = ddim_step(x_t, f, 100, 50, s, eta=1.0, rng=make_generator(2))
    assert torch.equal(a, b) and not torch.equal(a, ddim_step(x_t, f, 100, 50, s))


@pytest.mark.parametrize("seed", range(3))
def test_telescoping_with_perfect_prediction(seed):
    s = build_schedule(200)
    g = make_generator(seed)
    x0 = torch.randn(4, 5, generator=g, dtype=F64)
    x = torch.randn(4, 5, generator=g, dtype=F64) * 10
    steps = ddim_timesteps(200, 50)
    for i, t in enumerate(steps):
        x = ddim_step(x, x0, t, steps[i + 1] if i + 1 < len(steps) else 0, s)
    assert torch.allclose(x, x0, rtol=0, atol=1e-12)


def _gen_setup(n_pairs=(2, 1, 3), seed=0):
    model = make_model(L=4, seed=seed)
    conds = [ex.cond for ex in make_examples(model, n_pairs, seed=seed)]
    return model, conds, build_schedule(50)


def test_generate_is_deterministic_and_length_l():
    model, conds, s = _gen_setup()
    cfg = SamplerConfig(n_steps=10)
    for c in conds:
        a = generate(c, model, s, cfg, make_generator(3))
        b = generate(c, model, s, cfg, make_generator(3))
        assert a.seq.tokens.tolist() == b.seq.tokens.tolist() and np.array_equal(a.x0, b.x0)
        assert len(a.seq) == 4 and a.probs.shape == (4, 5)
        np.testing.assert_allclose(a.probs.sum(1), 1.0, atol=1e-12)
        assert np.allclose(a.seq.scores, a.probs.max(1))


def test_batched_generation_matches_single_scene_runs():
    model, conds, s = _gen_setup()
    cfg = SamplerConfig(n_steps=10)
    rngs = scene_generators(5, [10, 11, 12])
    batched = generate_batch(conds, model, s, cfg, rngs)
    for c, g, out in zip(conds, scene_generators(5, [10, 11, 12]), batched):
        single = generate(c, model, s, cfg, g)
        assert single.seq.tokens.tolist() == out.seq.tokens.tolist()
        assert np.allclose(single.x0, out.x0, rtol=0, atol=1e-12)


def test_enhancement_steps():
    assert enhancement_steps(200, 50, 0) == []
    assert enhancement_steps(200, 50, 200) == ddim_timesteps(200, 50)
    steps = enhancement_steps(200, 50, 25)
    assert steps[0] == 25 and steps[-1] == 1 and all(a > b for a, b in zip(steps, steps[1:]))


def test_enhance_with_zero_depth_is_identity():
    model, conds, s = _gen_setup()
    rng = np.random.default_rng(0)
    for _ in range(10):
        seq = RelationSequence(rng.integers(0, 5, 4))
        out = enhance(seq, conds[0], model, s, 0, make_generator(1))
        assert out.seq.tokens.tolist() == seq.tokens.tolist()


def test_enhance_full_depth_is_deterministic():
    model, conds, s = _gen_setup()
    seq = RelationSequence([0, 1, 2, 3])
    cfg = SamplerConfig(n_steps=10, t_prime=50)
    a = enhance_batch([seq], conds[:1], model, s, cfg, [make_generator(4)])[0]
    b = enhance_batch([seq], conds[:1], model, s, cfg, [make_generator(4)])[0]
    assert a.seq.tokens.tolist() == b.seq.tokens.tolist()
    with pytest.raises(ValueError):
        enhance(seq, conds[0], model, s, 51, make_generator(4))


def test_expand_pair_relations():
    tokens, owner = expand_pair_relations([[3, 4], [7]], K=2, L=8)
    assert tokens.tolist() == [3, 3, 4, 4, 7, 7, 3, 3]
    assert owner.tolist() == [0, 0, 0, 0, 1, 1, 0, 0]
    tokens, owner = expand_pair_relations([[3, 4], [7]], K=1, L=2)
    assert tokens.tolist() == [3, 4] and owner.tolist() == [0, 0]
    with pytest.raises(ValueError):
        expand_pair_relations([[], []], K=1, L=4)
